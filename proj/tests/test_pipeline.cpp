#include <gtest/gtest.h>

#include <memory>

#include "fixtures.hpp"

using namespace stylebank;

namespace {

constexpr std::size_t kSteps = 10;
constexpr std::size_t kPx = 16;

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = std::make_unique<ToyModel>();
    set_ = std::make_unique<fixtures::StyleSet>(
        fixtures::make_style_set(*model_, fixtures::temp_dir("pipeline"), 3, kPx, kSteps));
    bank_ = std::make_unique<StyleBank>(distill(set_->reader_ptrs(), KPolicy::single_image(), 5));
  }
  static void TearDownTestSuite() {
    bank_.reset();
    set_.reset();
    model_.reset();
  }

  static StylizeConfig config(std::uint64_t seed = 0) {
    StylizeConfig cfg;
    cfg.steps = kSteps;
    cfg.seed = seed;
    return cfg;
  }

  static StylizeResult with_bank(const Image& content, const StylizeConfig& cfg) {
    return stylize(*model_, content, BankSource(*bank_), set_->average.stats, set_->phi, cfg);
  }

  static inline std::unique_ptr<ToyModel> model_;
  static inline std::unique_ptr<fixtures::StyleSet> set_;
  static inline std::unique_ptr<StyleBank> bank_;
};

/// Checks every site's aligned queries (and the content part of the keys)
/// against the reference statistics.
class AlignmentProbe final : public SelfAttentionHook {
 public:
  AlignmentProbe(const NormStats& norm, std::size_t content_rows) : norm_(norm), rows_(content_rows) {}

  void on_self_attention(const CacheKey& site, FeatureMatrix& q, FeatureMatrix& k, FeatureMatrix&) override {
    FeatureMatrix content_keys(rows_, k.cols());
    std::copy(k.data().begin(), k.data().begin() + static_cast<std::ptrdiff_t>(rows_ * k.cols()), content_keys.data().begin());
    check(compute_moments(q), norm_.query_stats(site));
    check(compute_moments(content_keys), norm_.key_stats(site));
    ++sites;
  }

  int sites = 0;
  double worst = 0.0;

 private:
  void check(const MomentStats& got, const MomentStats& want) {
    for (std::size_t c = 0; c < got.channels(); ++c) {
      const double scale = std::max(1.0, static_cast<double>(std::abs(want.mean[c])));
      worst = std::max(worst, std::abs(got.mean[c] - want.mean[c]) / scale);
      worst = std::max(worst, std::abs(got.variance[c] - want.variance[c]) / std::max(1e-6, static_cast<double>(want.variance[c])));
    }
  }

  const NormStats& norm_;
  std::size_t rows_;
};

}  // namespace

TEST_F(Pipeline, AverageImageIsDeterministicAndComplete) {
  const auto again = generate_average_image(*model_, set_->phi, kSteps, 3, kPx / 2, kPx / 2);
  EXPECT_EQ(again.latent, set_->average.latent);
  EXPECT_EQ(again.stats, set_->average.stats);
  const auto& st = set_->average.stats;
  EXPECT_EQ(st.key_count(), model_->config().blocks * kSteps * model_->config().heads);
  EXPECT_TRUE(st.complete());
  for (const auto* group : {&st.queries, &st.keys, &st.latents})
    for (const auto& m : *group)
      for (float v : m.variance) EXPECT_GE(v, 0.0f);
}

TEST_F(Pipeline, NormStatsFileRoundTrip) {
  const auto dir = fixtures::temp_dir("snrm");
  write_norm_stats(set_->average.stats, dir / "n.snrm");
  EXPECT_EQ(read_norm_stats(dir / "n.snrm"), set_->average.stats);
  auto bytes = read_file(dir / "n.snrm");
  EXPECT_THROW(parse_norm_stats(std::span(bytes).first(bytes.size() - 1), "cut"), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(parse_norm_stats(bytes, "magic"), FormatError);
  EXPECT_THROW(serialize_norm_stats(empty_norm_stats(*model_, 2, 0)), InvalidArgument);
}

TEST_F(Pipeline, AllInterventionsOffIsPlainSampling) {
  auto cfg = config(4);
  cfg.inject_self = cfg.inject_cross = cfg.align_latents = false;
  cfg.w_lineart = cfg.w_depth = 0.0f;
  cfg.prompt = "a house";
  const auto content = fixtures::disc_content(0, kPx);
  const auto out = with_bank(content, cfg);
  ConditionSet cond;
  cond.tokens = model_->text_tokens("a house");
  const auto plain = ddim_sample(*model_, gaussian_latent(kPx / 2, kPx / 2, 4, 4), cond, kSteps);
  EXPECT_EQ(out.latent, plain.latents.back());
  EXPECT_EQ(out.image.rgb, model_->decode(plain.latents.back()).rgb);
}

TEST_F(Pipeline, InjectionTogglesGiveDistinctOutputs) {
  for (int seed = 0; seed < 3; ++seed) {
    const auto content = fixtures::disc_content(seed, kPx);
    std::vector<Image> outs;
    for (bool cross : {false, true})
      for (bool self : {false, true}) {
        auto cfg = config(static_cast<std::uint64_t>(seed));
        cfg.inject_cross = cross;
        cfg.inject_self = self;
        outs.push_back(with_bank(content, cfg).image);
      }
    for (std::size_t i = 0; i < outs.size(); ++i)
      for (std::size_t j = i + 1; j < outs.size(); ++j) EXPECT_GT(fixtures::l2_distance(outs[i].rgb, outs[j].rgb), 0.0);
  }
}

TEST_F(Pipeline, SingleImageBankMatchesSingleCacheInjection) {
  const std::vector<const CacheReader*> one{&set_->readers[0]};
  const auto single = distill(one, KPolicy::single_image(), 9);
  const auto content = fixtures::disc_content(1, kPx);
  const auto cfg = config(1);
  const auto a = stylize(*model_, content, BankSource(single), set_->average.stats, set_->phi, cfg);
  const auto b = run_full_concat_baseline(*model_, content, one, set_->average.stats, set_->phi, cfg);
  EXPECT_EQ(a.latent, b.latent);
  EXPECT_EQ(a.image.rgb, b.image.rgb);
}

TEST_F(Pipeline, SaturatedBankMatchesFullConcatenation) {
  const auto saturated = distill(set_->reader_ptrs(), KPolicy::saturated(), 5);
  for (int seed = 0; seed < 2; ++seed) {
    const auto content = fixtures::disc_content(seed, kPx);
    const auto cfg = config(static_cast<std::uint64_t>(seed));
    const auto a = stylize(*model_, content, BankSource(saturated), set_->average.stats, set_->phi, cfg);
    const auto b = run_full_concat_baseline(*model_, content, set_->reader_ptrs(), set_->average.stats, set_->phi, cfg);
    EXPECT_LE(fixtures::relative_l2(a.image.rgb, b.image.rgb), 1e-5);
  }
}

TEST_F(Pipeline, BankRowOrderDoesNotMatter) {
  StyleBank shuffled = *bank_;
  Rng rng(31);
  for (auto& e : shuffled.entries) {
    for (std::size_t i = e.k(); i > 1; --i) {
      const std::size_t j = rng.index(i);
      std::swap_ranges(e.keys.row(i - 1).begin(), e.keys.row(i - 1).end(), e.keys.row(j).begin());
      std::swap_ranges(e.values.row(i - 1).begin(), e.values.row(i - 1).end(), e.values.row(j).begin());
    }
  }
  const auto content = fixtures::disc_content(2, kPx);
  const auto a = with_bank(content, config(2));
  const auto b = stylize(*model_, content, BankSource(shuffled), set_->average.stats, set_->phi, config(2));
  for (std::size_t i = 0; i < a.image.rgb.size(); ++i) EXPECT_NEAR(a.image.rgb[i], b.image.rgb[i], 1e-6);
}

TEST_F(Pipeline, QueriesAndKeysAreAlignedAtEverySite) {
  const auto content = fixtures::disc_content(0, kPx);
  auto cfg = config(0);
  const ConditionSet cond = detail::stylize_condition(*model_, content, set_->phi, cfg);
  const BankSource source(*bank_);
  StyleInjector injector(set_->average.stats, source, 2);
  AlignmentProbe probe(set_->average.stats, (kPx / 2) * (kPx / 2));
  HookChain chain({&injector, &probe});
  LatentImage x = gaussian_latent(kPx / 2, kPx / 2, 4, 0);
  ddim_sample_range(*model_, x, cond, make_schedule(model_->config(), kSteps), 0, kSteps, &chain, {});
  EXPECT_EQ(probe.sites, static_cast<int>(kSteps * model_->config().blocks * model_->config().heads));
  EXPECT_LE(probe.worst, 1e-4);
}

TEST_F(Pipeline, LatentsMatchReferenceAfterEveryStep) {
  const auto res = with_bank(fixtures::disc_content(3, kPx), config(3));
  ASSERT_EQ(res.trajectory.latents.size(), kSteps + 1);
  for (std::size_t s = 0; s < kSteps; ++s) {
    const auto got = compute_moments(res.trajectory.latents[s + 1].tokens);
    const auto& want = set_->average.stats.latents[s];
    for (std::size_t c = 0; c < got.channels(); ++c) {
      EXPECT_NEAR(got.mean[c], want.mean[c], 1e-4 * std::max(1.0f, std::abs(want.mean[c])));
      EXPECT_NEAR(got.variance[c], want.variance[c], 1e-4 * std::max(1.0f, want.variance[c]));
    }
  }
}

TEST_F(Pipeline, FourthOrderAlignmentRuns) {
  auto cfg = config(1);
  cfg.moment_order = 4;
  cfg.latent_moment_order = 4;
  const auto res = with_bank(fixtures::disc_content(1, kPx), cfg);
  for (float v : res.image.rgb) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NE(res.image.rgb, with_bank(fixtures::disc_content(1, kPx), config(1)).image.rgb);
}

TEST_F(Pipeline, Deterministic) {
  const auto content = fixtures::disc_content(4, kPx);
  EXPECT_EQ(with_bank(content, config(7)).image.rgb, with_bank(content, config(7)).image.rgb);
  EXPECT_NE(with_bank(content, config(7)).image.rgb, with_bank(content, config(8)).image.rgb);
}

TEST_F(Pipeline, RejectsMismatchedInputs) {
  const auto content = fixtures::disc_content(0, kPx);
  auto cfg = config();
  cfg.steps = 8;
  EXPECT_THROW(with_bank(content, cfg), InvalidArgument);

  StyleBank partial = *bank_;
  partial.entries.erase(partial.entries.begin() + 3);
  try {
    stylize(*model_, content, BankSource(partial), set_->average.stats, set_->phi, config());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(to_string(bank_->entries[3].key)), std::string::npos) << e.what();
  }
  EXPECT_THROW(with_bank(fixtures::disc_content(0, 15, 16), config()), InvalidArgument);
  cfg = config();
  cfg.w_depth = 3.0f;
  EXPECT_THROW(with_bank(content, cfg), InvalidArgument);
}

TEST_F(Pipeline, ControlStrengthChangesStructure) {
  const auto content = fixtures::disc_content(2, kPx);
  auto off = config(2);
  off.w_lineart = off.w_depth = 0.0f;
  EXPECT_GT(fixtures::l2_distance(with_bank(content, off).image.rgb, with_bank(content, config(2)).image.rgb), 0.0);
}

class TwoStage : public Pipeline {
 protected:
  static void SetUpTestSuite() {
    Pipeline::SetUpTestSuite();
    const auto dir = fixtures::temp_dir("two_stage");
    low_ = std::make_unique<fixtures::StyleSet>(fixtures::make_style_set(*model_, dir, 3, 8, kSteps));
    high_ = std::make_unique<fixtures::StyleSet>(fixtures::make_style_set(*model_, dir / "..", 3, 16, kSteps, 10));
    bank_lo_ = std::make_unique<StyleBank>(distill(low_->reader_ptrs(), KPolicy::single_image(), 1));
    bank_hi_ = std::make_unique<StyleBank>(distill(high_->reader_ptrs(), KPolicy::single_image(), 1));
  }
  static void TearDownTestSuite() {
    bank_hi_.reset();
    bank_lo_.reset();
    high_.reset();
    low_.reset();
    Pipeline::TearDownTestSuite();
  }

  static StylizeConfig two_stage_config(double f) {
    auto cfg = config(6);
    cfg.two_stage = true;
    cfg.low_res = 8;
    cfg.high_res = 16;
    cfg.structure_fraction = f;
    return cfg;
  }

  static StylizeResult run(const Image& content, const StylizeConfig& cfg) {
    return stylize_two_stage(*model_, content, BankSource(*bank_lo_), BankSource(*bank_hi_), low_->average.stats,
                             high_->average.stats, set_->phi, cfg);
  }

  static inline std::unique_ptr<fixtures::StyleSet> low_, high_;
  static inline std::unique_ptr<StyleBank> bank_lo_, bank_hi_;
};

TEST_F(TwoStage, ZeroFractionIsSingleStageHighRes) {
  const auto content = fixtures::disc_content(5, 24);
  const auto cfg = two_stage_config(0.0);
  const auto sizes = two_stage_inputs(content, cfg);
  EXPECT_EQ(sizes.high.width, 16u);
  const auto single = stylize(*model_, sizes.high, BankSource(*bank_hi_), high_->average.stats, set_->phi, cfg);
  const auto two = run(content, cfg);
  EXPECT_EQ(two.latent, single.latent);
  EXPECT_EQ(two.image.rgb, single.image.rgb);
}

TEST_F(TwoStage, FullFractionIsLowResThenUpsample) {
  const auto content = fixtures::disc_content(5, 24);
  const auto cfg = two_stage_config(1.0);
  const auto sizes = two_stage_inputs(content, cfg);
  EXPECT_EQ(sizes.low.width, 8u);
  const auto low = stylize(*model_, sizes.low, BankSource(*bank_lo_), low_->average.stats, set_->phi, cfg);
  const auto up = upsample_latent(low.latent, 2);
  const auto two = run(content, cfg);
  EXPECT_EQ(two.latent, up);
  EXPECT_EQ(two.image.rgb, model_->decode(up).rgb);
}

TEST_F(TwoStage, DefaultFractionGivesHighResDeterministically) {
  const auto content = fixtures::disc_content(5, 24);
  const auto cfg = two_stage_config(0.3);
  EXPECT_EQ(cfg.structure_steps(), 3u);
  const auto a = run(content, cfg), b = run(content, cfg);
  EXPECT_EQ(a.image.width, 16u);
  EXPECT_EQ(a.image.height, 16u);
  EXPECT_EQ(a.image.rgb, b.image.rgb);
  EXPECT_EQ(a.trajectory.latents.size(), kSteps + 1);
}

TEST_F(TwoStage, NonIntegerScaleRejected) {
  auto cfg = two_stage_config(0.3);
  cfg.high_res = 20;
  EXPECT_THROW(run(fixtures::disc_content(5, 24), cfg), InvalidArgument);
}

TEST(ResizeShortSide, KeepsAspectOnMultiples) {
  const Image wide(40, 20);
  const auto r = resize_short_side(wide, 16, 4);
  EXPECT_EQ(r.height, 16u);
  EXPECT_EQ(r.width, 32u);
  const Image tall(20, 30);
  const auto t = resize_short_side(tall, 8, 2);
  EXPECT_EQ(t.width, 8u);
  EXPECT_EQ(t.height, 12u);
}
