#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace stylebank;

namespace {

std::vector<StyleSample> toy_samples(const ToyModel& m, int n = 3) {
  std::vector<StyleSample> out;
  for (int k = 0; k < n; ++k) {
    const auto img = fixtures::striped_style(k, 16);
    out.push_back({m.encode(img), mock_image_embed(img)});
  }
  return out;
}

StyleEmbedding random_embedding(std::uint64_t seed) { return {fixtures::normal_matrix(kStyleTokens, 16, seed)}; }

}  // namespace

TEST(MockEmbed, DeterministicUnitNormAndContentSensitive) {
  const auto img = fixtures::striped_style(1, 16);
  const auto a = mock_image_embed(img);
  EXPECT_EQ(a, mock_image_embed(img));
  EXPECT_EQ(a.size(), kEmbeddingDim);
  Image shifted = img;
  for (float& v : shifted.rgb) v = std::min(1.0f, v + 0.1f);
  EXPECT_NE(a, mock_image_embed(shifted));
  for (int k = 0; k < 20; ++k) {
    double n = 0;
    const auto e = mock_image_embed(fixtures::striped_style(k, 12));
    for (float v : e.values) n += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
}

TEST(Project, ZeroWeightsGiveZeroTokens) {
  const ProjectionWeights a(kEmbeddingDim, 16);
  const auto t = project(a, mock_image_embed(fixtures::striped_style(0, 16)));
  for (float v : t.tokens.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Project, HandComputedTwoDimensional) {
  ProjectionWeights a(2, 1);
  // rows are tokens (4 x 1), columns embedding entries.
  a.weight = FeatureMatrix(4, 2, {1, 2, -1, 0.5f, 0, 3, 2, 2});
  a.bias = {0.5f, 0, -1, 0};
  const auto t = project(a, ImageEmbedding{{2.0f, -1.0f}});
  EXPECT_FLOAT_EQ(t.tokens(0, 0), 1 * 2 + 2 * -1 + 0.5f);
  EXPECT_FLOAT_EQ(t.tokens(1, 0), -1 * 2 + 0.5f * -1);
  EXPECT_FLOAT_EQ(t.tokens(2, 0), 3 * -1 - 1);
  EXPECT_FLOAT_EQ(t.tokens(3, 0), 2 * 2 + 2 * -1);
}

TEST(Project, LinearWithZeroBias) {
  const auto a = init_projection(kEmbeddingDim, 16, 4);
  const auto e1 = mock_image_embed(fixtures::striped_style(0, 16)), e2 = mock_image_embed(fixtures::striped_style(1, 16));
  ImageEmbedding sum{e1.values}, scaled{e1.values};
  for (std::size_t i = 0; i < e1.size(); ++i) {
    sum.values[i] += e2.values[i];
    scaled.values[i] *= 2.5f;
  }
  const auto p1 = project(a, e1), p2 = project(a, e2), ps = project(a, sum), pa = project(a, scaled);
  for (std::size_t i = 0; i < p1.tokens.size(); ++i) {
    EXPECT_NEAR(ps.tokens.data()[i], p1.tokens.data()[i] + p2.tokens.data()[i], 1e-6);
    EXPECT_NEAR(pa.tokens.data()[i], 2.5f * p1.tokens.data()[i], 1e-6);
  }
  EXPECT_THROW(project(a, ImageEmbedding{{1.0f}}), InvalidArgument);
}

TEST(AverageEmbeddings, MidpointSymmetryAndConstantLists) {
  const auto e = random_embedding(1), f = random_embedding(2);
  const std::vector<StyleEmbedding> two{e, f};
  const auto mid = average_embeddings(two);
  for (std::size_t i = 0; i < mid.tokens.size(); ++i)
    EXPECT_NEAR(mid.tokens.data()[i], 0.5f * (e.tokens.data()[i] + f.tokens.data()[i]), 1e-6);
  StyleEmbedding neg = e;
  for (float& v : neg.tokens.data()) v = -v;
  const std::vector<StyleEmbedding> sym{e, neg};
  const auto zero = average_embeddings(sym);
  for (float v : zero.tokens.data()) EXPECT_EQ(v, 0.0f);
  const std::vector<StyleEmbedding> same(5, e);
  EXPECT_EQ(average_embeddings(same), e);
  EXPECT_THROW(average_embeddings({}), InvalidArgument);
}

TEST(AverageEmbeddings, PermutationInvariant) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<StyleEmbedding> list;
    for (std::size_t i = 0, n = 2 + rng.index(8); i < n; ++i) list.push_back(random_embedding(rng.next_u64()));
    const auto ref = average_embeddings(list);
    for (std::size_t i = list.size(); i > 1; --i) std::swap(list[i - 1], list[rng.index(i)]);
    const auto got = average_embeddings(list);
    for (std::size_t i = 0; i < ref.tokens.size(); ++i) EXPECT_NEAR(got.tokens.data()[i], ref.tokens.data()[i], 1e-6);
  }
}

TEST(Crops, FullSizeCropsAndBounds) {
  const auto img = fixtures::striped_style(3, 16);
  for (const auto& c : extract_crops(img, 16, 4, 9)) EXPECT_EQ(c.rgb, img.rgb);
  EXPECT_EQ(extract_crops(img, 8, 5, 3)[2].rgb, extract_crops(img, 8, 5, 3)[2].rgb);
  EXPECT_THROW(extract_crops(img, 17, 1, 0), InvalidArgument);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    for (const auto& w : crop_windows(256, 256, 64, 3, seed)) {
      EXPECT_LE(w.x + 64, 256u);
      EXPECT_LE(w.y + 64, 256u);
    }
  }
}

TEST(Crops, FullImageCropsEmbedLikeTheImage) {
  const std::vector<Image> styles{fixtures::striped_style(0, 16), fixtures::striped_style(1, 16)};
  const auto a = init_projection(kEmbeddingDim, 16, 2);
  const auto whole = embed_styles(styles, a), crops = embed_styles(styles, a, 16, 3, 5);
  for (std::size_t i = 0; i < whole.tokens.size(); ++i) EXPECT_NEAR(crops.tokens.data()[i], whole.tokens.data()[i], 1e-6);
}

TEST(AdapterFile, RoundTripAndLengthCheck) {
  const auto dir = fixtures::temp_dir("adapter");
  const auto a = init_projection(kEmbeddingDim, 16, 3);
  write_projection(a, dir / "a.adp");
  EXPECT_EQ(read_projection(dir / "a.adp"), a);
  auto bytes = serialize_projection(a);
  bytes.pop_back();
  write_file_synced(dir / "short.adp", bytes);
  EXPECT_THROW(read_projection(dir / "short.adp"), FormatError);
}

TEST(Finetune, ZeroStepsLeaveWeightsUnchanged) {
  const ToyModel m;
  const auto samples = toy_samples(m);
  const auto a0 = init_projection(kEmbeddingDim, 16, 7);
  FinetuneOptions opt;
  opt.steps = 0;
  const auto res = finetune_adapter(a0, samples, m, opt);
  EXPECT_EQ(res.weights, a0);
  EXPECT_TRUE(res.loss_history.empty());
}

TEST(Finetune, GradientMatchesCentralDifferences) {
  const ToyModel m;
  const auto samples = toy_samples(m);
  const auto a0 = init_projection(kEmbeddingDim, 16, 7);
  const AdapterObjective obj(m, samples);
  Rng rng(3);
  const auto batch = draw_batch(rng, samples.size(), 8, m.config().train_timesteps);
  std::vector<double> grad;
  obj.loss_and_grad(a0, batch, grad);
  Rng pick(21);
  for (int i = 0; i < 5; ++i) {
    const std::size_t p = pick.index(a0.parameter_count());
    auto plus = a0, minus = a0;
    plus.parameter(p) += 1e-3f;
    minus.parameter(p) -= 1e-3f;
    const double h = static_cast<double>(plus.parameter(p)) - minus.parameter(p);
    const double fd = (obj.loss(plus, batch) - obj.loss(minus, batch)) / h;
    EXPECT_LE(std::abs(grad[p] - fd), 1e-3 * std::abs(fd)) << "parameter " << p;
  }
}

TEST(Finetune, HundredStepsReduceLossAndKeepBackbone) {
  const ToyModel m;
  const auto samples = toy_samples(m);
  const auto before = m.checksum();
  FinetuneOptions opt;
  opt.seed = 11;
  const auto res = finetune_adapter(init_projection(kEmbeddingDim, 16, 7), samples, m, opt);
  ASSERT_EQ(res.loss_history.size(), 100u);
  const auto [first, last] = loss_endpoints(res.loss_history);
  EXPECT_LT(last, 0.9 * first);
  EXPECT_EQ(m.checksum(), before);

  opt.lr = 0.0;
  const auto control = finetune_adapter(init_projection(kEmbeddingDim, 16, 7), samples, m, opt);
  const auto [c_first, c_last] = loss_endpoints(control.loss_history);
  EXPECT_GT(c_last, 0.95 * c_first);
}

TEST(Finetune, RejectsEmptyStyleSetAndBadRate) {
  const ToyModel m;
  EXPECT_THROW(finetune_adapter(init_projection(kEmbeddingDim, 16, 1), {}, m), InvalidArgument);
  FinetuneOptions opt;
  opt.lr = std::nan("");
  EXPECT_THROW(finetune_adapter(init_projection(kEmbeddingDim, 16, 1), toy_samples(m, 1), m, opt), InvalidArgument);
}

TEST(Finetune, DivergenceAbortsWithDiagnostics) {
  const ToyModel m;
  FinetuneOptions opt;
  opt.steps = 5;
  auto a = init_projection(kEmbeddingDim, 16, 1);
  a.bias[0] = std::numeric_limits<float>::infinity();
  try {
    finetune_adapter(a, toy_samples(m, 1), m, opt);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}
