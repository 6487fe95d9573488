#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "stylebank/attention_cache.hpp"
#include "stylebank/error.hpp"
#include "stylebank/image.hpp"
#include "stylebank/norm_stats.hpp"
#include "stylebank/stats.hpp"
#include "stylebank/style_bank.hpp"
#include "stylebank/style_embedding.hpp"
#include "stylebank/toy_model.hpp"

namespace stylebank {

struct StylizeConfig {
  std::size_t steps = 10;
  double structure_fraction = 0.3;  ///< share of early steps run at low resolution
  bool two_stage = false;
  std::size_t low_res = 16;   ///< shortest side in pixels, two-stage only
  std::size_t high_res = 32;
  int moment_order = 2;         ///< query/key alignment
  int latent_moment_order = 2;  ///< post-step latent alignment
  float w_lineart = 1.0f;
  float w_depth = 1.0f;
  bool inject_self = true;
  bool inject_cross = true;
  bool align_latents = true;
  bool align_latents_in_structure_stage = true;
  std::uint64_t seed = 0;
  std::string prompt;

  void validate() const {
    if (steps == 0) throw InvalidArgument("stylize: steps must be at least 1");
    if (!(structure_fraction >= 0.0 && structure_fraction <= 1.0)) {
      throw InvalidArgument("stylize: structure_fraction must lie in [0, 1]");
    }
    for (int o : {moment_order, latent_moment_order}) {
      if (o != 2 && o != 4) throw InvalidArgument("stylize: moment order must be 2 or 4");
    }
    check_strengths(w_lineart, w_depth);
    if (two_stage) {
      if (low_res == 0 || high_res == 0 || high_res % low_res != 0) {
        throw InvalidArgument("stylize: high_res " + std::to_string(high_res) + " is not an integer multiple of low_res " +
                              std::to_string(low_res));
      }
    }
  }

  /// Steps run at low resolution in the two-stage schedule.
  std::size_t structure_steps() const {
    return static_cast<std::size_t>(std::ceil(structure_fraction * static_cast<double>(steps) - 1e-9));
  }
};

// ---------------------------------------------------------------------------
// Style key/value sources

/// Supplies the style rows appended to self-attention at each site.
class KvSource {
 public:
  virtual ~KvSource() = default;
  virtual CacheEntry fetch(const CacheKey& key) const = 0;
  virtual bool contains(const CacheKey& key) const = 0;
  /// Number of sampling steps the source was built for.
  virtual std::size_t steps() const = 0;
};

/// In-memory distilled bank.
class BankSource final : public KvSource {
 public:
  explicit BankSource(const StyleBank& bank) : bank_(bank) {}

  CacheEntry fetch(const CacheKey& key) const override {
    const BankEntry* e = bank_.find(key);
    if (!e) throw FormatError(FormatErrc::not_found, "style bank has no entry for " + to_string(key));
    return {key, e->keys, e->values};
  }
  bool contains(const CacheKey& key) const override { return bank_.find(key) != nullptr; }
  std::size_t steps() const override { return bank_.steps(); }

 private:
  const StyleBank& bank_;
};

/// Full concatenation of every cache, read from disk at each fetch.
class StreamingSource final : public KvSource {
 public:
  explicit StreamingSource(std::span<const CacheReader* const> readers) : readers_(readers.begin(), readers.end()) {
    if (readers_.empty()) throw InvalidArgument("streaming source: no caches");
  }

  CacheEntry fetch(const CacheKey& key) const override { return iter_group(readers_, key); }
  bool contains(const CacheKey& key) const override {
    return std::all_of(readers_.begin(), readers_.end(), [&](const CacheReader* r) { return r->find(key) != nullptr; });
  }
  std::size_t steps() const override {
    std::size_t s = 0;
    for (const auto& rec : readers_.front()->index()) s = std::max<std::size_t>(s, rec.key.timestep + 1u);
    return s;
  }

 private:
  std::vector<const CacheReader*> readers_;
};

// ---------------------------------------------------------------------------
// Hooks

/// Aligns content queries and keys to the reference statistics, then
/// appends the style rows: [K_c_hat | K*], [V_c | V*].
class StyleInjector final : public SelfAttentionHook {
 public:
  StyleInjector(const NormStats& norm, const KvSource& source, int order) : norm_(norm), source_(source), order_(order) {}

  void on_self_attention(const CacheKey& site, FeatureMatrix& q, FeatureMatrix& k, FeatureMatrix& v) override {
    q = align_moments(q, norm_.query_stats(site), order_);
    k = align_moments(k, norm_.key_stats(site), order_);
    const CacheEntry style = source_.fetch(site);
    if (style.keys.cols() != k.cols()) {
      throw FormatError(FormatErrc::shape_mismatch, "style rows at " + to_string(site) + " have dim " +
                                                        std::to_string(style.keys.cols()) + ", model uses " +
                                                        std::to_string(k.cols()));
    }
    k = vconcat(k, style.keys);
    v = vconcat(v, style.values);
  }

 private:
  const NormStats& norm_;
  const KvSource& source_;
  int order_;
};

/// Records query/key moments per site into a NormStats.
class StatsRecorder final : public SelfAttentionHook {
 public:
  explicit StatsRecorder(NormStats& out) : out_(out) {}

  void on_self_attention(const CacheKey& site, FeatureMatrix& q, FeatureMatrix& k, FeatureMatrix&) override {
    const std::size_t i = out_.key_index(site);
    out_.queries[i] = compute_moments(q);
    out_.keys[i] = compute_moments(k);
  }

 private:
  NormStats& out_;
};

/// Records self-attention keys and values per site.
class CacheRecorder final : public SelfAttentionHook {
 public:
  void on_self_attention(const CacheKey& site, FeatureMatrix&, FeatureMatrix& k, FeatureMatrix& v) override {
    entries_.push_back({site, k, v});
  }

  /// Recorded entries in ascending key order.
  std::vector<CacheEntry> take_sorted() {
    std::sort(entries_.begin(), entries_.end(), [](const CacheEntry& a, const CacheEntry& b) { return a.key < b.key; });
    return std::move(entries_);
  }

 private:
  std::vector<CacheEntry> entries_;
};

/// Runs several hooks in order on the same site.
class HookChain final : public SelfAttentionHook {
 public:
  explicit HookChain(std::vector<SelfAttentionHook*> hooks) : hooks_(std::move(hooks)) {}

  void on_self_attention(const CacheKey& site, FeatureMatrix& q, FeatureMatrix& k, FeatureMatrix& v) override {
    for (auto* h : hooks_) h->on_self_attention(site, q, k, v);
  }

 private:
  std::vector<SelfAttentionHook*> hooks_;
};

inline NormStats empty_norm_stats(const ToyModel& model, std::size_t steps, std::uint64_t seed) {
  const auto& c = model.config();
  return NormStats(static_cast<std::uint32_t>(steps), static_cast<std::uint32_t>(c.blocks),
                   static_cast<std::uint32_t>(c.heads), static_cast<std::uint32_t>(c.head_dim()),
                   static_cast<std::uint32_t>(c.latent_channels), seed);
}

// ---------------------------------------------------------------------------
// Style-side preparation

struct AverageImage {
  LatentImage latent;
  NormStats stats;
};

/// Samples an image from seeded noise conditioned only on the style
/// embedding and records query/key moments per site and latent moments per
/// step.
inline AverageImage generate_average_image(const ToyModel& model, const StyleEmbedding& phi, std::size_t steps,
                                           std::uint64_t seed, std::size_t latent_height, std::size_t latent_width) {
  AverageImage out{{}, empty_norm_stats(model, steps, seed)};
  StatsRecorder recorder(out.stats);
  ConditionSet cond;
  cond.tokens = phi.tokens;
  const LatentImage noise = gaussian_latent(latent_height, latent_width, model.config().latent_channels, seed);
  auto traj = ddim_sample(model, noise, cond, steps, &recorder,
                          [&](std::size_t s, LatentImage& x) { out.stats.latents[s] = compute_moments(x.tokens); });
  out.latent = std::move(traj.latents.back());
  return out;
}

struct StyleInversion {
  std::vector<CacheEntry> entries;  ///< ascending key order
  NormStats stats;                  ///< the image's own query/key and latent moments
  LatentImage noise;                ///< inverted x_T
};

/// DDIM-inverts a style image under the empty prompt, recording its
/// self-attention keys and values at every site.
inline StyleInversion invert_style(const ToyModel& model, const Image& style, std::size_t steps) {
  StyleInversion out{{}, empty_norm_stats(model, steps, 0), {}};
  CacheRecorder cache;
  StatsRecorder stats(out.stats);
  HookChain chain({&cache, &stats});
  ConditionSet cond;
  cond.tokens = model.text_tokens("");
  auto traj = ddim_invert(model, model.encode(style), cond, steps, &chain);
  for (std::size_t s = 0; s < steps; ++s) out.stats.latents[s] = compute_moments(traj.latents[s + 1].tokens);
  out.entries = cache.take_sorted();
  out.noise = std::move(traj.latents.front());
  return out;
}

// ---------------------------------------------------------------------------
// Stylization

struct StylizeResult {
  LatentImage latent;
  Image image;
  DdimTrajectory trajectory;
};

/// Resizes so the shortest side equals `res`; the long side is rounded to a
/// multiple of `multiple`.
inline Image resize_short_side(const Image& img, std::size_t res, std::size_t multiple = 2) {
  if (res == 0 || res % multiple != 0) throw InvalidArgument("resolution " + std::to_string(res) + " must be a positive multiple of " + std::to_string(multiple));
  const std::size_t shortest = std::min(img.width, img.height);
  auto scale = [&](std::size_t side) {
    const double v = static_cast<double>(side) * static_cast<double>(res) / static_cast<double>(shortest);
    return std::max<std::size_t>(multiple, static_cast<std::size_t>(std::lround(v / static_cast<double>(multiple))) * multiple);
  };
  const std::size_t w = img.width <= img.height ? res : scale(img.width);
  const std::size_t h = img.width <= img.height ? scale(img.height) : res;
  return resize_image(img, w, h);
}

namespace detail {

inline void check_stage_inputs(const ToyModel& model, const KvSource* source, const NormStats& norm,
                               const StylizeConfig& cfg, bool need_source, std::size_t first, std::size_t last) {
  const auto& mc = model.config();
  if (norm.steps != cfg.steps) {
    throw InvalidArgument("stylize: norm stats cover " + std::to_string(norm.steps) + " steps, config asks for " +
                          std::to_string(cfg.steps));
  }
  if (norm.layers != mc.blocks || norm.heads != mc.heads || norm.head_dim != mc.head_dim() ||
      norm.latent_channels != mc.latent_channels) {
    throw InvalidArgument("stylize: norm stats dimensions do not match the model");
  }
  if (!need_source) return;
  if (source->steps() != cfg.steps) {
    throw InvalidArgument("stylize: style features cover " + std::to_string(source->steps()) +
                          " steps, config asks for " + std::to_string(cfg.steps));
  }
  for (std::size_t s = first; s < last; ++s)
    for (std::size_t l = 0; l < mc.blocks; ++l)
      for (std::size_t h = 0; h < mc.heads; ++h) {
        const CacheKey key{static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(s), static_cast<std::uint16_t>(h)};
        if (!source->contains(key)) throw FormatError(FormatErrc::not_found, "style features lack " + to_string(key));
      }
}

inline ConditionSet stylize_condition(const ToyModel& model, const Image& content, const StyleEmbedding& phi,
                                      const StylizeConfig& cfg) {
  ConditionSet cond;
  cond.tokens = model.text_tokens(cfg.prompt);
  if (cfg.inject_cross) cond.tokens = vconcat(cond.tokens, phi.tokens);
  cond.w_lineart = cfg.w_lineart;
  cond.w_depth = cfg.w_depth;
  if (cfg.w_lineart != 0.0f || cfg.w_depth != 0.0f) cond.control = control_maps_from_image(content);
  return cond;
}

/// Runs sampling steps [first, last) of one resolution stage on `x`.
inline void run_stage(const ToyModel& model, LatentImage& x, const Image& content, const KvSource* source,
                      const NormStats& norm, const StyleEmbedding& phi, const StylizeConfig& cfg, std::size_t first,
                      std::size_t last, bool align_latents, DdimTrajectory& traj) {
  if (content.width != 2 * x.width || content.height != 2 * x.height) {
    throw InvalidArgument("stylize: content image does not match the latent size");
  }
  check_stage_inputs(model, source, norm, cfg, cfg.inject_self, first, last);
  const ConditionSet cond = stylize_condition(model, content, phi, cfg);
  const DdimSchedule schedule = make_schedule(model.config(), cfg.steps);
  std::optional<StyleInjector> injector;
  if (cfg.inject_self) injector.emplace(norm, *source, cfg.moment_order);
  StepCallback after;
  if (align_latents) {
    after = [&](std::size_t s, LatentImage& lat) {
      lat.tokens = align_moments(lat.tokens, norm.latents[s], cfg.latent_moment_order);
    };
  }
  ddim_sample_range(model, x, cond, schedule, first, last, injector ? &*injector : nullptr, after, &traj);
}

}  // namespace detail

/// Stylizes `content` at its own resolution (even dimensions).
///
/// With every intervention off (no self injection, no cross injection, no
/// latent alignment, zero control strengths) this is a plain DDIM sample
/// from the seeded noise under the prompt tokens.
inline StylizeResult stylize(const ToyModel& model, const Image& content, const KvSource& source,
                             const NormStats& norm, const StyleEmbedding& phi, const StylizeConfig& cfg) {
  cfg.validate();
  if (content.width % 2 || content.height % 2 || content.empty()) {
    throw InvalidArgument("stylize: content dimensions must be even");
  }
  StylizeResult res;
  LatentImage x = gaussian_latent(content.height / 2, content.width / 2, model.config().latent_channels, cfg.seed);
  res.trajectory.latents.push_back(x);
  detail::run_stage(model, x, content, &source, norm, phi, cfg, 0, cfg.steps, cfg.align_latents, res.trajectory);
  res.image = model.decode(x);
  res.latent = std::move(x);
  return res;
}

/// Pixel sizes used by the two-stage schedule for a content image.
struct TwoStageSizes {
  std::size_t factor = 1;
  Image low;
  Image high;
};

inline TwoStageSizes two_stage_inputs(const Image& content, const StylizeConfig& cfg) {
  cfg.validate();
  if (cfg.high_res % cfg.low_res != 0) throw InvalidArgument("stylize: resolutions are not integer-scalable");
  TwoStageSizes out;
  out.factor = cfg.high_res / cfg.low_res;
  out.high = resize_short_side(content, cfg.high_res, 2 * out.factor);
  out.low = resize_image(content, out.high.width / out.factor, out.high.height / out.factor);
  return out;
}

/// Two-stage schedule: the first ceil(f * steps) steps at low resolution,
/// then the latent is upsampled bilinearly and the remaining steps run at
/// high resolution with control maps from the high-resolution content. The
/// seeded noise is drawn at the resolution of the first stage that runs.
inline StylizeResult stylize_two_stage(const ToyModel& model, const Image& content, const KvSource& source_lo,
                                       const KvSource& source_hi, const NormStats& norm_lo, const NormStats& norm_hi,
                                       const StyleEmbedding& phi, const StylizeConfig& cfg) {
  const TwoStageSizes sizes = two_stage_inputs(content, cfg);
  const std::size_t m = cfg.structure_steps();
  const std::size_t channels = model.config().latent_channels;
  const Image& first = m > 0 ? sizes.low : sizes.high;
  StylizeResult res;
  LatentImage x = gaussian_latent(first.height / 2, first.width / 2, channels, cfg.seed);
  res.trajectory.latents.push_back(x);
  if (m > 0) {
    detail::run_stage(model, x, sizes.low, &source_lo, norm_lo, phi, cfg, 0, m,
                      cfg.align_latents && cfg.align_latents_in_structure_stage, res.trajectory);
    x = upsample_latent(x, sizes.factor);
  }
  if (m < cfg.steps) {
    detail::run_stage(model, x, sizes.high, &source_hi, norm_hi, phi, cfg, m, cfg.steps, cfg.align_latents,
                      res.trajectory);
  }
  res.image = model.decode(x);
  res.latent = std::move(x);
  return res;
}

/// Reference path with no distillation: every step reads the full
/// per-image caches from disk and concatenates all of their rows.
inline StylizeResult run_full_concat_baseline(const ToyModel& model, const Image& content,
                                      std::span<const CacheReader* const> caches, const NormStats& norm,
                                      const StyleEmbedding& phi, const StylizeConfig& cfg) {
  const StreamingSource source(caches);
  return stylize(model, content, source, norm, phi, cfg);
}

}  // namespace stylebank
