#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "stylebank/attention_cache.hpp"
#include "stylebank/digest.hpp"
#include "stylebank/error.hpp"
#include "stylebank/image.hpp"
#include "stylebank/matrix.hpp"
#include "stylebank/rng.hpp"

namespace stylebank {

// ---------------------------------------------------------------------------
// Attention

template <class T>
void softmax_rows_inplace(Matrix<T>& s) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T sum{};
    for (T& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    const T inv = T(1) / sum;
    for (T& v : row) v *= inv;
  }
}

/// Row-stochastic matrix softmax(Q K^T * scale).
template <class T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k, T scale) {
  if (q.cols() != k.cols()) {
    throw InvalidArgument("attention: query dim " + std::to_string(q.cols()) + " != key dim " + std::to_string(k.cols()));
  }
  if (k.rows() == 0) throw InvalidArgument("attention: no keys");
  Matrix<T> s = matmul_bt(q, k);
  for (T& v : s.data()) v *= scale;
  softmax_rows_inplace(s);
  return s;
}

/// softmax(Q K^T * scale) V with row-max subtraction.
template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, T scale) {
  if (k.rows() != v.rows()) {
    throw InvalidArgument("attention: " + std::to_string(k.rows()) + " keys vs " + std::to_string(v.rows()) + " values");
  }
  return matmul(attention_weights(q, k, scale), v);
}

// ---------------------------------------------------------------------------
// Latents and conditioning

/// Latent grid; tokens are pixels in row-major order, columns are channels.
struct LatentImage {
  std::size_t height = 0;
  std::size_t width = 0;
  FeatureMatrix tokens;

  std::size_t channels() const noexcept { return tokens.cols(); }
  bool operator==(const LatentImage&) const = default;
};

inline LatentImage gaussian_latent(std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  LatentImage x{height, width, FeatureMatrix(height * width, channels)};
  for (float& v : x.tokens.data()) v = static_cast<float>(rng.normal());
  return x;
}

/// Bilinear upsampling of a latent by an integer factor.
inline LatentImage upsample_latent(const LatentImage& x, std::size_t factor) {
  LatentImage out{x.height * factor, x.width * factor, {}};
  out.tokens = FeatureMatrix(out.height * out.width, x.channels(),
                             resize_bilinear(x.tokens.storage(), x.width, x.height, x.channels(), out.width, out.height));
  return out;
}

/// Structure signals extracted from a content image at latent resolution.
struct ControlMaps {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> lineart;  ///< Sobel edge magnitude of luma
  std::vector<float> depth;    ///< blurred luma

  bool operator==(const ControlMaps&) const = default;
};

/// Control maps for an image whose latent is half its size.
inline ControlMaps control_maps_from_image(const Image& img) {
  if (img.width % 2 || img.height % 2) throw InvalidArgument("control maps: image dimensions must be even");
  const auto gray = grayscale(img);
  ControlMaps m;
  m.width = img.width / 2;
  m.height = img.height / 2;
  m.lineart = pool_map(sobel_magnitude(gray, img.width, img.height), img.width, img.height, 2);
  m.depth = pool_map(blur5(gray, img.width, img.height), img.width, img.height, 2);
  return m;
}

inline void check_strengths(float w_lineart, float w_depth) {
  for (float w : {w_lineart, w_depth}) {
    if (!std::isfinite(w) || w < 0.0f || w > 2.0f) {
      throw InvalidArgument("control strength " + std::to_string(w) + " outside [0, 2]");
    }
  }
}

/// Everything the denoiser is conditioned on besides the latent.
struct ConditionSet {
  FeatureMatrix tokens;  ///< cross-attention sequence (rows x model dim)
  std::optional<ControlMaps> control;
  float w_lineart = 0.0f;
  float w_depth = 0.0f;
};

/// Observes or replaces per-head self-attention inputs. `site.timestep` is
/// the sampling step index. Replacement K and V must keep equal row counts.
class SelfAttentionHook {
 public:
  virtual ~SelfAttentionHook() = default;
  virtual void on_self_attention(const CacheKey& site, FeatureMatrix& q, FeatureMatrix& k, FeatureMatrix& v) = 0;
};

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  std::uint64_t seed = 1234;
  std::size_t latent_channels = 4;
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t blocks = 2;
  std::size_t mlp_dim = 32;
  std::size_t cond_tokens = 4;
  int train_timesteps = 1000;
  int max_timestep = 700;     ///< noisiest level used by the sampling schedule
  float residual_gain = 0.2f;

  std::size_t head_dim() const noexcept { return dim / heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Cosine cumulative signal level, alpha_bar(0) = 1 at t = 0 continuous.
inline double cosine_alpha_bar(double t, int train_timesteps) {
  constexpr double s = 0.008;
  auto f = [&](double u) {
    const double c = std::cos((u / train_timesteps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  return f(t) / f(0.0);
}

/// DDIM timesteps for a given step count: level 0 is the noisiest.
struct DdimSchedule {
  std::vector<int> timesteps;
  std::vector<double> alpha_bar;

  std::size_t steps() const noexcept { return timesteps.size(); }
  /// Signal level after step s; the final step lands on the clean latent.
  double alpha_bar_next(std::size_t s) const { return s + 1 < alpha_bar.size() ? alpha_bar[s + 1] : 1.0; }
};

inline DdimSchedule make_schedule(const ModelConfig& cfg, std::size_t steps) {
  if (steps == 0) throw InvalidArgument("schedule: steps must be at least 1");
  DdimSchedule sch;
  for (std::size_t s = 0; s < steps; ++s) {
    const int t = static_cast<int>(std::lround(static_cast<double>(cfg.max_timestep) * static_cast<double>(steps - s) /
                                               static_cast<double>(steps)));
    sch.timesteps.push_back(t);
    sch.alpha_bar.push_back(cosine_alpha_bar(t, cfg.train_timesteps));
  }
  return sch;
}

/// Activations kept by a forward pass for back-propagation.
template <class T>
struct ForwardTape {
  struct Head {
    Matrix<T> q, k, v, p;
  };
  struct Block {
    Matrix<T> self_in;
    std::vector<Head> self;
    Matrix<T> cross_in;
    std::vector<Head> cross;
    Matrix<T> mlp_in;
    Matrix<T> act;
  };
  std::vector<Block> blocks;
  T output_gain{};
};

/// Fixed-weight miniature latent denoiser.
///
/// eps(x, t) = sqrt(1 - ab) x + gain sqrt(ab) net(x, t, cond) with
/// ab = alpha_bar(t). The first term is the exact noise predictor for a unit
/// Gaussian data prior. The sqrt(ab) factor keeps the implied clean-latent
/// estimate bounded at high noise. The network adds self-attention, cross-attention and MLP blocks on a flat
/// token grid. Weights are drawn once from the seed and never change.
class ToyModel {
 public:
  struct Block {
    std::vector<FeatureMatrix> wq, wk, wv;     // per head, dim x head_dim
    FeatureMatrix wo;                          // dim x dim
    std::vector<FeatureMatrix> cq, ck, cv;     // cross-attention, per head
    FeatureMatrix co;
    FeatureMatrix w1, b1, w2, b2;              // MLP, biases as 1-row matrices
  };

  explicit ToyModel(ModelConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.heads == 0 || cfg_.dim % cfg_.heads != 0) throw InvalidArgument("model: dim must divide by heads");
    Rng rng(mix_seed(cfg_.seed, 0x70796d6f64656cull));
    auto gaussian = [&](std::size_t r, std::size_t c, double stddev) {
      FeatureMatrix m(r, c);
      for (float& v : m.data()) v = static_cast<float>(rng.normal() * stddev);
      return m;
    };
    const std::size_t d = cfg_.dim, hd = cfg_.head_dim(), ch = cfg_.latent_channels;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    w_in_ = gaussian(ch, d, 1.0 / std::sqrt(static_cast<double>(ch)));
    b_in_ = gaussian(1, d, 0.1);
    t_freq_ = gaussian(1, d, 1.5);
    t_phase_ = gaussian(1, d, std::numbers::pi);
    u_lineart_ = gaussian(1, d, 1.0);
    u_depth_ = gaussian(1, d, 1.0);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      Block blk;
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        blk.wq.push_back(gaussian(d, hd, inv_sqrt_d));
        blk.wk.push_back(gaussian(d, hd, inv_sqrt_d));
        blk.wv.push_back(gaussian(d, hd, inv_sqrt_d));
      }
      blk.wo = gaussian(d, d, 0.5 * inv_sqrt_d);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        blk.cq.push_back(gaussian(d, hd, inv_sqrt_d));
        blk.ck.push_back(gaussian(d, hd, inv_sqrt_d));
        blk.cv.push_back(gaussian(d, hd, inv_sqrt_d));
      }
      blk.co = gaussian(d, d, 0.5 * inv_sqrt_d);
      blk.w1 = gaussian(d, cfg_.mlp_dim, inv_sqrt_d);
      blk.b1 = gaussian(1, cfg_.mlp_dim, 0.1);
      blk.w2 = gaussian(cfg_.mlp_dim, d, 0.5 / std::sqrt(static_cast<double>(cfg_.mlp_dim)));
      blk.b2 = FeatureMatrix(1, d);
      blocks_.push_back(std::move(blk));
    }
    w_out_ = gaussian(d, ch, inv_sqrt_d);
    build_codec(rng);
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  /// Cross-attention tokens for a text prompt: normal draws seeded by the
  /// prompt's FNV-1a hash.
  FeatureMatrix text_tokens(std::string_view prompt) const {
    Rng rng(fnv1a(prompt));
    FeatureMatrix m(cfg_.cond_tokens, cfg_.dim);
    for (float& v : m.data()) v = static_cast<float>(rng.normal());
    return m;
  }

  /// Control residual added to the token stream before the first block.
  FeatureMatrix control_residual(const ControlMaps& maps, float w_lineart, float w_depth, std::size_t height,
                                 std::size_t width) const {
    check_strengths(w_lineart, w_depth);
    if (maps.height != height || maps.width != width) {
      throw InvalidArgument("control maps are " + std::to_string(maps.width) + "x" + std::to_string(maps.height) +
                            ", latent is " + std::to_string(width) + "x" + std::to_string(height));
    }
    FeatureMatrix r(height * width, cfg_.dim);
    for (std::size_t i = 0; i < r.rows(); ++i) {
      const float l = w_lineart * maps.lineart[i];
      const float dp = w_depth * maps.depth[i];
      for (std::size_t j = 0; j < cfg_.dim; ++j) r(i, j) = l * u_lineart_(0, j) + dp * u_depth_(0, j);
    }
    return r;
  }

  /// Noise estimate for latent tokens `x` at diffusion time `t`.
  ///
  /// `step` labels hook sites. Hooks only run in single precision. When
  /// `tape` is given, activations needed by backward_cond are recorded.
  template <class T>
  Matrix<T> forward(const Matrix<T>& x, double t, std::size_t step, const Matrix<T>& cond,
                    const Matrix<T>* control, SelfAttentionHook* hook = nullptr,
                    ForwardTape<T>* tape = nullptr) const {
    if (x.cols() != cfg_.latent_channels) throw InvalidArgument("forward: latent channel count mismatch");
    if (cond.cols() != cfg_.dim || cond.rows() == 0) throw InvalidArgument("forward: condition tokens must be n x dim");
    const std::size_t n = x.rows(), d = cfg_.dim, hd = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Matrix<T> h = matmul(x, w_in_);
    const double tn = t / cfg_.train_timesteps;
    for (std::size_t j = 0; j < d; ++j) {
      const T bias = static_cast<T>(b_in_(0, j)) +
                     static_cast<T>(0.5 * std::sin(t_freq_(0, j) * tn + t_phase_(0, j)));
      for (std::size_t i = 0; i < n; ++i) h(i, j) += bias;
    }
    if (control) {
      if (control->rows() != n || control->cols() != d) throw InvalidArgument("forward: control residual shape");
      for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += control->data()[i];
    }
    if (tape) tape->blocks.assign(cfg_.blocks, {});

    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const Block& blk = blocks_[b];
      auto* bt = tape ? &tape->blocks[b] : nullptr;

      // Self-attention.
      if (bt) bt->self_in = h;
      Matrix<T> heads_out(n, d);
      for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
        Matrix<T> q = matmul(h, blk.wq[hh]);
        Matrix<T> k = matmul(h, blk.wk[hh]);
        Matrix<T> v = matmul(h, blk.wv[hh]);
        if constexpr (std::is_same_v<T, float>) {
          if (hook) {
            const CacheKey site{static_cast<std::uint16_t>(b), static_cast<std::uint16_t>(step),
                                static_cast<std::uint16_t>(hh)};
            hook->on_self_attention(site, q, k, v);
          }
        }
        Matrix<T> p = attention_weights(q, k, scale);
        if (k.rows() != v.rows()) throw InvalidArgument("forward: hook left keys and values with different row counts");
        const Matrix<T> o = matmul(p, v);
        for (std::size_t i = 0; i < n; ++i) std::copy(o.row(i).begin(), o.row(i).end(), heads_out.row(i).begin() + hh * hd);
        if (bt) bt->self.push_back({std::move(q), std::move(k), std::move(v), std::move(p)});
      }
      add_inplace(h, matmul(heads_out, blk.wo));

      // Cross-attention on the condition sequence.
      if (bt) bt->cross_in = h;
      Matrix<T> cross_out(n, d);
      for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
        Matrix<T> q = matmul(h, blk.cq[hh]);
        Matrix<T> k = matmul(cond, blk.ck[hh]);
        Matrix<T> v = matmul(cond, blk.cv[hh]);
        Matrix<T> p = attention_weights(q, k, scale);
        const Matrix<T> o = matmul(p, v);
        for (std::size_t i = 0; i < n; ++i) std::copy(o.row(i).begin(), o.row(i).end(), cross_out.row(i).begin() + hh * hd);
        if (bt) bt->cross.push_back({std::move(q), std::move(k), std::move(v), std::move(p)});
      }
      add_inplace(h, matmul(cross_out, blk.co));

      // MLP.
      if (bt) bt->mlp_in = h;
      Matrix<T> u = matmul(h, blk.w1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cfg_.mlp_dim; ++j) u(i, j) = std::tanh(u(i, j) + static_cast<T>(blk.b1(0, j)));
      Matrix<T> m = matmul(u, blk.w2);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) h(i, j) += m(i, j) + static_cast<T>(blk.b2(0, j));
      if (bt) bt->act = std::move(u);
    }

    Matrix<T> eps = matmul(h, w_out_);
    const double ab = cosine_alpha_bar(t, cfg_.train_timesteps);
    const T skip = static_cast<T>(std::sqrt(1.0 - ab));
    const T gain = static_cast<T>(cfg_.residual_gain * std::sqrt(ab));
    if (tape) tape->output_gain = gain;
    for (std::size_t i = 0; i < eps.size(); ++i) eps.data()[i] = skip * x.data()[i] + gain * eps.data()[i];
    return eps;
  }

  /// Gradient of a scalar loss with respect to the condition tokens, given
  /// dL/d(eps) and the tape of the forward pass that produced eps.
  template <class T>
  Matrix<T> backward_cond(const ForwardTape<T>& tape, const Matrix<T>& d_eps, std::size_t cond_rows) const {
    const std::size_t d = cfg_.dim, hd = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Matrix<T> dh = matmul_bt(d_eps, w_out_);
    for (T& v : dh.data()) v *= tape.output_gain;
    Matrix<T> d_cond(cond_rows, d);

    for (std::size_t b = cfg_.blocks; b-- > 0;) {
      const Block& blk = blocks_[b];
      const auto& bt = tape.blocks[b];

      // MLP: h += tanh(h W1 + b1) W2 + b2
      Matrix<T> du = matmul_bt(dh, blk.w2);
      for (std::size_t i = 0; i < du.size(); ++i) {
        const T a = bt.act.data()[i];
        du.data()[i] *= T(1) - a * a;
      }
      add_inplace(dh, matmul_bt(du, blk.w1));

      // Cross-attention: only keys/values depend on the condition.
      const Matrix<T> d_cross = matmul_bt(dh, blk.co);
      for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
        const auto& ht = bt.cross[hh];
        auto g = attention_backward(ht, column_slice(d_cross, hh * hd, hd), scale);
        add_inplace(dh, matmul_bt(g.dq, blk.cq[hh]));
        add_inplace(d_cond, matmul_bt(g.dk, blk.ck[hh]));
        add_inplace(d_cond, matmul_bt(g.dv, blk.cv[hh]));
      }

      // Self-attention: q, k, v all come from the block input.
      const Matrix<T> d_self = matmul_bt(dh, blk.wo);
      for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
        const auto& ht = bt.self[hh];
        auto g = attention_backward(ht, column_slice(d_self, hh * hd, hd), scale);
        add_inplace(dh, matmul_bt(g.dq, blk.wq[hh]));
        add_inplace(dh, matmul_bt(g.dk, blk.wk[hh]));
        add_inplace(dh, matmul_bt(g.dv, blk.wv[hh]));
      }
    }
    return d_cond;
  }

  // -- latent codec: 2x2 RGB patches <-> latent channels ---------------------

  /// Image (even dimensions) to latent at half resolution.
  LatentImage encode(const Image& img) const {
    if (img.width % 2 || img.height % 2 || img.empty()) throw InvalidArgument("encode: image dimensions must be even");
    LatentImage z{img.height / 2, img.width / 2, FeatureMatrix(img.pixels() / 4, cfg_.latent_channels)};
    for (std::size_t y = 0; y < z.height; ++y)
      for (std::size_t x = 0; x < z.width; ++x) {
        const auto patch = gather_patch(img, x, y);
        for (std::size_t c = 0; c < cfg_.latent_channels; ++c) {
          double acc = 0.0;
          for (std::size_t p = 0; p < kPatch; ++p) acc += codec_(p, c) * (patch[p] - 0.5);
          z.tokens(y * z.width + x, c) = static_cast<float>(kLatentScale * acc);
        }
      }
    return z;
  }

  /// Latent to image at twice the resolution (values not clamped).
  Image decode(const LatentImage& z) const {
    Image img(z.width * 2, z.height * 2);
    for (std::size_t y = 0; y < z.height; ++y)
      for (std::size_t x = 0; x < z.width; ++x) {
        for (std::size_t p = 0; p < kPatch; ++p) {
          double acc = 0.5;
          for (std::size_t c = 0; c < cfg_.latent_channels; ++c) {
            acc += codec_(p, c) * z.tokens(y * z.width + x, c) / kLatentScale;
          }
          const std::size_t px = p / 3, ch = p % 3;
          img.at(2 * x + px % 2, 2 * y + px / 2, ch) = static_cast<float>(acc);
        }
      }
    return img;
  }

  /// FNV-1a over every weight, in construction order.
  std::uint64_t checksum() const {
    Fnv1a h;
    auto add = [&](const FeatureMatrix& m) { h.update(m.data().data(), m.size() * sizeof(float)); };
    for (const auto* m : {&w_in_, &b_in_, &t_freq_, &t_phase_, &u_lineart_, &u_depth_}) add(*m);
    for (const auto& b : blocks_) {
      for (const auto& m : b.wq) add(m);
      for (const auto& m : b.wk) add(m);
      for (const auto& m : b.wv) add(m);
      add(b.wo);
      for (const auto& m : b.cq) add(m);
      for (const auto& m : b.ck) add(m);
      for (const auto& m : b.cv) add(m);
      for (const auto* m : {&b.co, &b.w1, &b.b1, &b.w2, &b.b2}) add(*m);
    }
    add(w_out_);
    add(codec_);
    return h.value();
  }

  const std::vector<Block>& blocks() const noexcept { return blocks_; }

 private:
  static constexpr std::size_t kPatch = 12;  // 2x2 pixels x RGB
  static constexpr double kLatentScale = 2.0;

  template <class T>
  struct AttentionGrad {
    Matrix<T> dq, dk, dv;
  };

  template <class T>
  static AttentionGrad<T> attention_backward(const typename ForwardTape<T>::Head& ht, const Matrix<T>& d_out, T scale) {
    AttentionGrad<T> g;
    g.dv = matmul_at(ht.p, d_out);
    Matrix<T> dp = matmul_bt(d_out, ht.v);
    for (std::size_t i = 0; i < dp.rows(); ++i) {
      T dot{};
      for (std::size_t j = 0; j < dp.cols(); ++j) dot += dp(i, j) * ht.p(i, j);
      for (std::size_t j = 0; j < dp.cols(); ++j) dp(i, j) = ht.p(i, j) * (dp(i, j) - dot) * scale;
    }
    g.dq = matmul(dp, ht.k);
    g.dk = matmul_at(dp, ht.q);
    return g;
  }

  template <class T>
  static void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
  }

  static std::array<double, kPatch> gather_patch(const Image& img, std::size_t x, std::size_t y) {
    std::array<double, kPatch> p{};
    for (std::size_t px = 0; px < 4; ++px)
      for (std::size_t c = 0; c < 3; ++c) p[px * 3 + c] = img.at(2 * x + px % 2, 2 * y + px / 2, c);
    return p;
  }

  // Orthonormal columns: per-colour patch averages, then seeded directions
  // orthogonalised against them. encode(decode(z)) == z up to rounding.
  void build_codec(Rng& rng) {
    codec_ = FeatureMatrix(kPatch, cfg_.latent_channels);
    std::vector<std::array<double, kPatch>> cols;
    for (std::size_t c = 0; c < cfg_.latent_channels; ++c) {
      std::array<double, kPatch> v{};
      if (c < 3) {
        for (std::size_t px = 0; px < 4; ++px) v[px * 3 + c] = 0.5;
      } else {
        for (double& e : v) e = rng.normal();
        for (const auto& u : cols) {
          double dot = 0.0;
          for (std::size_t i = 0; i < kPatch; ++i) dot += u[i] * v[i];
          for (std::size_t i = 0; i < kPatch; ++i) v[i] -= dot * u[i];
        }
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        for (double& e : v) e /= norm;
      }
      cols.push_back(v);
      for (std::size_t i = 0; i < kPatch; ++i) codec_(i, c) = static_cast<float>(v[i]);
    }
  }

  ModelConfig cfg_;
  FeatureMatrix w_in_, b_in_, t_freq_, t_phase_, u_lineart_, u_depth_;
  std::vector<Block> blocks_;
  FeatureMatrix w_out_;
  FeatureMatrix codec_;
};

inline ToyModel build_toy_model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.seed = seed;
  return ToyModel(cfg);
}

// ---------------------------------------------------------------------------
// Denoising

/// Noise estimate for one schedule level.
inline FeatureMatrix denoise_step(const ToyModel& model, const LatentImage& x, const DdimSchedule& schedule,
                                  std::size_t step, const ConditionSet& cond, SelfAttentionHook* hook = nullptr) {
  if (step >= schedule.steps()) throw InvalidArgument("denoise_step: step index out of range");
  std::optional<FeatureMatrix> residual;
  if (cond.control && (cond.w_lineart != 0.0f || cond.w_depth != 0.0f)) {
    residual = model.control_residual(*cond.control, cond.w_lineart, cond.w_depth, x.height, x.width);
  } else {
    check_strengths(cond.w_lineart, cond.w_depth);
  }
  return model.forward<float>(x.tokens, schedule.timesteps[step], step, cond.tokens,
                              residual ? &*residual : nullptr, hook);
}

/// x_{s+1} from x_s and eps under the deterministic (eta = 0) update.
inline void ddim_update(FeatureMatrix& x, const FeatureMatrix& eps, double ab_from, double ab_to) {
  const double a_from = std::sqrt(ab_from), s_from = std::sqrt(1.0 - ab_from);
  const double a_to = std::sqrt(ab_to), s_to = std::sqrt(1.0 - ab_to);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = eps.data()[i];
    const double x0 = (static_cast<double>(x.data()[i]) - s_from * e) / a_from;
    x.data()[i] = static_cast<float>(a_to * x0 + s_to * e);
  }
}

/// Latents visited by a DDIM run, in sampling order: latents[0] is the
/// noisiest, latents.back() the clean end.
struct DdimTrajectory {
  std::vector<LatentImage> latents;
};

using StepCallback = std::function<void(std::size_t step, LatentImage& x)>;

/// Runs sampling steps [begin, end) on `x` in place. `after_step` may modify
/// the latent after each update.
inline void ddim_sample_range(const ToyModel& model, LatentImage& x, const ConditionSet& cond,
                              const DdimSchedule& schedule, std::size_t begin, std::size_t end,
                              SelfAttentionHook* hook, const StepCallback& after_step,
                              DdimTrajectory* trajectory = nullptr) {
  for (std::size_t s = begin; s < end; ++s) {
    const FeatureMatrix eps = denoise_step(model, x, schedule, s, cond, hook);
    ddim_update(x.tokens, eps, schedule.alpha_bar[s], schedule.alpha_bar_next(s));
    if (after_step) after_step(s, x);
    if (trajectory) trajectory->latents.push_back(x);
  }
}

inline DdimTrajectory ddim_sample(const ToyModel& model, const LatentImage& x_T, const ConditionSet& cond,
                                  std::size_t steps, SelfAttentionHook* hook = nullptr,
                                  const StepCallback& after_step = {}) {
  const auto schedule = make_schedule(model.config(), steps);
  DdimTrajectory traj;
  traj.latents.push_back(x_T);
  LatentImage x = x_T;
  ddim_sample_range(model, x, cond, schedule, 0, steps, hook, after_step, &traj);
  return traj;
}

/// Runs the DDIM recursion backwards from a clean latent. Step s evaluates
/// the model on the latent one level cleaner at timestep s, which is the
/// site the sampler visits at step s.
inline DdimTrajectory ddim_invert(const ToyModel& model, const LatentImage& x_0, const ConditionSet& cond,
                                  std::size_t steps, SelfAttentionHook* hook = nullptr) {
  const auto schedule = make_schedule(model.config(), steps);
  DdimTrajectory traj;
  traj.latents.assign(steps + 1, x_0);
  LatentImage x = x_0;
  for (std::size_t s = steps; s-- > 0;) {
    const FeatureMatrix eps = denoise_step(model, x, schedule, s, cond, hook);
    ddim_update(x.tokens, eps, schedule.alpha_bar_next(s), schedule.alpha_bar[s]);
    traj.latents[s] = x;
  }
  return traj;
}

}  // namespace stylebank
