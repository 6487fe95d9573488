#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "stylebank/binary_io.hpp"
#include "stylebank/error.hpp"
#include "stylebank/image.hpp"
#include "stylebank/matrix.hpp"
#include "stylebank/rng.hpp"
#include "stylebank/toy_model.hpp"

namespace stylebank {

inline constexpr std::size_t kEmbeddingDim = 32;
inline constexpr std::size_t kStyleTokens = 4;

/// Unit-norm image descriptor.
struct ImageEmbedding {
  std::vector<float> values;

  std::size_t size() const noexcept { return values.size(); }
  bool operator==(const ImageEmbedding&) const = default;
};

/// Image-prompt token sequence fed to cross-attention.
struct StyleEmbedding {
  FeatureMatrix tokens;  ///< kStyleTokens x model dim

  bool operator==(const StyleEmbedding&) const = default;
};

namespace detail {

inline constexpr std::size_t kRawFeatures = 3 + 3 + 27 + 1;

inline std::vector<double> raw_image_features(const Image& img) {
  if (img.width < 3 || img.height < 3) throw InvalidArgument("embed: image must be at least 3x3");
  std::vector<double> f;
  f.reserve(kRawFeatures);
  const double n = static_cast<double>(img.pixels());
  std::array<double, 3> mean{}, var{};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < img.pixels(); ++i) mean[c] += img.rgb[i * 3 + c];
    mean[c] /= n;
    for (std::size_t i = 0; i < img.pixels(); ++i) {
      const double d = img.rgb[i * 3 + c] - mean[c];
      var[c] += d * d;
    }
    var[c] /= n;
  }
  f.insert(f.end(), mean.begin(), mean.end());
  f.insert(f.end(), var.begin(), var.end());
  for (std::size_t by = 0; by < 3; ++by)
    for (std::size_t bx = 0; bx < 3; ++bx) {
      const std::size_t x0 = bx * img.width / 3, x1 = (bx + 1) * img.width / 3;
      const std::size_t y0 = by * img.height / 3, y1 = (by + 1) * img.height / 3;
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) acc += img.at(x, y, c);
        f.push_back(acc / static_cast<double>((x1 - x0) * (y1 - y0)));
      }
    }
  f.push_back(1.0);
  return f;
}

inline const Matrix<double>& embedder_projection() {
  static const Matrix<double> proj = [] {
    Rng rng(0x656d626564646572ull);
    Matrix<double> m(kEmbeddingDim, kRawFeatures);
    for (double& v : m.data()) v = rng.normal();
    return m;
  }();
  return proj;
}

}  // namespace detail

/// Deterministic stand-in for an image encoder: global channel means and
/// variances, 3x3 block means and a constant, through a fixed random
/// projection, L2-normalised.
inline ImageEmbedding mock_image_embed(const Image& img) {
  const auto f = detail::raw_image_features(img);
  const auto& proj = detail::embedder_projection();
  std::vector<double> e(kEmbeddingDim, 0.0);
  double norm = 0.0;
  for (std::size_t i = 0; i < kEmbeddingDim; ++i) {
    for (std::size_t j = 0; j < f.size(); ++j) e[i] += proj(i, j) * f[j];
    norm += e[i] * e[i];
  }
  norm = std::sqrt(norm);
  ImageEmbedding out;
  out.values.reserve(kEmbeddingDim);
  for (double v : e) out.values.push_back(static_cast<float>(v / norm));
  return out;
}

/// Affine map from an image embedding to kStyleTokens x dim prompt tokens.
struct ProjectionWeights {
  std::size_t embed_dim = 0;
  std::size_t model_dim = 0;
  FeatureMatrix weight;  ///< (kStyleTokens * model_dim) x embed_dim
  std::vector<float> bias;

  ProjectionWeights() = default;
  ProjectionWeights(std::size_t e, std::size_t dim)
      : embed_dim(e), model_dim(dim), weight(kStyleTokens * dim, e), bias(kStyleTokens * dim, 0.0f) {}

  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }

  /// Flat parameter access: weight entries first, then bias.
  float& parameter(std::size_t i) { return i < weight.size() ? weight.data()[i] : bias[i - weight.size()]; }
  float parameter(std::size_t i) const { return i < weight.size() ? weight.data()[i] : bias[i - weight.size()]; }

  bool operator==(const ProjectionWeights&) const = default;
};

/// Gaussian weights with std `scale / sqrt(embed_dim)`, zero bias.
inline ProjectionWeights init_projection(std::size_t embed_dim, std::size_t model_dim, std::uint64_t seed,
                                         double scale = 1.0) {
  ProjectionWeights a(embed_dim, model_dim);
  Rng rng(seed);
  const double sd = scale / std::sqrt(static_cast<double>(embed_dim));
  for (float& v : a.weight.data()) v = static_cast<float>(rng.normal() * sd);
  return a;
}

inline StyleEmbedding project(const ProjectionWeights& a, const ImageEmbedding& e) {
  if (e.size() != a.embed_dim) {
    throw InvalidArgument("project: embedding has " + std::to_string(e.size()) + " values, adapter expects " +
                          std::to_string(a.embed_dim));
  }
  StyleEmbedding out{FeatureMatrix(kStyleTokens, a.model_dim)};
  for (std::size_t r = 0; r < a.weight.rows(); ++r) {
    double acc = a.bias[r];
    for (std::size_t j = 0; j < a.embed_dim; ++j) acc += static_cast<double>(a.weight(r, j)) * e.values[j];
    out.tokens.data()[r] = static_cast<float>(acc);
  }
  return out;
}

/// Elementwise mean of token sequences, accumulated in double.
inline StyleEmbedding average_embeddings(std::span<const StyleEmbedding> list) {
  if (list.empty()) throw InvalidArgument("average_embeddings: empty list");
  const auto rows = list[0].tokens.rows(), cols = list[0].tokens.cols();
  std::vector<double> acc(rows * cols, 0.0);
  for (const auto& s : list) {
    if (s.tokens.rows() != rows || s.tokens.cols() != cols) throw InvalidArgument("average_embeddings: shape mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.tokens.data()[i];
  }
  StyleEmbedding out{FeatureMatrix(rows, cols)};
  const double n = static_cast<double>(list.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.tokens.data()[i] = static_cast<float>(acc[i] / n);
  return out;
}

/// Averaged projected embedding of every crop of every style image. With
/// crop_px = 0 each image is embedded whole.
inline StyleEmbedding embed_styles(std::span<const Image> styles, const ProjectionWeights& a, std::size_t crop_px = 0,
                                   std::size_t crops_per_image = 1, std::uint64_t seed = 0) {
  if (styles.empty()) throw InvalidArgument("embed_styles: no style images");
  std::vector<StyleEmbedding> parts;
  for (std::size_t i = 0; i < styles.size(); ++i) {
    if (crop_px == 0) {
      parts.push_back(project(a, mock_image_embed(styles[i])));
      continue;
    }
    for (const auto& c : extract_crops(styles[i], crop_px, crops_per_image, mix_seed(seed, i))) {
      parts.push_back(project(a, mock_image_embed(c)));
    }
  }
  return average_embeddings(parts);
}

// -- ADP1 ---------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_projection(const ProjectionWeights& a) {
  ByteWriter w;
  w.put_magic("ADP1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.embed_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.model_dim));
  w.put_floats(a.weight.data());
  w.put_floats(a.bias);
  return std::move(w.bytes());
}

inline void write_projection(const ProjectionWeights& a, const std::filesystem::path& path) {
  write_file_synced(path, serialize_projection(a));
}

inline ProjectionWeights read_projection(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader in(bytes, path.string());
  if (!in.magic_is("ADP1")) throw FormatError(FormatErrc::bad_magic, path.string());
  const std::size_t e = in.get<std::uint32_t>();
  const std::size_t dim = in.get<std::uint32_t>();
  if (e == 0 || dim == 0) throw FormatError(FormatErrc::corrupt_index, path.string() + ": zero dimension");
  if (in.remaining() != (kStyleTokens * dim * e + kStyleTokens * dim) * sizeof(float)) {
    throw FormatError(FormatErrc::truncated, path.string() + ": payload length does not match dimensions");
  }
  ProjectionWeights a(e, dim);
  in.get_bytes(a.weight.data().data(), a.weight.size() * sizeof(float));
  in.get_bytes(a.bias.data(), a.bias.size() * sizeof(float));
  return a;
}

// -- fine-tuning ----------------------------------------------------------------

/// One style image as seen by the adapter objective.
struct StyleSample {
  LatentImage latent;
  ImageEmbedding embedding;
};

/// One noisy training example: style index, timestep and noise seed.
struct TrainingDraw {
  std::size_t style = 0;
  int timestep = 0;
  std::uint64_t noise_seed = 0;
};

/// Draws a batch whose timesteps are stratified: item j falls uniformly in
/// the j-th of `batch` equal slices of [0, train_timesteps).
inline std::vector<TrainingDraw> draw_batch(Rng& rng, std::size_t n_styles, std::size_t batch, int train_timesteps) {
  std::vector<TrainingDraw> out(batch);
  for (std::size_t j = 0; j < batch; ++j) {
    auto& d = out[j];
    d.style = static_cast<std::size_t>(rng.index(n_styles));
    const double u = (static_cast<double>(j) + rng.uniform()) / static_cast<double>(batch);
    d.timestep = std::min(train_timesteps - 1, static_cast<int>(u * train_timesteps));
    d.noise_seed = rng.next_u64();
  }
  return out;
}

/// Denoising loss of the frozen model conditioned on [empty-prompt tokens;
/// A(e)], mean squared error averaged over the batch, evaluated in double.
class AdapterObjective {
 public:
  AdapterObjective(const ToyModel& model, std::span<const StyleSample> styles) : model_(model) {
    if (styles.empty()) throw InvalidArgument("finetune: empty style set");
    text_ = Matrix<double>::cast(model.text_tokens(""));
    for (const auto& s : styles) {
      if (s.latent.channels() != model.config().latent_channels) {
        throw InvalidArgument("finetune: style latent channel count does not match the model");
      }
      styles_.push_back(s);
    }
  }

  std::size_t style_count() const noexcept { return styles_.size(); }

  double loss(const ProjectionWeights& a, std::span<const TrainingDraw> batch) const { return evaluate(a, batch, nullptr); }

  /// Returns the loss; `grad` receives dL/d(parameter) in flat order.
  double loss_and_grad(const ProjectionWeights& a, std::span<const TrainingDraw> batch, std::vector<double>& grad) const {
    grad.assign(a.parameter_count(), 0.0);
    return evaluate(a, batch, &grad);
  }

 private:
  double evaluate(const ProjectionWeights& a, std::span<const TrainingDraw> batch, std::vector<double>* grad) const {
    if (batch.empty()) throw InvalidArgument("finetune: empty batch");
    const std::size_t dim = model_.config().dim;
    if (a.model_dim != dim) throw InvalidArgument("finetune: adapter dim does not match the model");
    double total = 0.0;
    for (const auto& d : batch) {
      const StyleSample& s = styles_.at(d.style);
      if (s.embedding.size() != a.embed_dim) throw InvalidArgument("finetune: embedding size does not match adapter");

      // Tokens in double so the objective is smooth enough for finite differences.
      Matrix<double> cond(text_.rows() + kStyleTokens, dim);
      std::copy(text_.data().begin(), text_.data().end(), cond.data().begin());
      const std::size_t off = text_.size();
      for (std::size_t r = 0; r < a.weight.rows(); ++r) {
        double acc = a.bias[r];
        for (std::size_t j = 0; j < a.embed_dim; ++j) acc += static_cast<double>(a.weight(r, j)) * s.embedding.values[j];
        cond.data()[off + r] = acc;
      }

      const double ab = cosine_alpha_bar(d.timestep, model_.config().train_timesteps);
      Rng noise_rng(d.noise_seed);
      Matrix<double> noise(s.latent.tokens.rows(), s.latent.tokens.cols());
      Matrix<double> xt(noise.rows(), noise.cols());
      for (std::size_t i = 0; i < noise.size(); ++i) {
        noise.data()[i] = noise_rng.normal();
        xt.data()[i] = std::sqrt(ab) * s.latent.tokens.data()[i] + std::sqrt(1.0 - ab) * noise.data()[i];
      }

      ForwardTape<double> tape;
      const auto eps = model_.forward<double>(xt, d.timestep, 0, cond, nullptr, nullptr, grad ? &tape : nullptr);
      double sq = 0.0;
      Matrix<double> d_eps(eps.rows(), eps.cols());
      const double scale = 1.0 / (static_cast<double>(eps.size()) * static_cast<double>(batch.size()));
      for (std::size_t i = 0; i < eps.size(); ++i) {
        const double r = eps.data()[i] - noise.data()[i];
        sq += r * r;
        d_eps.data()[i] = 2.0 * r * scale;
      }
      total += sq * scale;

      if (grad) {
        const auto d_cond = model_.backward_cond(tape, d_eps, cond.rows());
        const std::size_t nw = a.weight.size();
        for (std::size_t r = 0; r < a.weight.rows(); ++r) {
          const double g = d_cond.data()[off + r];
          for (std::size_t j = 0; j < a.embed_dim; ++j) (*grad)[r * a.embed_dim + j] += g * s.embedding.values[j];
          (*grad)[nw + r] += g;
        }
      }
    }
    return total;
  }

  const ToyModel& model_;
  Matrix<double> text_;
  std::vector<StyleSample> styles_;
};

struct FinetuneOptions {
  std::size_t steps = 100;
  double lr = 1e-2;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct FinetuneResult {
  ProjectionWeights weights;
  std::vector<double> loss_history;  ///< batch loss before each update
};

/// Mean of the first and last `window` entries of a loss curve.
inline std::pair<double, double> loss_endpoints(const std::vector<double>& history, std::size_t window = 10) {
  if (history.empty()) return {0.0, 0.0};
  const std::size_t w = std::min(window, history.size());
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    head += history[i];
    tail += history[history.size() - w + i];
  }
  return {head / static_cast<double>(w), tail / static_cast<double>(w)};
}

/// Adam on the adapter parameters only, cosine-decayed learning rate. The
/// model is taken by const reference and never modified.
inline FinetuneResult finetune_adapter(const ProjectionWeights& a0, std::span<const StyleSample> styles,
                                       const ToyModel& model, const FinetuneOptions& options = {}) {
  const AdapterObjective objective(model, styles);
  if (options.batch == 0) throw InvalidArgument("finetune: batch must be at least 1");
  if (!std::isfinite(options.lr) || options.lr < 0.0) throw InvalidArgument("finetune: lr must be finite and >= 0");
  FinetuneResult res{a0, {}};
  Rng rng(options.seed);
  std::vector<double> grad;
  std::vector<double> m1(a0.parameter_count(), 0.0), m2(a0.parameter_count(), 0.0);
  for (std::size_t step = 0; step < options.steps; ++step) {
    const auto batch = draw_batch(rng, styles.size(), options.batch, model.config().train_timesteps);
    const double loss = objective.loss_and_grad(res.weights, batch, grad);
    if (!std::isfinite(loss)) {
      throw NumericError("finetune: non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step));
    }
    res.loss_history.push_back(loss);
    const double lr =
        options.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(options.steps)));
    const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < grad.size(); ++i) {
      m1[i] = options.beta1 * m1[i] + (1.0 - options.beta1) * grad[i];
      m2[i] = options.beta2 * m2[i] + (1.0 - options.beta2) * grad[i] * grad[i];
      float& p = res.weights.parameter(i);
      p = static_cast<float>(p - lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + options.adam_eps));
    }
  }
  return res;
}

}  // namespace stylebank
