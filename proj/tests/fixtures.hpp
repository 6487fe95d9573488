#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stylebank.hpp"

namespace fixtures {

using namespace stylebank;

/// Striped colour field; every k gives a different palette and period.
inline Image striped_style(int k, std::size_t n) {
  Image im(n, n);
  Rng rng(50 + k);
  const float base[3] = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                         static_cast<float>(rng.uniform())};
  const std::size_t period = 2 + k % 3;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float stripe = ((x + y * (k % 2)) / period) % 2 ? 0.2f : -0.2f;
        const float v = base[c] + stripe * (c == static_cast<std::size_t>(k % 3) ? 1.0f : 0.3f) +
                        0.05f * static_cast<float>(rng.normal());
        im.at(x, y, c) = std::clamp(v, 0.0f, 1.0f);
      }
  return im;
}

/// A seeded disc on a flat background.
inline Image disc_content(int seed, std::size_t w, std::size_t h) {
  Image im(w, h);
  Rng rng(900 + seed);
  const double n = static_cast<double>(std::min(w, h));
  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(w), cy = rng.uniform(0.3, 0.7) * static_cast<double>(h);
  const double r = rng.uniform(0.2, 0.35) * n;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const bool inside = dx * dx + dy * dy < r * r;
      for (std::size_t c = 0; c < 3; ++c) im.at(x, y, c) = inside ? 0.8f - 0.2f * c : 0.2f + 0.1f * c;
    }
  return im;
}

inline Image disc_content(int seed, std::size_t n) { return disc_content(seed, n, n); }

inline FeatureMatrix normal_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double mean = 0.0,
                                   double stddev = 1.0) {
  Rng rng(seed);
  FeatureMatrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(rng.normal(mean, stddev));
  return m;
}

/// Target statistics with zero skew and kurtosis unless given.
inline MomentStats target_stats(std::vector<float> mean, std::vector<float> var, std::vector<float> skew = {},
                         std::vector<float> kurt = {}) {
  MomentStats t;
  const std::size_t c = mean.size();
  t.mean = std::move(mean);
  t.variance = std::move(var);
  t.skewness = skew.empty() ? std::vector<float>(c, 0.0f) : std::move(skew);
  t.excess_kurtosis = kurt.empty() ? std::vector<float>(c, 0.0f) : std::move(kurt);
  t.degenerate.assign(c, 0);
  t.n_samples = 100;
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("stylebank_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline double relative_l2(std::span<const float> a, std::span<const float> ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - ref[i];
    num += d * d;
    den += static_cast<double>(ref[i]) * ref[i];
  }
  return std::sqrt(num / den);
}

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return std::sqrt(s);
}

/// Median over pixels of |a - b| / |b| in RGB.
inline double median_pixel_deviation(const Image& a, const Image& b) {
  std::vector<double> dev;
  dev.reserve(a.pixels());
  for (std::size_t i = 0; i < a.pixels(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = static_cast<double>(a.rgb[3 * i + c]) - b.rgb[3 * i + c];
      num += d * d;
      den += static_cast<double>(b.rgb[3 * i + c]) * b.rgb[3 * i + c];
    }
    dev.push_back(std::sqrt(num) / std::max(std::sqrt(den), 1e-6));
  }
  std::nth_element(dev.begin(), dev.begin() + static_cast<std::ptrdiff_t>(dev.size() / 2), dev.end());
  return dev[dev.size() / 2];
}

/// Style images inverted and written as caches, plus everything stylize needs.
struct StyleSet {
  std::vector<Image> images;
  std::vector<std::filesystem::path> cache_paths;
  std::vector<CacheReader> readers;
  StyleEmbedding phi;
  AverageImage average;

  std::vector<const CacheReader*> reader_ptrs() const {
    std::vector<const CacheReader*> p;
    for (const auto& r : readers) p.push_back(&r);
    return p;
  }
};

inline StyleSet make_style_set(const ToyModel& model, const std::filesystem::path& dir, int n_styles, std::size_t px,
                               std::size_t steps, int first_style = 0) {
  StyleSet s;
  for (int k = first_style; k < first_style + n_styles; ++k) {
    s.images.push_back(striped_style(k, px));
    const auto inv = invert_style(model, s.images.back(), steps);
    s.cache_paths.push_back(dir / ("style" + std::to_string(k) + ".skvc"));
    write_cache(inv.entries, s.cache_paths.back(), static_cast<std::uint64_t>(k));
  }
  for (const auto& p : s.cache_paths) s.readers.push_back(open_cache(p));
  s.phi = embed_styles(s.images, init_projection(kEmbeddingDim, model.config().dim, 1));
  s.average = generate_average_image(model, s.phi, steps, 3, px / 2, px / 2);
  return s;
}

}  // namespace fixtures
