#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stylebank/digest.hpp"
#include "stylebank/error.hpp"
#include "stylebank/image.hpp"
#include "stylebank/parallel.hpp"
#include "stylebank/rng.hpp"

namespace stylebank {

/// Picks `count` distinct indices from [0, n) by a partial Fisher-Yates
/// shuffle and returns them ascending.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
  count = std::min(count, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// RGB points of an image, optionally subsampled.
///
/// The subsample seed is mixed with a digest of the pixel data, so an image
/// always yields the same points whichever side of a comparison it is on.
inline std::vector<std::array<float, 3>> color_cloud(const Image& img, std::size_t subsample, std::uint64_t seed) {
  if (img.empty()) throw InvalidArgument("chamfer: empty image");
  std::vector<std::array<float, 3>> pts;
  auto push = [&](std::size_t i) { pts.push_back({img.rgb[3 * i], img.rgb[3 * i + 1], img.rgb[3 * i + 2]}); };
  if (subsample == 0 || img.pixels() <= subsample) {
    pts.reserve(img.pixels());
    for (std::size_t i = 0; i < img.pixels(); ++i) push(i);
    return pts;
  }
  Fnv1a h;
  h.update(img.rgb.data(), img.rgb.size() * sizeof(float));
  pts.reserve(subsample);
  for (std::size_t i : sample_indices(img.pixels(), subsample, mix_seed(seed, h.value()))) push(i);
  return pts;
}

namespace detail {

/// Mean over `from` of the squared distance to the nearest point of `to`.
inline double directed_chamfer(const std::vector<std::array<float, 3>>& from, const std::vector<std::array<float, 3>>& to) {
  double total = 0.0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double d0 = static_cast<double>(p[0]) - q[0];
      const double d1 = static_cast<double>(p[1]) - q[1];
      const double d2 = static_cast<double>(p[2]) - q[2];
      best = std::min(best, d0 * d0 + d1 * d1 + d2 * d2);
    }
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace detail

/// Symmetric Chamfer distance between the colour distributions of two
/// images: squared RGB distance, mean per direction, averaged over the two
/// directions. `subsample` = 0 uses every pixel.
inline double chamfer_color(const Image& a, const Image& b, std::size_t subsample = 4096, std::uint64_t seed = 0) {
  const auto pa = color_cloud(a, subsample, seed);
  const auto pb = color_cloud(b, subsample, seed);
  return 0.5 * (detail::directed_chamfer(pa, pb) + detail::directed_chamfer(pb, pa));
}

// -- pairwise evaluation --------------------------------------------------------

struct PairScore {
  std::string content;
  std::string style;
  double chamfer = 0.0;
};

struct EvalTable {
  std::vector<PairScore> pairs;                  ///< in selection order
  std::vector<std::pair<std::string, double>> style_means;  ///< ascending by style name
  double overall = 0.0;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "content,style,chamfer\n";
    for (const auto& p : pairs) out << p.content << ',' << p.style << ',' << p.chamfer << '\n';
    for (const auto& [style, mean] : style_means) out << "*," << style << ',' << mean << '\n';
    out << "*,*," << overall << '\n';
    return out.str();
  }
};

/// One stylized output and the style it should match.
struct EvalCandidate {
  std::string content;
  std::string style;
  std::filesystem::path stylized_path;
  std::filesystem::path style_path;
};

/// Stylized outputs are named `<content>__<style>.ppm`; candidates are the
/// outputs whose style has a `<style>.ppm` in the style directory, sorted
/// by file name.
inline std::vector<EvalCandidate> list_eval_candidates(const std::filesystem::path& stylized_dir,
                                                       const std::filesystem::path& style_dir) {
  std::vector<EvalCandidate> out;
  for (const auto& entry : std::filesystem::directory_iterator(stylized_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".ppm") continue;
    const std::string stem = entry.path().stem().string();
    const auto sep = stem.rfind("__");
    if (sep == std::string::npos) continue;
    EvalCandidate c{stem.substr(0, sep), stem.substr(sep + 2), entry.path(), style_dir / (stem.substr(sep + 2) + ".ppm")};
    if (std::filesystem::exists(c.style_path)) out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(),
            [](const EvalCandidate& a, const EvalCandidate& b) { return a.stylized_path < b.stylized_path; });
  return out;
}

/// Number of pairs evaluated for a given fraction of n candidates.
inline std::size_t eval_pair_count(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("eval: fraction must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

inline EvalTable eval_candidates(const std::vector<EvalCandidate>& candidates, double fraction, std::uint64_t seed,
                                 std::size_t subsample = 4096, unsigned threads = 1) {
  const auto picked = sample_indices(candidates.size(), eval_pair_count(candidates.size(), fraction), seed);
  EvalTable table;
  table.pairs.resize(picked.size());
  parallel_for(picked.size(), threads, [&](std::size_t i) {
    const auto& c = candidates[picked[i]];
    table.pairs[i] = {c.content, c.style, chamfer_color(read_ppm(c.stylized_path), read_ppm(c.style_path), subsample, seed)};
  });
  std::map<std::string, std::pair<double, std::size_t>> groups;
  double total = 0.0;
  for (const auto& p : table.pairs) {
    auto& g = groups[p.style];
    g.first += p.chamfer;
    ++g.second;
    total += p.chamfer;
  }
  for (const auto& [style, g] : groups) table.style_means.emplace_back(style, g.first / static_cast<double>(g.second));
  if (!table.pairs.empty()) table.overall = total / static_cast<double>(table.pairs.size());
  return table;
}

inline EvalTable eval_pairs(const std::filesystem::path& stylized_dir, const std::filesystem::path& style_dir,
                            double fraction, std::uint64_t seed, std::size_t subsample = 4096, unsigned threads = 1) {
  return eval_candidates(list_eval_candidates(stylized_dir, style_dir), fraction, seed, subsample, threads);
}

}  // namespace stylebank
