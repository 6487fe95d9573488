#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "stylebank/error.hpp"
#include "stylebank/matrix.hpp"
#include "stylebank/rng.hpp"

namespace stylebank {

struct KMeansResult {
  FeatureMatrix centroids;                  ///< k x dim
  std::vector<std::uint32_t> assignments;   ///< nearest centroid per point
  double inertia = 0.0;                     ///< sum of squared distances to assigned centroids
  std::vector<double> inertia_history;      ///< inertia after every assignment pass
  int iterations = 0;

  std::size_t k() const noexcept { return centroids.rows(); }
};

struct KMeansOptions {
  int max_iters = 50;
  float tol = 1e-4f;
};

namespace detail {

inline float squared_distance(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

/// Assigns each point to its nearest centroid (ties to the lowest index).
inline double assign_points(const FeatureMatrix& points, const FeatureMatrix& centroids,
                            std::vector<std::uint32_t>& assignments, std::vector<float>& dist2) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    float best = std::numeric_limits<float>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < centroids.rows(); ++j) {
      const float d = squared_distance(points.row(i), centroids.row(j));
      if (d < best) {
        best = d;
        best_j = static_cast<std::uint32_t>(j);
      }
    }
    assignments[i] = best_j;
    dist2[i] = best;
    inertia += best;
  }
  return inertia;
}

/// k-means++ seeding: first centre uniform, the rest with probability
/// proportional to squared distance from the nearest chosen centre.
inline FeatureMatrix kmeans_plus_plus(const FeatureMatrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  FeatureMatrix centroids(k, points.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<std::uint8_t> chosen(n, 0);
  std::size_t pick = static_cast<std::size_t>(rng.index(n));
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double v : d2) total += v;
      if (total > 0.0) {
        const double target = rng.uniform() * total;
        double cum = 0.0;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          cum += d2[i];
          if (cum > target) {
            pick = i;
            break;
          }
        }
        if (pick == n) {  // rounding at the top end of the cumulative sum
          for (std::size_t i = n; i-- > 0;)
            if (d2[i] > 0.0) {
              pick = i;
              break;
            }
        }
      } else {
        // Every point coincides with a chosen centre.
        pick = 0;
        while (pick < n && chosen[pick]) ++pick;
        if (pick == n) pick = 0;
      }
    }
    chosen[pick] = 1;
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], static_cast<double>(squared_distance(points.row(i), centroids.row(c))));
    }
  }
  return centroids;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ initialization.
///
/// Deterministic for fixed (points, k, seed). Stops when no centroid moves
/// by `tol` or more (Euclidean) or after `max_iters` update passes. A cluster
/// left empty by an update is re-seeded at the point currently farthest from
/// its centroid. The returned assignment is recomputed against the final
/// centroids.
inline KMeansResult kmeans(const FeatureMatrix& points, std::size_t k, std::uint64_t seed,
                           KMeansOptions options = {}) {
  const std::size_t n = points.rows();
  if (n == 0 || points.cols() == 0) throw InvalidArgument("kmeans: empty input");
  if (k == 0) throw InvalidArgument("kmeans: k must be at least 1");
  if (k > n) throw InvalidArgument("kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  if (options.max_iters < 1) throw InvalidArgument("kmeans: max_iters must be at least 1");

  Rng rng(seed);
  KMeansResult res;
  res.centroids = detail::kmeans_plus_plus(points, k, rng);
  res.assignments.assign(n, 0);
  std::vector<float> dist2(n, 0.0f);
  const std::size_t dim = points.cols();
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);

  for (int iter = 0; iter < options.max_iters; ++iter) {
    res.inertia_history.push_back(detail::assign_points(points, res.centroids, res.assignments, dist2));
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignments[i];
      ++counts[c];
      const auto p = points.row(i);
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += p[d];
    }
    FeatureMatrix next(k, dim);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist2[i] > dist2[far]) far = i;
        std::copy(points.row(far).begin(), points.row(far).end(), next.row(c).begin());
        dist2[far] = 0.0f;
        continue;
      }
      for (std::size_t d = 0; d < dim; ++d) {
        next(c, d) = static_cast<float>(sums[c * dim + d] / static_cast<double>(counts[c]));
      }
    }
    float shift = 0.0f;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, std::sqrt(detail::squared_distance(next.row(c), res.centroids.row(c))));
    }
    res.centroids = std::move(next);
    res.iterations = iter + 1;
    if (shift < options.tol) break;
  }
  res.inertia = detail::assign_points(points, res.centroids, res.assignments, dist2);
  res.inertia_history.push_back(res.inertia);
  return res;
}

/// Rows picked to stand in for each cluster, plus their input row indices.
struct Representatives {
  FeatureMatrix keys;
  FeatureMatrix values;
  std::vector<std::uint32_t> rows;
};

/// For every centroid, picks the member value row nearest to it (ties to the
/// lowest row) together with the key row of the same token. A centroid with
/// no members takes the nearest row not already picked, so the output always
/// has exactly k distinct rows.
inline Representatives select_representatives(const FeatureMatrix& values, const FeatureMatrix& keys,
                                              const KMeansResult& result) {
  const std::size_t n = values.rows();
  if (keys.rows() != n) {
    throw InvalidArgument("select_representatives: " + std::to_string(keys.rows()) + " key rows vs " +
                          std::to_string(n) + " value rows");
  }
  if (result.assignments.size() != n || result.centroids.cols() != values.cols()) {
    throw InvalidArgument("select_representatives: clustering result does not match the value rows");
  }
  const std::size_t k = result.k();
  constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> pick(k, kNone);
  std::vector<float> best(k, std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t c = result.assignments[i];
    const float d = detail::squared_distance(values.row(i), result.centroids.row(c));
    if (d < best[c]) {
      best[c] = d;
      pick[c] = static_cast<std::uint32_t>(i);
    }
  }
  std::vector<std::uint8_t> taken(n, 0);
  for (auto p : pick)
    if (p != kNone) taken[p] = 1;
  for (std::size_t c = 0; c < k; ++c) {
    if (pick[c] != kNone) continue;
    float nearest = std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const float d = detail::squared_distance(values.row(i), result.centroids.row(c));
      if (d < nearest) {
        nearest = d;
        pick[c] = static_cast<std::uint32_t>(i);
      }
    }
    taken[pick[c]] = 1;
  }

  Representatives out{FeatureMatrix(k, keys.cols()), FeatureMatrix(k, values.cols()), pick};
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(keys.row(pick[c]).begin(), keys.row(pick[c]).end(), out.keys.row(c).begin());
    std::copy(values.row(pick[c]).begin(), values.row(pick[c]).end(), out.values.row(c).begin());
  }
  return out;
}

}  // namespace stylebank
