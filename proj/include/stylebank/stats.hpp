#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "stylebank/error.hpp"
#include "stylebank/matrix.hpp"

namespace stylebank {

/// Per-channel moments of a feature matrix, taken over tokens.
///
/// Variance is the population (biased) estimate. Kurtosis is stored as
/// excess kurtosis, so a normal distribution scores 0. Channels with
/// (numerically) zero variance carry a degenerate flag and report 0 for
/// skewness and kurtosis.
struct MomentStats {
  std::vector<float> mean;
  std::vector<float> variance;
  std::vector<float> skewness;
  std::vector<float> excess_kurtosis;
  std::vector<std::uint8_t> degenerate;
  std::uint64_t n_samples = 0;

  std::size_t channels() const noexcept { return mean.size(); }

  bool operator==(const MomentStats&) const = default;
};

namespace detail {

// A channel whose spread is below one part in 2^20 of its magnitude is float
// rounding noise around a constant.
inline bool is_degenerate_variance(double variance, double mean) {
  const double floor = std::ldexp(std::abs(mean), -20);
  return variance <= floor * floor;
}

struct ChannelMoments {
  double mean = 0.0;
  double variance = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;
  bool degenerate = true;
};

template <class T>
ChannelMoments channel_moments(const Matrix<T>& x, std::size_t c, bool higher) {
  const std::size_t n = x.rows();
  const std::size_t stride = x.cols();
  const T* p = x.data().data() + c;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += static_cast<double>(p[i * stride]);
  ChannelMoments m;
  m.mean = sum / static_cast<double>(n);
  double s2 = 0.0, s3 = 0.0, s4 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(p[i * stride]) - m.mean;
    const double d2 = d * d;
    s2 += d2;
    if (higher) {
      s3 += d2 * d;
      s4 += d2 * d2;
    }
  }
  m.variance = s2 / static_cast<double>(n);
  m.m3 = s3 / static_cast<double>(n);
  m.m4 = s4 / static_cast<double>(n);
  m.degenerate = is_degenerate_variance(m.variance, m.mean);
  return m;
}

inline void check_channels(std::size_t have, const MomentStats& target, const char* op) {
  if (have != target.channels()) {
    throw InvalidArgument(std::string(op) + ": input has " + std::to_string(have) + " channels, target has " +
                          std::to_string(target.channels()));
  }
}

}  // namespace detail

/// Mean, variance, skewness and excess kurtosis of every channel.
///
/// Summation runs sequentially per channel in double precision, so the
/// result is bit-stable for a given input.
inline MomentStats compute_moments(const FeatureMatrix& x) {
  if (x.rows() == 0 || x.cols() == 0) throw InvalidArgument("compute_moments: empty input");
  MomentStats s;
  const std::size_t c_count = x.cols();
  s.mean.resize(c_count);
  s.variance.resize(c_count);
  s.skewness.resize(c_count);
  s.excess_kurtosis.resize(c_count);
  s.degenerate.resize(c_count);
  s.n_samples = x.rows();
  for (std::size_t c = 0; c < c_count; ++c) {
    const auto m = detail::channel_moments(x, c, true);
    s.mean[c] = static_cast<float>(m.mean);
    s.variance[c] = m.degenerate ? 0.0f : static_cast<float>(m.variance);
    s.degenerate[c] = m.degenerate ? 1 : 0;
    if (!m.degenerate) {
      s.skewness[c] = static_cast<float>(m.m3 / std::pow(m.variance, 1.5));
      s.excess_kurtosis[c] = static_cast<float>(m.m4 / (m.variance * m.variance) - 3.0);
    }
  }
  return s;
}

/// Adaptive instance normalization: shift and scale each channel of `x` to
/// the target mean and variance. Degenerate input channels become the
/// constant target mean.
inline FeatureMatrix adain(const FeatureMatrix& x, const MomentStats& target) {
  detail::check_channels(x.cols(), target, "adain");
  if (x.rows() == 0) throw InvalidArgument("adain: empty input");
  FeatureMatrix out(x.rows(), x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const auto m = detail::channel_moments(x, c, false);
    const double t_mean = target.mean[c];
    const double t_std = std::sqrt(static_cast<double>(target.variance[c]));
    const double gain = m.degenerate ? 0.0 : t_std / std::sqrt(m.variance);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out(i, c) = static_cast<float>((static_cast<double>(x(i, c)) - m.mean) * gain + t_mean);
    }
  }
  return out;
}

/// Per-channel outcome of a fourth-order alignment.
struct AlignReport {
  std::vector<std::uint8_t> fallback;  ///< fit failed; channel got the order-2 result
  std::vector<std::uint8_t> clamped;   ///< cubic was clamped at a turning point inside the data range
  std::vector<int> iterations;

  bool any_fallback() const {
    for (auto f : fallback)
      if (f) return true;
    return false;
  }
};

namespace detail {

/// y(z) = a + b z + c z^2 + d z^3, stored low order first.
using Cubic = std::array<double, 4>;

inline std::vector<double> poly_mul(const std::vector<double>& p, const std::vector<double>& q) {
  std::vector<double> r(p.size() + q.size() - 1, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) r[i + j] += p[i] * q[j];
  return r;
}

/// Residuals and Jacobian of the standardized-moment equations
///   E[y] = 0, E[y^2] = 1, E[y^3] = skew, E[y^4] = kurt + 3
/// expressed through raw moments raw[k] = E[z^k], k <= 12.
struct MomentSystem {
  std::array<double, 13> raw{};
  std::array<double, 4> goal{};

  void evaluate(const Cubic& coef, std::array<double, 4>& r, std::array<std::array<double, 4>, 4>* jac) const {
    const std::vector<double> y(coef.begin(), coef.end());
    std::vector<double> power{1.0};  // y^0
    for (int p = 1; p <= 4; ++p) {
      if (jac) {
        // d E[y^p] / d coef_i = p E[y^(p-1) z^i]
        for (int i = 0; i < 4; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < power.size(); ++j) acc += power[j] * raw[j + i];
          (*jac)[p - 1][i] = p * acc;
        }
      }
      power = poly_mul(power, y);
      double e = 0.0;
      for (std::size_t j = 0; j < power.size(); ++j) e += power[j] * raw[j];
      r[p - 1] = e - goal[p - 1];
    }
  }
};

inline bool solve4(std::array<std::array<double, 4>, 4> a, std::array<double, 4> b, std::array<double, 4>& x) {
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-300) return false;
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (int r = col + 1; r < 4; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int k = col; k < 4; ++k) a[r][k] -= f * a[col][k];
      b[r] -= f * b[col];
    }
  }
  for (int r = 3; r >= 0; --r) {
    double acc = b[r];
    for (int k = r + 1; k < 4; ++k) acc -= a[r][k] * x[k];
    x[r] = acc / a[r][r];
  }
  for (double v : x)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double max_abs(const std::array<double, 4>& r) {
  double m = 0.0;
  for (double v : r) m = std::max(m, std::abs(v));
  return m;
}

/// Interval around z = 0 on which y'(z) = b + 2cz + 3dz^2 stays positive.
inline std::pair<double, double> increasing_interval(const Cubic& k) {
  const double inf = std::numeric_limits<double>::infinity();
  const double b = k[1], c2 = 2.0 * k[2], d3 = 3.0 * k[3];
  double lo = -inf, hi = inf;
  auto consider = [&](double root) {
    if (!std::isfinite(root)) return;
    if (root < 0.0) lo = std::max(lo, root);
    if (root > 0.0) hi = std::min(hi, root);
  };
  if (d3 == 0.0) {
    if (c2 != 0.0) consider(-b / c2);
  } else {
    const double disc = c2 * c2 - 4.0 * d3 * b;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      consider((-c2 - s) / (2.0 * d3));
      consider((-c2 + s) / (2.0 * d3));
    }
  }
  return {lo, hi};
}

inline double eval_cubic(const Cubic& k, double z) { return k[0] + z * (k[1] + z * (k[2] + z * k[3])); }

struct CubicFit {
  Cubic coef{0.0, 1.0, 0.0, 0.0};
  bool converged = false;
  bool clamped = false;
  int iterations = 0;
};

/// Fits a non-decreasing cubic map of the standardized sample `z` whose
/// output has zero mean, unit variance and the requested skewness and excess
/// kurtosis. Damped Newton on the raw-moment system; if the exact cubic turns
/// over inside the data range the map is held flat beyond the turning point
/// and the fit is refined against the clamped output.
inline CubicFit fit_moment_cubic(const std::vector<double>& z, double skew, double kurt, int max_iters) {
  constexpr double kTol = 1e-10;
  CubicFit fit;
  MomentSystem sys;
  sys.goal = {0.0, 1.0, skew, kurt + 3.0};
  double zmin = z.front(), zmax = z.front();
  for (double v : z) {
    zmin = std::min(zmin, v);
    zmax = std::max(zmax, v);
    double pk = 1.0;
    for (int k = 0; k <= 12; ++k) {
      sys.raw[k] += pk;
      pk *= v;
    }
  }
  for (double& m : sys.raw) m /= static_cast<double>(z.size());

  std::array<double, 4> r{};
  std::array<std::array<double, 4>, 4> jac{};
  sys.evaluate(fit.coef, r, &jac);
  double err = max_abs(r);
  int it = 0;
  for (; it < max_iters && err > kTol; ++it) {
    std::array<double, 4> step{};
    std::array<double, 4> rhs{-r[0], -r[1], -r[2], -r[3]};
    if (!solve4(jac, rhs, step)) break;
    double alpha = 1.0;
    bool improved = false;
    for (int h = 0; h < 40; ++h, alpha *= 0.5) {
      Cubic trial;
      for (int i = 0; i < 4; ++i) trial[i] = fit.coef[i] + alpha * step[i];
      std::array<double, 4> rt{};
      sys.evaluate(trial, rt, nullptr);
      if (max_abs(rt) < err) {
        fit.coef = trial;
        improved = true;
        break;
      }
    }
    if (!improved) break;
    sys.evaluate(fit.coef, r, &jac);
    err = max_abs(r);
  }
  fit.iterations = it;
  if (err > kTol || fit.coef[1] <= 0.0) return fit;

  auto [lo, hi] = increasing_interval(fit.coef);
  if (zmin >= lo && zmax <= hi) {
    fit.converged = true;
    return fit;
  }

  // Clamped refinement: residuals measured on the actual clamped output,
  // steps taken with the unclamped Jacobian.
  fit.clamped = true;
  auto data_residual = [&](const Cubic& k, std::array<double, 4>& out) {
    const auto [l, h] = increasing_interval(k);
    std::array<double, 4> acc{};
    for (double v : z) {
      const double y = eval_cubic(k, std::clamp(v, l, h));
      double yk = y;
      for (int p = 0; p < 4; ++p) {
        acc[p] += yk;
        yk *= y;
      }
    }
    for (int p = 0; p < 4; ++p) out[p] = acc[p] / static_cast<double>(z.size()) - sys.goal[p];
  };
  constexpr double kClampedTol = 1e-6;
  data_residual(fit.coef, r);
  err = max_abs(r);
  for (; it < max_iters && err > kClampedTol; ++it) {
    std::array<double, 4> unclamped{};
    sys.evaluate(fit.coef, unclamped, &jac);
    std::array<double, 4> step{};
    std::array<double, 4> rhs{-r[0], -r[1], -r[2], -r[3]};
    if (!solve4(jac, rhs, step)) break;
    double alpha = 1.0;
    bool improved = false;
    for (int h = 0; h < 20; ++h, alpha *= 0.5) {
      Cubic trial;
      for (int i = 0; i < 4; ++i) trial[i] = fit.coef[i] + alpha * step[i];
      if (trial[1] <= 0.0) continue;
      std::array<double, 4> rt{};
      data_residual(trial, rt);
      if (max_abs(rt) < err) {
        fit.coef = trial;
        r = rt;
        err = max_abs(rt);
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  fit.iterations = it;
  // Skewness and kurtosis tolerances downstream are 5e-2; a residual of 1e-3
  // on the raw moments is well inside that.
  fit.converged = err <= 1e-3;
  return fit;
}

}  // namespace detail

/// Distribution alignment of every channel of `x` to `target`.
///
/// order 2 is exactly adain. order 4 additionally matches skewness and
/// excess kurtosis through a fitted non-decreasing cubic of the standardized
/// channel, then rescales to the target mean and variance. Channels whose fit
/// does not converge within 100 Newton iterations receive the order-2 result
/// and are flagged in `report`.
inline FeatureMatrix align_moments(const FeatureMatrix& x, const MomentStats& target, int order,
                                   AlignReport* report = nullptr) {
  if (order != 2 && order != 4) throw InvalidArgument("align_moments: order must be 2 or 4, got " + std::to_string(order));
  detail::check_channels(x.cols(), target, "align_moments");
  if (report) {
    report->fallback.assign(x.cols(), 0);
    report->clamped.assign(x.cols(), 0);
    report->iterations.assign(x.cols(), 0);
  }
  FeatureMatrix out = adain(x, target);
  if (order == 2) return out;

  constexpr int kMaxIters = 100;
  const std::size_t n = x.rows();
  std::vector<double> z(n), y(n);
  for (std::size_t c = 0; c < x.cols(); ++c) {
    const auto m = detail::channel_moments(x, c, false);
    if (m.degenerate || target.degenerate[c] || target.variance[c] <= 0.0f) continue;
    const double inv_std = 1.0 / std::sqrt(m.variance);
    for (std::size_t i = 0; i < n; ++i) z[i] = (static_cast<double>(x(i, c)) - m.mean) * inv_std;

    const auto fit = detail::fit_moment_cubic(z, target.skewness[c], target.excess_kurtosis[c], kMaxIters);
    if (report) {
      report->iterations[c] = fit.iterations;
      report->clamped[c] = fit.clamped ? 1 : 0;
    }
    if (!fit.converged) {
      if (report) report->fallback[c] = 1;
      continue;
    }
    const auto [lo, hi] = detail::increasing_interval(fit.coef);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = detail::eval_cubic(fit.coef, std::clamp(z[i], lo, hi));
      sum += y[i];
    }
    const double y_mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (y[i] - y_mean) * (y[i] - y_mean);
    const double y_std = std::sqrt(ss / static_cast<double>(n));
    if (!(y_std > 0.0)) {
      if (report) report->fallback[c] = 1;
      continue;
    }
    const double gain = std::sqrt(static_cast<double>(target.variance[c])) / y_std;
    for (std::size_t i = 0; i < n; ++i) {
      out(i, c) = static_cast<float>((y[i] - y_mean) * gain + static_cast<double>(target.mean[c]));
    }
  }
  return out;
}

}  // namespace stylebank
