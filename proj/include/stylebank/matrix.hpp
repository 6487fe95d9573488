#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stylebank/error.hpp"

namespace stylebank {

/// Dense row-major matrix. Rows are tokens, columns are channels.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw InvalidArgument("matrix data length " + std::to_string(data_.size()) +
                            " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  template <class U>
  static Matrix cast(const Matrix<U>& other) {
    Matrix out(other.rows(), other.cols());
    std::transform(other.data().begin(), other.data().end(), out.data_.begin(),
                   [](U v) { return static_cast<T>(v); });
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using FeatureMatrix = Matrix<float>;

/// True when every element is finite.
template <class T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T v) { return std::isfinite(v); });
}

/// a (n x k) times b (k x m), accumulated in the precision of `a`.
template <class T, class W>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<W>& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.rows()) + ")");
  }
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const W* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * static_cast<T>(brow[j]);
    }
  }
  return out;
}

/// a (n x k) times transpose(b) where b is (m x k).
template <class T, class W>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<W>& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_bt: column counts differ (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.cols()) + ")");
  }
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const W* brow = b.row(j).data();
      T acc{};
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * static_cast<T>(brow[k]);
      out(i, j) = acc;
    }
  }
  return out;
}

/// transpose(a) times b, a is (k x n), b is (k x m).
template <class T, class W>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<W>& b) {
  if (a.rows() != b.rows()) throw InvalidArgument("matmul_at: row counts differ");
  Matrix<T> out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a(k, i);
      T* o = out.row(i).data();
      const W* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * static_cast<T>(brow[j]);
    }
  }
  return out;
}

/// Stack rows of `top` above rows of `bottom`.
template <class T>
Matrix<T> vconcat(const Matrix<T>& top, const Matrix<T>& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) throw InvalidArgument("vconcat: column counts differ");
  Matrix<T> out(top.rows() + bottom.rows(), top.cols());
  std::copy(top.data().begin(), top.data().end(), out.data().begin());
  std::copy(bottom.data().begin(), bottom.data().end(), out.data().begin() + top.size());
  return out;
}

/// Columns [first, first + count) of `m`.
template <class T>
Matrix<T> column_slice(const Matrix<T>& m, std::size_t first, std::size_t count) {
  Matrix<T> out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    std::copy_n(m.row(r).begin() + first, count, out.row(r).begin());
  }
  return out;
}

}  // namespace stylebank
