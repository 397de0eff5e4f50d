#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sevolve/errors.hpp"

namespace sevolve {

using Vec = std::vector<double>;

/// Row-major dense matrix. Bias vectors are stored as rows x 1.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// out += m * x
inline void gemv_acc(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) s += row[c] * x[c];
    out[r] += s;
  }
}

/// out += m^T * y
inline void gemv_t_acc(const Matrix& m, std::span<const double> y, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c] * yr;
  }
}

/// m += y x^T
inline void outer_acc(std::span<const double> y, std::span<const double> x, Matrix& m) {
  auto data = m.flat();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (std::size_t c = 0; c < m.cols(); ++c) data[r * m.cols() + c] += yr * x[c];
  }
}

/// m(:,0) += y, for bias columns.
inline void bias_acc(std::span<const double> y, Matrix& m) {
  auto data = m.flat();
  for (std::size_t r = 0; r < y.size(); ++r) data[r] += y[r];
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_dim(std::span<const double> v, std::size_t n, const char* what) {
  if (v.size() != n)
    throw ValidationError(std::string(what) + ": expected dimension " + std::to_string(n) +
                          ", got " + std::to_string(v.size()));
}

}  // namespace sevolve
