#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "cacr/errors.hpp"

namespace cacr {

// Dense row-major matrix of doubles. Desk-scale: plain loops, no blocking.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& r : rows) {
      if (r.size() != m.cols_) throw DimMismatch("from_rows: ragged row lengths");
      std::copy(r.begin(), r.end(), m.row_ptr(i++));
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* row_ptr(std::size_t i) { return data_.data() + i * cols_; }
  const double* row_ptr(std::size_t i) const { return data_.data() + i * cols_; }
  std::span<double> row(std::size_t i) { return {row_ptr(i), cols_}; }
  std::span<const double> row(std::size_t i) const { return {row_ptr(i), cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void set_row(std::size_t i, std::span<const double> v) {
    if (v.size() != cols_) throw DimMismatch("set_row: length mismatch");
    std::copy(v.begin(), v.end(), row_ptr(i));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Sum of squared differences; exact zero for identical inputs, never negative.
inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline constexpr double kZeroNormThreshold = 1e-30;

inline std::vector<double> l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  if (n < kZeroNormThreshold) throw ZeroNorm("l2_normalize: vector norm below 1e-30");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

inline void l2_normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double n = norm(r);
    if (n < kZeroNormThreshold) throw ZeroNorm("l2_normalize_rows: zero-norm row");
    for (double& x : r) x /= n;
  }
}

// out[i][j] = ||A_i - B_j||^2, computed coordinate-wise so entries are exact
// squares (never negative, exactly zero for identical rows).
inline Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimMismatch("pairwise_sq_dist: column count mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = sq_dist(a.row(i), b.row(j));
  return out;
}

inline double logsumexp_row(std::span<const double> s) {
  double m = s[0];
  for (double v : s) m = std::max(m, v);
  double acc = 0.0;
  for (double v : s) acc += std::exp(v - m);
  return m + std::log(acc);
}

// Row-wise softmax with per-row max subtraction.
inline Matrix softmax_rows(const Matrix& scores) {
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto s = scores.row(i);
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    double denom = 0.0;
    auto o = out.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) {
      o[j] = std::exp(s[j] - m);
      denom += o[j];
    }
    for (double& v : o) v /= denom;
  }
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimMismatch("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

// A (M x K) times B^T (B is N x K) -> M x N.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimMismatch("matmul_nt: inner dimension mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

// A^T (A is K x M) times B (K x N) -> M x N.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimMismatch("matmul_tn: inner dimension mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
    }
  return out;
}

// Batch of feature vectors constrained to the unit sphere.
struct UnitEmbeddingBatch {
  static constexpr double kNormTol = 1e-9;

  Matrix emb;

  explicit UnitEmbeddingBatch(Matrix m) : emb(std::move(m)) {
    for (std::size_t i = 0; i < emb.rows(); ++i) {
      const double n = norm(emb.row(i));
      if (std::abs(n - 1.0) > kNormTol)
        throw ZeroNorm("UnitEmbeddingBatch: row norm deviates from 1");
    }
  }

  static UnitEmbeddingBatch normalize(Matrix m) {
    l2_normalize_rows(m);
    return UnitEmbeddingBatch(std::move(m));
  }
};

}  // namespace cacr
