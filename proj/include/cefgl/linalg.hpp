#pragma once

#include <algorithm>
#include <cassert>
#include <cfloat>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cefgl/error.hpp"

namespace cefgl {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeMismatch("Matrix: data length " + std::to_string(data_.size()) +
                          " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeMismatch("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  const std::vector<double>& values() const { return data_; }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  // this += s * o
  Matrix& axpy(double s, const Matrix& o) {
    require_same(o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    return *this;
  }

  bool operator==(const Matrix&) const = default;

 private:
  void require_same(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeMismatch(std::string("Matrix ") + op + ": " + std::to_string(rows_) + "x" +
                          std::to_string(cols_) + " vs " + std::to_string(o.rows_) + "x" +
                          std::to_string(o.cols_));
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

struct NamedMatrix {
  std::string name;
  Matrix value;
  bool operator==(const NamedMatrix&) const = default;
};

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeMismatch("matmul_tn: row counts differ");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

// a·bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("matmul_nt: column counts differ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeMismatch("max_abs_diff: shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Elementwise Σ weight·m over the terms.
inline Matrix weighted_sum(std::span<const std::pair<double, Matrix>> terms) {
  if (terms.empty()) throw ShapeMismatch("weighted_sum: no terms");
  Matrix out(terms.front().second.rows(), terms.front().second.cols());
  for (const auto& [w, m] : terms) {
    if (!m.same_shape(out)) throw ShapeMismatch("weighted_sum: shapes differ");
    out.axpy(w, m);
  }
  return out;
}

inline Matrix weighted_sum(std::span<const double> weights, std::span<const Matrix* const> mats) {
  if (mats.empty() || weights.size() != mats.size()) {
    throw ShapeMismatch("weighted_sum: need equal, non-zero numbers of weights and matrices");
  }
  Matrix out(mats.front()->rows(), mats.front()->cols());
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (!mats[i]->same_shape(out)) throw ShapeMismatch("weighted_sum: shapes differ");
    out.axpy(weights[i], *mats[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Singular value decomposition

struct SvdResult {
  Matrix u;                  // m x k, orthonormal columns
  std::vector<double> sigma; // k values, non-increasing, >= 0
  Matrix v;                  // n x k, orthonormal columns
};

namespace detail {

// Fills column `col` of `q` (which has orthonormal columns [0, col) already
// placed in `filled`) with a unit vector orthogonal to them.
inline void complete_column(Matrix& q, std::size_t col, const std::vector<std::size_t>& filled) {
  const std::size_t m = q.rows();
  for (std::size_t e = 0; e < m; ++e) {
    std::vector<double> cand(m, 0.0);
    cand[e] = 1.0;
    // Two passes of modified Gram-Schmidt.
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t f : filled) {
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += q(i, f) * cand[i];
        for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * q(i, f);
      }
    }
    double norm = 0.0;
    for (double v : cand) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (std::size_t i = 0; i < m; ++i) q(i, col) = cand[i] / norm;
      return;
    }
  }
  assert(false && "complete_column: no candidate found");
}

// One-sided Jacobi (Hestenes) for m >= n.
inline SvdResult svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix work = a;
  Matrix vacc = Matrix::identity(n);
  const double tol = DBL_EPSILON * static_cast<double>(m);

  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = vacc(i, p), vq = vacc(i, q);
          vacc(i, p) = c * vp - s * vq;
          vacc(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += work(i, j) * work(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  std::vector<std::size_t> filled;
  std::vector<std::size_t> pending;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = norms[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vacc(i, j);
    if (norms[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = work(i, j) / norms[j];
      filled.push_back(k);
    } else {
      pending.push_back(k);
    }
  }
  for (std::size_t k : pending) {
    complete_column(out.u, k, filled);
    filled.push_back(k);
  }
  return out;
}

}  // namespace detail

inline SvdResult svd(const Matrix& a) {
  if (a.rows() == 0 || a.cols() == 0) throw ShapeMismatch("svd: empty matrix");
  if (!all_finite(a)) throw NonFiniteInput("svd: matrix has NaN/Inf entries");
  if (a.rows() >= a.cols()) return detail::svd_tall(a);
  SvdResult t = detail::svd_tall(transpose(a));
  std::swap(t.u, t.v);
  return t;
}

enum class ThresholdMode { Relative, Absolute };

struct LowRankApprox {
  Matrix matrix;
  std::size_t retained_rank = 0;
};

inline double truncation_cutoff(const SvdResult& s, ThresholdMode mode, double tau) {
  if (mode == ThresholdMode::Absolute) return tau;
  return s.sigma.empty() ? 0.0 : tau * s.sigma.front();
}

// Number of singular values strictly above the cutoff.
inline std::size_t retained_rank(const SvdResult& s, ThresholdMode mode, double tau) {
  const double cutoff = truncation_cutoff(s, mode, tau);
  std::size_t k = 0;
  while (k < s.sigma.size() && s.sigma[k] > cutoff) ++k;
  return k;
}

// Σ σ_j u_j v_jᵀ over the first `rank` triples.
inline Matrix reconstruct(const SvdResult& s, std::size_t rank) {
  Matrix out(s.u.rows(), s.v.rows());
  for (std::size_t j = 0; j < rank; ++j) {
    const double sig = s.sigma[j];
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double ui = sig * s.u(i, j);
      if (ui == 0.0) continue;
      auto row = out.row(i);
      for (std::size_t c = 0; c < out.cols(); ++c) row[c] += ui * s.v(c, j);
    }
  }
  return out;
}

inline LowRankApprox lowrank_truncate(const SvdResult& s, ThresholdMode mode, double tau) {
  if (tau < 0.0 || !std::isfinite(tau)) throw std::invalid_argument("lowrank_truncate: tau must be finite and >= 0");
  const std::size_t k = retained_rank(s, mode, tau);
  return {reconstruct(s, k), k};
}

// Vectors (min dimension 1) pass through untouched; everything else is
// rank-truncated.
inline LowRankApprox lowrank_truncate(const Matrix& a, ThresholdMode mode, double tau) {
  if (std::min(a.rows(), a.cols()) <= 1) {
    return {a, std::min(a.rows(), a.cols())};
  }
  return lowrank_truncate(svd(a), mode, tau);
}

}  // namespace cefgl
