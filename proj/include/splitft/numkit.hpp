// Copyright 2026 The SplitFT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major f64 matrices, a pinned splitmix64/xoshiro256++ generator
// and a truncated SVD. Everything else in the library is built on this.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitft/errors.hpp"

namespace splitft {

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Mat: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
    }
  }
  // Row-list literal, e.g. Mat{{1, 2}, {3, 4}}.
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw DimensionError("Mat: ragged row list");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  bool same_shape(const Mat& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(const Mat& m) {
  return std::all_of(m.data().begin(), m.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Mat& m, const char* where) {
  if (!all_finite(m)) throw NumericError(std::string(where) + ": non-finite entry");
}

inline void require_same_shape(const Mat& a, const Mat& b, const char* where) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(where) + ": " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  require_finite(c, "matmul");
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// aᵀ·b without materialising the transpose.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
  }
  Mat c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  require_finite(c, "matmul_tn");
  return c;
}

// a·bᵀ.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
  }
  Mat c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  require_finite(c, "matmul_nt");
  return c;
}

inline Mat add(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "add");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Mat sub(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "sub");
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Mat scale(const Mat& a, double s) {
  Mat c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

/// y += alpha * x
inline void axpy(Mat& y, double alpha, const Mat& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += alpha * x.data()[i];
}

inline double frobenius_norm(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Random numbers. The pipeline is normative for cross-language
// reproducibility: splitmix64 expands the seed into xoshiro256++ state,
// uniforms take the top 53 bits, normals use Box–Muller (cosine branch only).

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Independent sub-seed for a named stream of a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 sm(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  return sm.next();
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& s : s_) s = sm.next();
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// (0, 1], safe to take the logarithm of.
  double uniform_pos() { return 1.0 - uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DimensionError("Rng::below: n = 0");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gamma(shape, 1) by Marsaglia–Tsang; shapes below one use the
  /// Gamma(shape + 1) * U^(1/shape) boost.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw DimensionError("Rng::gamma: shape must be > 0");
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      return g * std::pow(uniform_pos(), 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = 0.0;
      double v = 0.0;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

/// i.i.d. N(0, sigma²) entries, row-major draw order.
inline Mat gaussian(Rng& rng, std::size_t rows, std::size_t cols, double sigma) {
  if (sigma < 0.0) throw DimensionError("gaussian: sigma < 0");
  Mat m(rows, cols);
  for (double& v : m.data()) v = sigma * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Truncated SVD.

struct Svd {
  Mat u;                  // rows x r, orthonormal columns
  std::vector<double> s;  // r, non-increasing, non-negative
  Mat v;                  // cols x r, orthonormal columns
};

namespace detail {

// Cyclic Jacobi eigen-decomposition of a small symmetric matrix. Returns
// eigenvalues in descending order and eigenvectors as columns.
inline std::pair<std::vector<double>, Mat> symmetric_eigen(Mat h) {
  const std::size_t n = h.rows();
  Mat q = Mat::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += h(i, j) * h(i, j);
        if (i != j) off += h(i, j) * h(i, j);
      }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t r = p + 1; r < n; ++r) {
        const double hpr = h(p, r);
        if (hpr == 0.0) continue;
        const double theta = (h(r, r) - h(p, p)) / (2.0 * hpr);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double hkp = h(k, p);
          const double hkr = h(k, r);
          h(k, p) = c * hkp - s * hkr;
          h(k, r) = s * hkp + c * hkr;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double hpk = h(p, k);
          const double hrk = h(r, k);
          h(p, k) = c * hpk - s * hrk;
          h(r, k) = s * hpk + c * hrk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double qkp = q(k, p);
          const double qkr = q(k, r);
          q(k, p) = c * qkp - s * qkr;
          q(k, r) = s * qkp + c * qkr;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return h(a, a) > h(b, b); });
  std::vector<double> values(n);
  Mat vectors(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    values[j] = h(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) vectors(k, j) = q(k, order[j]);
  }
  return {std::move(values), std::move(vectors)};
}

// Modified Gram–Schmidt, two passes. Columns that collapse are replaced by
// the first standard basis vector that is not yet in the span.
inline Mat orthonormalize(Mat m) {
  const std::size_t n = m.rows();
  const std::size_t q = m.cols();
  std::size_t next_basis = 0;
  for (std::size_t j = 0; j < q; ++j) {
    double original = 0.0;
    for (std::size_t i = 0; i < n; ++i) original += m(i, j) * m(i, j);
    original = std::sqrt(original);
    for (;;) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < j; ++k) {
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += m(i, k) * m(i, j);
          for (std::size_t i = 0; i < n; ++i) m(i, j) -= dot * m(i, k);
        }
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += m(i, j) * m(i, j);
      norm = std::sqrt(norm);
      if (norm > 1e-10 * std::max(original, 1e-300) && norm > 1e-300) {
        for (std::size_t i = 0; i < n; ++i) m(i, j) /= norm;
        break;
      }
      if (next_basis >= n) throw NumericError("orthonormalize: basis exhausted");
      for (std::size_t i = 0; i < n; ++i) m(i, j) = (i == next_basis) ? 1.0 : 0.0;
      original = 1.0;
      ++next_basis;
    }
  }
  return m;
}

inline Mat take_cols(const Mat& m, std::size_t r) {
  Mat out(m.rows(), r);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j) out(i, j) = m(i, j);
  return out;
}

inline constexpr int kSvdIterations = 100;
inline constexpr double kSvdTolerance = 1e-12;
inline constexpr std::size_t kSvdOversample = 8;
inline constexpr std::uint64_t kSvdStartSeed = 0x5356445354415254ULL;

}  // namespace detail

/// Best rank-r approximation factors of `m` by orthogonal (subspace)
/// iteration on mᵀm with Rayleigh–Ritz extraction. The block is oversampled
/// and the iteration stops early once the leading r Ritz values move by
/// less than the tolerance relative to the largest.
inline Svd svd_top_r(const Mat& m, std::size_t r) {
  const std::size_t min_dim = std::min(m.rows(), m.cols());
  if (r < 1 || r > min_dim) {
    throw DimensionError("svd_top_r: r = " + std::to_string(r) + " for " + shape_str(m));
  }
  if (m.rows() < m.cols()) {
    Svd t = svd_top_r(transpose(m), r);
    std::swap(t.u, t.v);
    return t;
  }
  const std::size_t n = m.cols();
  const std::size_t block = std::min(n, r + detail::kSvdOversample);

  Rng rng(detail::kSvdStartSeed);
  Mat v = detail::orthonormalize(gaussian(rng, n, block, 1.0));
  std::vector<double> ritz(block, 0.0);

  for (int it = 0; it < detail::kSvdIterations; ++it) {
    v = detail::orthonormalize(matmul_tn(m, matmul(m, v)));
    const Mat y = matmul(m, v);
    auto [values, vectors] = detail::symmetric_eigen(matmul_tn(y, y));
    v = matmul(v, vectors);
    double change = 0.0;
    for (std::size_t j = 0; j < r; ++j) change = std::max(change, std::abs(values[j] - ritz[j]));
    const double ref = std::max(std::abs(values[0]), 1e-300);
    ritz = std::move(values);
    if (it > 0 && change <= detail::kSvdTolerance * ref) break;
    if (block == n && it > 0) break;  // full block: subspace is exact
  }

  v = detail::take_cols(v, r);
  Mat u = matmul(m, v);
  std::vector<double> s(r, 0.0);
  for (std::size_t j = 0; j < r; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < u.rows(); ++i) norm += u(i, j) * u(i, j);
    s[j] = std::sqrt(norm);
  }
  // Column norms can disagree with the Ritz order in the last ulp; keep the
  // factors consistent with a non-increasing spectrum.
  std::vector<std::size_t> order(r);
  for (std::size_t j = 0; j < r; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  Mat u_sorted(u.rows(), r);
  Mat v_sorted(n, r);
  std::vector<double> s_sorted(r);
  const double tiny = std::max(s[order[0]], 1e-300) * 1e-13;
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    s_sorted[j] = s[src];
    for (std::size_t i = 0; i < n; ++i) v_sorted(i, j) = v(i, src);
    for (std::size_t i = 0; i < u.rows(); ++i)
      u_sorted(i, j) = s[src] > tiny ? u(i, src) / s[src] : 0.0;
    if (s[src] <= tiny) s_sorted[j] = s[src] <= 1e-300 ? 0.0 : s[src];
  }
  // Null directions get an arbitrary orthonormal completion.
  u_sorted = detail::orthonormalize(std::move(u_sorted));
  return {std::move(u_sorted), std::move(s_sorted), std::move(v_sorted)};
}

/// U·diag(S)·Vᵀ.
inline Mat reconstruct(const Svd& svd) {
  Mat us = svd.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= svd.s[j];
  return matmul_nt(us, svd.v);
}

}  // namespace splitft
