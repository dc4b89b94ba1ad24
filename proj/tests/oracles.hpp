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

// Test-only reference implementations. They share no code paths with the
// library beyond the Mat container and raw 64-bit generator output.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "splitft/splitft.hpp"

namespace oracle {

using splitft::Mat;

inline Mat naive_matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Mat naive_add(const Mat& a, const Mat& b) {
  Mat c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) + b(i, j);
  return c;
}

inline double frob(const Mat& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

inline double max_abs(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

/// All singular values, descending, by one-sided Jacobi rotations on the
/// columns of a copy of m.
inline std::vector<double> singular_values(const Mat& m) {
  Mat a = m.rows() >= m.cols() ? m : splitft::transpose(m);
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (std::abs(gamma) <= 1e-300) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = a(i, p);
          const double y = a(i, q);
          a(i, p) = c * x - s * y;
          a(i, q) = s * x + c * y;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> s(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += a(i, j) * a(i, j);
    s[j] = std::sqrt(n);
  }
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

/// sqrt(Σ_{i ≥ r} σ_i²): the optimal rank-r Frobenius error.
inline double tail_norm(const std::vector<double>& s, std::size_t r) {
  double t = 0.0;
  for (std::size_t i = r; i < s.size(); ++i) t += s[i] * s[i];
  return std::sqrt(t);
}

/// Central differences of f at every entry of x.
inline Mat finite_diff(const std::function<double(const Mat&)>& f, const Mat& x, double h = 1e-6) {
  Mat g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      Mat p = x;
      p(i, j) = x(i, j) + h;
      const double up = f(p);
      p(i, j) = x(i, j) - h;
      const double down = f(p);
      g(i, j) = (up - down) / (2.0 * h);
    }
  return g;
}

inline double rel_err(const Mat& analytic, const Mat& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.rows(); ++i)
    for (std::size_t j = 0; j < analytic.cols(); ++j) {
      diff = std::max(diff, std::abs(analytic(i, j) - numeric(i, j)));
      scale = std::max({scale, std::abs(analytic(i, j)), std::abs(numeric(i, j))});
    }
  return scale == 0.0 ? diff : diff / scale;
}

// ---------------------------------------------------------------------------
// Straight-line model

/// Layer stack [from, to] written out loop by loop: effective weights are
/// formed explicitly, mixing is an explicit prefix average.
inline Mat forward_blocks(const splitft::FrozenBase& base, std::span<const splitft::LoraAdapter> adapters, Mat h,
                          std::size_t from, std::size_t to) {
  const auto& cfg = base.cfg;
  const std::size_t n = h.rows();
  const std::size_t d = cfg.dim;
  for (std::size_t p = from; p <= to; ++p) {
    const auto& ad = adapters[p - from];
    const Mat w = naive_add(base.blocks[p - 1], naive_matmul(ad.a, ad.b));
    Mat mixed = h;
    if (cfg.mixer) {
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t start = r - r % cfg.seq_len;
        for (std::size_t j = 0; j < d; ++j) {
          double s = 0.0;
          for (std::size_t t = start; t <= r; ++t) s += h(t, j);
          mixed(r, j) = s / static_cast<double>(r - start + 1);
        }
      }
    }
    const Mat z = naive_matmul(mixed, w);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) h(r, j) = mixed(r, j) + std::tanh(z(r, j));
  }
  if (to == cfg.layers) {
    Mat logits(n, cfg.vocab);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t v = 0; v < cfg.vocab; ++v) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += h(r, j) * base.embedding(v, j);
        logits(r, v) = s;
      }
    return logits;
  }
  return h;
}

inline Mat embed(const splitft::FrozenBase& base, std::span<const std::uint32_t> tokens) {
  Mat h(tokens.size(), base.cfg.dim);
  for (std::size_t r = 0; r < tokens.size(); ++r)
    for (std::size_t j = 0; j < base.cfg.dim; ++j) h(r, j) = base.embedding(tokens[r], j);
  return h;
}

inline double cross_entropy(const Mat& logits, std::span<const std::uint32_t> targets) {
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits(r, v));
    total += std::log(z) - logits(r, targets[r]);
  }
  return total / static_cast<double>(logits.rows());
}

/// Monolithic SGD: one process, full forward and backward per batch,
/// layers 1..depth stepped with lr_client and the rest with lr_server.
inline void monolithic_step(const splitft::FrozenBase& base, std::vector<splitft::LoraAdapter>& adapters,
                            std::size_t depth, const splitft::TokenBatch& batch, double lr_client,
                            double lr_server) {
  const std::size_t m = base.cfg.layers;
  const auto fwd = splitft::forward(base, adapters, batch.inputs, 1, m);
  const auto lg = splitft::loss_and_head_grad(fwd.output, batch.targets);
  const auto bwd = splitft::backward(base, adapters, fwd.cache, lg.grad, 1, m);
  for (std::size_t p = 1; p <= m; ++p) {
    const double lr = p <= depth ? lr_client : lr_server;
    auto& ad = adapters[p - 1];
    for (std::size_t e = 0; e < ad.a.size(); ++e) ad.a.data()[e] -= lr * bwd.grads[p - 1].ga.data()[e];
    for (std::size_t e = 0; e < ad.b.size(); ++e) ad.b.data()[e] -= lr * bwd.grads[p - 1].gb.data()[e];
  }
}

// ---------------------------------------------------------------------------
// Dirichlet partition from raw generator output

class Draws {
 public:
  explicit Draws(std::uint64_t seed) : rng_(seed) {}

  double u01() { return static_cast<double>(rng_.next_u64() >> 11) / 9007199254740992.0; }
  double u01_open_low() { return 1.0 - u01(); }

  std::uint64_t bounded(std::uint64_t n) {
    const std::uint64_t threshold = (~n + 1) % n;
    while (true) {
      const std::uint64_t x = rng_.next_u64();
      if (x >= threshold) return x % n;
    }
  }

  double std_normal() {
    const double r = std::sqrt(-2.0 * std::log(u01_open_low()));
    return r * std::cos(2.0 * std::numbers::pi * u01());
  }

  double gamma(double k) {
    if (k < 1.0) {
      const double g = gamma(k + 1.0);
      return g * std::pow(u01_open_low(), 1.0 / k);
    }
    const double d = k - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x, v;
      do {
        x = std_normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = u01_open_low();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  void consume_shuffle(std::size_t n) {
    for (std::size_t i = n; i > 1; --i) bounded(i);
  }

 private:
  splitft::Rng rng_;
};

/// Per-category, per-client counts of a Dirichlet partition.
inline std::vector<std::vector<std::size_t>> dirichlet_counts(const std::vector<std::size_t>& category_sizes,
                                                              std::size_t n_clients, double alpha,
                                                              std::uint64_t seed) {
  Draws draws(seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t n_k : category_sizes) {
    if (n_k == 0) {
      out.emplace_back(n_clients, 0);
      continue;
    }
    std::vector<double> g(n_clients);
    for (auto& x : g) x = draws.gamma(alpha);
    const double total = std::accumulate(g.begin(), g.end(), 0.0);
    draws.consume_shuffle(n_k);
    std::vector<std::size_t> counts(n_clients);
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t used = 0;
    for (std::size_t i = 0; i < n_clients; ++i) {
      const double share = g[i] / total * static_cast<double>(n_k);
      counts[i] = static_cast<std::size_t>(share);
      used += counts[i];
      rema.emplace_back(share - std::floor(share), i);
    }
    std::stable_sort(rema.begin(), rema.end(), [](auto x, auto y) { return x.first > y.first; });
    for (std::size_t r = 0; used < n_k; ++r, ++used) ++counts[rema[r % n_clients].second];
    out.push_back(counts);
  }
  return out;
}

// ---------------------------------------------------------------------------
// FedAvg as a scalar loop

struct Report {
  std::uint32_t client;
  std::size_t size;
  std::vector<splitft::AdapterDelta> deltas;
};

/// Weighted mean per layer over the clients that report it.
inline std::vector<splitft::AdapterDelta> weighted_sum(const std::vector<Report>& reports) {
  std::size_t max_layer = 0;
  for (const auto& r : reports)
    for (const auto& d : r.deltas) max_layer = std::max(max_layer, d.layer_index);
  std::vector<splitft::AdapterDelta> out;
  for (std::size_t layer = 1; layer <= max_layer; ++layer) {
    double total = 0.0;
    const splitft::AdapterDelta* shape = nullptr;
    for (const auto& r : reports)
      for (const auto& d : r.deltas)
        if (d.layer_index == layer) {
          total += static_cast<double>(r.size);
          shape = &d;
        }
    if (!shape) continue;
    splitft::AdapterDelta agg{layer, Mat(shape->da.rows(), shape->da.cols()), Mat(shape->db.rows(), shape->db.cols()),
                              shape->rank};
    for (const auto& r : reports)
      for (const auto& d : r.deltas)
        if (d.layer_index == layer) {
          const double w = static_cast<double>(r.size) / total;
          for (std::size_t e = 0; e < d.da.size(); ++e) agg.da.data()[e] += w * d.da.data()[e];
          for (std::size_t e = 0; e < d.db.size(); ++e) agg.db.data()[e] += w * d.db.data()[e];
        }
    out.push_back(std::move(agg));
  }
  return out;
}

}  // namespace oracle
