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

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "splitft/numkit.hpp"

namespace splitft {

/// Trainable low-rank pair attached to one frozen d×k layer: the effective
/// weight is W0 + a·b with a (d×r) and b (r×k).
struct LoraAdapter {
  Mat a;
  Mat b;
  std::size_t rank = 0;
  std::size_t layer_index = 0;  // global layer id, 1-based

  std::size_t in_dim() const noexcept { return a.rows(); }
  std::size_t out_dim() const noexcept { return b.cols(); }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Change of an adapter over some training interval.
struct AdapterDelta {
  std::size_t layer_index = 0;
  Mat da;
  Mat db;
  std::size_t rank = 0;

  friend bool operator==(const AdapterDelta&, const AdapterDelta&) = default;
};

struct AdapterGrad {
  Mat ga;
  Mat gb;
};

enum class ResizePolicy { kPadTruncate, kReinit };

inline constexpr double kLoraInitSigma = 0.02;

inline void check_rank(std::size_t d, std::size_t k, std::size_t rank, const char* where) {
  if (rank < 1 || rank > std::min(d, k)) {
    throw DimensionError(std::string(where) + ": rank " + std::to_string(rank) +
                         " outside [1, " + std::to_string(std::min(d, k)) + "]");
  }
}

inline void check_adapter(const LoraAdapter& ad, const char* where) {
  if (ad.a.cols() != ad.rank || ad.b.rows() != ad.rank) {
    throw DimensionError(std::string(where) + ": adapter factors " + shape_str(ad.a) +
                         ", " + shape_str(ad.b) + " disagree with rank " +
                         std::to_string(ad.rank));
  }
}

/// a ~ N(0, 0.02²), b = 0, so a·b = 0 and the frozen function is untouched.
inline LoraAdapter new_adapter(std::size_t d, std::size_t k, std::size_t rank,
                               std::size_t layer_index, Rng& rng) {
  check_rank(d, k, rank, "new_adapter");
  return {gaussian(rng, d, rank, kLoraInitSigma), Mat(rank, k), rank, layer_index};
}

inline Mat delta_weight(const LoraAdapter& ad) { return matmul(ad.a, ad.b); }

inline Mat effective_weight(const Mat& w0, const LoraAdapter& ad) {
  check_adapter(ad, "effective_weight");
  if (w0.rows() != ad.in_dim() || w0.cols() != ad.out_dim()) {
    throw DimensionError("effective_weight: base " + shape_str(w0) + " vs adapter " +
                         std::to_string(ad.in_dim()) + "x" + std::to_string(ad.out_dim()));
  }
  return add(w0, delta_weight(ad));
}

/// d·r + r·k. Defined for rank 0 as a query even though such an adapter
/// cannot be constructed.
constexpr std::size_t trainable_params(std::size_t d, std::size_t k, std::size_t rank) {
  return d * rank + rank * k;
}

/// Exact gradients of L through y = x·(W0 + a·b) given g = ∂L/∂y:
/// ∂L/∂a = xᵀ·g·bᵀ and ∂L/∂b = (x·a)ᵀ·g.
inline AdapterGrad grad_adapters(const Mat& x, const Mat& g, const LoraAdapter& ad) {
  check_adapter(ad, "grad_adapters");
  if (x.cols() != ad.in_dim() || g.cols() != ad.out_dim() || x.rows() != g.rows()) {
    throw DimensionError("grad_adapters: x " + shape_str(x) + ", g " + shape_str(g) +
                         " for adapter " + shape_str(ad.a) + "·" + shape_str(ad.b));
  }
  return {matmul_nt(matmul_tn(x, g), ad.b), matmul_tn(matmul(x, ad.a), g)};
}

inline LoraAdapter sgd_step(LoraAdapter ad, const Mat& ga, const Mat& gb, double lr) {
  if (lr < 0.0) throw DimensionError("sgd_step: negative learning rate");
  require_same_shape(ad.a, ga, "sgd_step(a)");
  require_same_shape(ad.b, gb, "sgd_step(b)");
  axpy(ad.a, -lr, ga);
  axpy(ad.b, -lr, gb);
  return ad;
}

inline LoraAdapter apply_delta(LoraAdapter ad, const AdapterDelta& delta) {
  if (delta.rank != ad.rank || !delta.da.same_shape(ad.a) || !delta.db.same_shape(ad.b)) {
    throw RankMismatchError("apply_delta: layer " + std::to_string(ad.layer_index) +
                            " rank " + std::to_string(ad.rank) + " vs delta rank " +
                            std::to_string(delta.rank));
  }
  axpy(ad.a, 1.0, delta.da);
  axpy(ad.b, 1.0, delta.db);
  return ad;
}

/// after − before, for adapters of the same layer and rank.
inline AdapterDelta diff(const LoraAdapter& after, const LoraAdapter& before) {
  if (after.rank != before.rank || after.layer_index != before.layer_index) {
    throw RankMismatchError("diff: adapters disagree on layer or rank");
  }
  return {after.layer_index, sub(after.a, before.a), sub(after.b, before.b), after.rank};
}

/// Changes the adapter rank. kPadTruncate keeps a·b exactly when growing
/// (zero columns/rows) and replaces it by its best rank-`new_rank`
/// approximation when shrinking, split as a = U·√S, b = √S·Vᵀ.
/// kReinit draws a fresh adapter.
inline LoraAdapter resize_rank(const LoraAdapter& ad, std::size_t new_rank,
                               ResizePolicy policy, Rng& rng) {
  check_adapter(ad, "resize_rank");
  const std::size_t d = ad.in_dim();
  const std::size_t k = ad.out_dim();
  check_rank(d, k, new_rank, "resize_rank");
  if (policy == ResizePolicy::kReinit) return new_adapter(d, k, new_rank, ad.layer_index, rng);
  if (new_rank == ad.rank) return ad;

  LoraAdapter out{Mat(d, new_rank), Mat(new_rank, k), new_rank, ad.layer_index};
  if (new_rank > ad.rank) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < ad.rank; ++j) out.a(i, j) = ad.a(i, j);
    for (std::size_t i = 0; i < ad.rank; ++i)
      for (std::size_t j = 0; j < k; ++j) out.b(i, j) = ad.b(i, j);
    return out;
  }
  const Svd svd = svd_top_r(delta_weight(ad), new_rank);
  for (std::size_t j = 0; j < new_rank; ++j) {
    const double root = std::sqrt(svd.s[j]);
    for (std::size_t i = 0; i < d; ++i) out.a(i, j) = svd.u(i, j) * root;
    for (std::size_t i = 0; i < k; ++i) out.b(j, i) = svd.v(i, j) * root;
  }
  return out;
}

}  // namespace splitft
