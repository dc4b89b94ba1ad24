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

// A small frozen language model: token embedding, M residual blocks
//
//   h' = Mix(h);  z = h'·(W0 + a·b);  h_out = h' + tanh(z)
//
// and a head tied to the embedding transpose. Mix is the causal running
// mean over positions within a sequence (identity when the mixer is off).
// Forward and backward run over any contiguous 1-based layer range, which is
// what lets a client and the server each own one side of a cut.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitft/lora.hpp"
#include "splitft/numkit.hpp"

namespace splitft {

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t dim = 32;
  std::size_t layers = 8;
  std::size_t seq_len = 8;
  bool mixer = false;

  void validate() const {
    if (layers < 2) throw ConfigError("model: layers must be >= 2");
    if (dim < 2) throw ConfigError("model: dim must be >= 2");
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (seq_len < 1) throw ConfigError("model: seq_len must be >= 1");
  }
};

/// Per-layer LoRA ranks, index 0 is layer 1.
struct RankPlan {
  std::vector<std::size_t> ranks;

  std::size_t at(std::size_t layer) const { return ranks.at(layer - 1); }
  friend bool operator==(const RankPlan&, const RankPlan&) = default;
};

inline RankPlan uniform_rank_plan(std::size_t layers, std::size_t rank) {
  return {std::vector<std::size_t>(layers, rank)};
}

/// The cutlayer pair of every client (its last layer l and the server's
/// first layer l+1) gets `r_cut`; every other layer gets `r_others`.
inline RankPlan cut_rank_plan(std::size_t layers, const std::set<std::size_t>& client_depths,
                              std::size_t r_cut, std::size_t r_others) {
  RankPlan plan = uniform_rank_plan(layers, r_others);
  for (std::size_t l : client_depths) {
    if (l < 1 || l >= layers) throw RangeError("cut_rank_plan: depth out of range");
    plan.ranks[l - 1] = r_cut;
    plan.ranks[l] = r_cut;
  }
  return plan;
}

/// Frozen weights. Never modified after build_model.
struct FrozenBase {
  ModelConfig cfg;
  Mat embedding;            // V×d, also the head (logits = h·Eᵀ)
  std::vector<Mat> blocks;  // M of d×d
};

struct SplitModel {
  std::shared_ptr<const FrozenBase> base;
  std::vector<LoraAdapter> adapters;  // adapters[p-1] belongs to layer p

  const ModelConfig& config() const { return base->cfg; }
  std::span<const LoraAdapter> span(std::size_t from, std::size_t to) const {
    return std::span<const LoraAdapter>(adapters).subspan(from - 1, to - from + 1);
  }
};

/// Frozen parts are drawn N(0, (1/√d)²) from `seed`; adapter p is drawn
/// from its own derived stream so the base does not depend on the ranks.
inline SplitModel build_model(const ModelConfig& cfg, std::uint64_t seed, const RankPlan& plan) {
  cfg.validate();
  if (plan.ranks.size() != cfg.layers) throw ConfigError("build_model: rank plan length != layers");
  auto base = std::make_shared<FrozenBase>();
  base->cfg = cfg;
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  Rng rng(seed);
  base->embedding = gaussian(rng, cfg.vocab, cfg.dim, sigma);
  for (std::size_t p = 0; p < cfg.layers; ++p) base->blocks.push_back(gaussian(rng, cfg.dim, cfg.dim, sigma));

  SplitModel model{std::move(base), {}};
  for (std::size_t p = 1; p <= cfg.layers; ++p) {
    Rng ad_rng(derive_seed(seed, 1000 + p));
    model.adapters.push_back(new_adapter(cfg.dim, cfg.dim, plan.at(p), p, ad_rng));
  }
  return model;
}

struct ActivationCache {
  std::size_t from = 0;
  std::size_t to = 0;
  std::vector<Mat> mixed;  // h' per layer
  std::vector<Mat> pre;    // z per layer
};

struct ForwardResult {
  Mat output;  // logits when the range ends at layer M, else activations
  ActivationCache cache;
};

struct BackwardResult {
  Mat input_grad;                 // ∂L/∂(range input activations)
  std::vector<AdapterGrad> grads;  // grads[i] is layer from+i
};

struct LossGrad {
  double loss = 0.0;
  Mat grad;  // ∂loss/∂logits
};

namespace detail {

inline void check_range(const ModelConfig& cfg, std::size_t from, std::size_t to) {
  if (from < 1 || from > to || to > cfg.layers) {
    throw RangeError("layer range [" + std::to_string(from) + ", " + std::to_string(to) +
                     "] invalid for " + std::to_string(cfg.layers) + " layers");
  }
}

inline void check_adapters(std::span<const LoraAdapter> adapters, std::size_t from, std::size_t to) {
  if (adapters.size() != to - from + 1) throw RangeError("adapter span does not cover the layer range");
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    if (adapters[i].layer_index != from + i) throw RangeError("adapter span out of layer order");
  }
}

// Causal running mean over positions of each length-`seq` row block.
inline Mat causal_mix(const Mat& h, std::size_t seq) {
  Mat out(h.rows(), h.cols());
  for (std::size_t s0 = 0; s0 < h.rows(); s0 += seq) {
    std::vector<double> acc(h.cols(), 0.0);
    for (std::size_t t = 0; t < seq; ++t) {
      const auto in = h.row(s0 + t);
      auto o = out.row(s0 + t);
      const double inv = 1.0 / static_cast<double>(t + 1);
      for (std::size_t j = 0; j < h.cols(); ++j) {
        acc[j] += in[j];
        o[j] = acc[j] * inv;
      }
    }
  }
  return out;
}

// Transpose of causal_mix: g_s = Σ_{t≥s} g'_t / (t+1).
inline Mat causal_mix_backward(const Mat& g, std::size_t seq) {
  Mat out(g.rows(), g.cols());
  for (std::size_t s0 = 0; s0 < g.rows(); s0 += seq) {
    std::vector<double> acc(g.cols(), 0.0);
    for (std::size_t t = seq; t-- > 0;) {
      const auto in = g.row(s0 + t);
      auto o = out.row(s0 + t);
      const double inv = 1.0 / static_cast<double>(t + 1);
      for (std::size_t j = 0; j < g.cols(); ++j) {
        acc[j] += in[j] * inv;
        o[j] = acc[j];
      }
    }
  }
  return out;
}

inline ForwardResult forward_blocks(const FrozenBase& base, std::span<const LoraAdapter> adapters,
                                    Mat h, std::size_t from, std::size_t to) {
  const ModelConfig& cfg = base.cfg;
  if (h.cols() != cfg.dim || h.rows() == 0 || h.rows() % cfg.seq_len != 0) {
    throw DimensionError("forward: activations " + shape_str(h) + " incompatible with dim " +
                         std::to_string(cfg.dim) + ", seq_len " + std::to_string(cfg.seq_len));
  }
  ForwardResult res;
  res.cache.from = from;
  res.cache.to = to;
  for (std::size_t p = from; p <= to; ++p) {
    const LoraAdapter& ad = adapters[p - from];
    check_adapter(ad, "forward");
    Mat mixed = cfg.mixer ? causal_mix(h, cfg.seq_len) : std::move(h);
    Mat z = matmul(mixed, base.blocks[p - 1]);
    const Mat low = matmul(matmul(mixed, ad.a), ad.b);
    axpy(z, 1.0, low);
    h = mixed;
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += std::tanh(z.data()[i]);
    res.cache.mixed.push_back(std::move(mixed));
    res.cache.pre.push_back(std::move(z));
  }
  res.output = (to == cfg.layers) ? matmul_nt(h, base.embedding) : std::move(h);
  return res;
}

}  // namespace detail

inline Mat embed(const FrozenBase& base, std::span<const std::uint32_t> tokens) {
  const ModelConfig& cfg = base.cfg;
  Mat h(tokens.size(), cfg.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= cfg.vocab) throw DataError("token id " + std::to_string(tokens[i]) + " >= vocab");
    const auto e = base.embedding.row(tokens[i]);
    std::copy(e.begin(), e.end(), h.row(i).begin());
  }
  return h;
}

/// Forward from token ids; the range must start at layer 1.
inline ForwardResult forward(const FrozenBase& base, std::span<const LoraAdapter> adapters,
                             std::span<const std::uint32_t> tokens, std::size_t from, std::size_t to) {
  detail::check_range(base.cfg, from, to);
  if (from != 1) throw RangeError("forward: token input requires from_layer = 1");
  detail::check_adapters(adapters, from, to);
  return detail::forward_blocks(base, adapters, embed(base, tokens), from, to);
}

/// Forward from activations entering layer `from` (rows = n·seq_len).
inline ForwardResult forward(const FrozenBase& base, std::span<const LoraAdapter> adapters,
                             const Mat& activations, std::size_t from, std::size_t to) {
  detail::check_range(base.cfg, from, to);
  detail::check_adapters(adapters, from, to);
  return detail::forward_blocks(base, adapters, activations, from, to);
}

inline ForwardResult forward(const SplitModel& model, std::span<const std::uint32_t> tokens,
                             std::size_t from, std::size_t to) {
  detail::check_range(model.config(), from, to);
  return forward(*model.base, model.span(from, to), tokens, from, to);
}

inline ForwardResult forward(const SplitModel& model, const Mat& activations, std::size_t from,
                             std::size_t to) {
  detail::check_range(model.config(), from, to);
  return forward(*model.base, model.span(from, to), activations, from, to);
}

/// Mean cross-entropy over all rows and its gradient softmax − onehot,
/// scaled by 1/rows.
inline LossGrad loss_and_head_grad(const Mat& logits, std::span<const std::uint32_t> targets) {
  if (targets.size() != logits.rows()) throw DimensionError("loss: target count != logits rows");
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  LossGrad out{0.0, Mat(n, v)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v) throw DataError("loss: target id " + std::to_string(targets[i]) + " >= vocab");
    const auto row = logits.row(i);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    out.loss += lse - row[targets[i]];
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < v; ++j) g[j] = std::exp(row[j] - lse) * inv_n;
    g[targets[i]] -= inv_n;
  }
  out.loss *= inv_n;
  return out;
}

/// Reverse-mode pass over [from, to]. `upstream` is ∂L/∂logits when the
/// range ends at layer M and ∂L/∂(output activations) otherwise.
inline BackwardResult backward(const FrozenBase& base, std::span<const LoraAdapter> adapters,
                               const ActivationCache& cache, const Mat& upstream, std::size_t from,
                               std::size_t to) {
  const ModelConfig& cfg = base.cfg;
  detail::check_range(cfg, from, to);
  detail::check_adapters(adapters, from, to);
  if (cache.from != from || cache.to != to || cache.mixed.size() != to - from + 1) {
    throw RangeError("backward: cache covers [" + std::to_string(cache.from) + ", " +
                     std::to_string(cache.to) + "], asked for [" + std::to_string(from) + ", " +
                     std::to_string(to) + "]");
  }
  const std::size_t rows = cache.mixed.front().rows();
  Mat g;
  if (to == cfg.layers) {
    if (upstream.rows() != rows || upstream.cols() != cfg.vocab) {
      throw DimensionError("backward: upstream " + shape_str(upstream) + " vs logits");
    }
    g = matmul(upstream, base.embedding);
  } else {
    if (upstream.rows() != rows || upstream.cols() != cfg.dim) {
      throw DimensionError("backward: upstream " + shape_str(upstream) + " vs activations");
    }
    g = upstream;
  }

  BackwardResult res;
  res.grads.resize(to - from + 1);
  for (std::size_t p = to; p >= from; --p) {
    const std::size_t i = p - from;
    const LoraAdapter& ad = adapters[i];
    const Mat& mixed = cache.mixed[i];
    const Mat& z = cache.pre[i];
    Mat gz(z.rows(), z.cols());
    for (std::size_t e = 0; e < z.size(); ++e) {
      const double t = std::tanh(z.data()[e]);
      gz.data()[e] = g.data()[e] * (1.0 - t * t);
    }
    res.grads[i] = grad_adapters(mixed, gz, ad);
    // ∂L/∂h' = g + gz·(W0 + a·b)ᵀ
    axpy(g, 1.0, matmul_nt(gz, base.blocks[p - 1]));
    axpy(g, 1.0, matmul_nt(matmul_nt(gz, ad.b), ad.a));
    if (cfg.mixer) g = detail::causal_mix_backward(g, cfg.seq_len);
    if (p == from) break;
  }
  res.input_grad = std::move(g);
  return res;
}

inline BackwardResult backward(const SplitModel& model, const ActivationCache& cache,
                               const Mat& upstream, std::size_t from, std::size_t to) {
  detail::check_range(model.config(), from, to);
  return backward(*model.base, model.span(from, to), cache, upstream, from, to);
}

}  // namespace splitft
