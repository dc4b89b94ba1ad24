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

// Accuracy-driven per-client layer allocation and the adapter bookkeeping
// needed when a client's cut moves.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "splitft/lora.hpp"
#include "splitft/model.hpp"

namespace splitft {

struct AllocationState {
  std::vector<std::size_t> layers;  // l_c per client
  double gamma = 0.5;
  std::size_t l_min = 1;
  std::size_t l_max = 1;
  std::size_t r_cut = 8;
  std::size_t r_others = 16;

  void validate(std::size_t total_layers) const {
    if (l_min < 1) throw ConfigError("allocation: l_min must be >= 1");
    if (l_max > total_layers - 1) throw ConfigError("allocation: l_max must be <= M-1");
    if (l_min > l_max) throw ConfigError("allocation: l_min > l_max");
    if (!(gamma >= 0.0)) throw ConfigError("allocation: gamma must be >= 0");
    for (std::size_t l : layers)
      if (l < l_min || l > l_max) throw ConfigError("allocation: layer count outside bounds");
  }
};

/// w_i = 1 + γ·(acc_i − acc_avg). Above-average clients get w > 1,
/// below-average ones w < 1.
constexpr double client_weight(double acc_i, double acc_avg, double gamma) {
  return 1.0 + gamma * (acc_i - acc_avg);
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// l_new = clamp(round(w_i·l_i), l_min, l_max), rounding half away from zero.
inline std::vector<std::size_t> reallocate(const AllocationState& state, std::span<const double> accs) {
  if (accs.size() != state.layers.size()) {
    throw DimensionError("reallocate: " + std::to_string(accs.size()) + " accuracies for " +
                         std::to_string(state.layers.size()) + " clients");
  }
  const double avg = mean(accs);
  std::vector<std::size_t> out(accs.size());
  for (std::size_t i = 0; i < accs.size(); ++i) {
    const double w = client_weight(accs[i], avg, state.gamma);
    const double scaled = std::round(w * static_cast<double>(state.layers[i]));
    const double clamped = std::clamp(scaled, static_cast<double>(state.l_min), static_cast<double>(state.l_max));
    out[i] = static_cast<std::size_t>(clamped);
  }
  return out;
}

struct MigrationAction {
  enum class Kind { kToClient, kToServer, kResize };
  Kind kind;
  std::size_t layer;
  std::size_t old_rank = 0;
  std::size_t new_rank = 0;

  friend bool operator==(const MigrationAction&, const MigrationAction&) = default;
};

/// Actions implied by one client's cut moving from old_l to new_l: layers
/// that change side, then rank changes at the old and new cut pairs where the
/// plans disagree. Canonical adapters stay in the base model; only their
/// ownership and, at the cut, their rank change.
inline std::vector<MigrationAction> migrate_cut(std::size_t old_l, std::size_t new_l,
                                                const RankPlan& old_plan, const RankPlan& new_plan) {
  const std::size_t m = old_plan.ranks.size();
  if (new_plan.ranks.size() != m) throw DimensionError("migrate_cut: plan lengths differ");
  if (old_l < 1 || old_l >= m || new_l < 1 || new_l >= m) throw RangeError("migrate_cut: depth out of range");
  std::vector<MigrationAction> actions;
  if (old_l == new_l) return actions;
  for (std::size_t p = std::min(old_l, new_l) + 1; p <= std::max(old_l, new_l); ++p) {
    actions.push_back({new_l > old_l ? MigrationAction::Kind::kToClient : MigrationAction::Kind::kToServer, p,
                       old_plan.at(p), new_plan.at(p)});
  }
  std::vector<std::size_t> touched{old_l, old_l + 1, new_l, new_l + 1};
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  for (std::size_t p : touched) {
    if (old_plan.at(p) != new_plan.at(p)) {
      actions.push_back({MigrationAction::Kind::kResize, p, old_plan.at(p), new_plan.at(p)});
    }
  }
  return actions;
}

/// Executes the resize actions on canonical adapters (adapters[p-1] is
/// layer p). Adapters already at the target rank are left alone, so
/// overlapping actions from several clients apply once. Returns the number
/// of adapters resized.
inline std::size_t apply_migration(std::vector<LoraAdapter>& adapters, const std::vector<MigrationAction>& actions,
                                   ResizePolicy policy, Rng& rng) {
  std::size_t resized = 0;
  for (const auto& act : actions) {
    if (act.kind != MigrationAction::Kind::kResize) continue;
    LoraAdapter& ad = adapters.at(act.layer - 1);
    if (ad.rank == act.new_rank) continue;
    ad = resize_rank(ad, act.new_rank, policy, rng);
    ++resized;
  }
  return resized;
}

}  // namespace splitft
