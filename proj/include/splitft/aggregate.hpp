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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "splitft/lora.hpp"

namespace splitft {

/// One client's report: its adapter deltas and local data size.
struct WeightedDelta {
  std::uint32_t client_id = 0;
  std::size_t data_size = 0;
  std::vector<AdapterDelta> deltas;
};

/// Data-size weighted average of adapter deltas, layer by layer. Layer p
/// averages over the clients holding p with weights renormalised over that
/// subset, which is plain FedAvg when all depths agree. Sums run in
/// ascending client id so the result does not depend on report order.
/// Returns one delta per covered layer, ascending layer.
inline std::vector<AdapterDelta> fedavg(std::vector<WeightedDelta> reports) {
  std::sort(reports.begin(), reports.end(),
            [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  std::map<std::size_t, std::vector<std::pair<const WeightedDelta*, const AdapterDelta*>>> holders;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (i > 0 && reports[i - 1].client_id == r.client_id) {
      throw ProtocolError("fedavg: duplicate report from client " + std::to_string(r.client_id));
    }
    if (r.data_size < 1) throw DataError("fedavg: client " + std::to_string(r.client_id) + " has no data");
    std::set<std::size_t> seen;
    for (const auto& d : r.deltas) {
      if (!seen.insert(d.layer_index).second) {
        throw ProtocolError("fedavg: client " + std::to_string(r.client_id) + " reported layer " +
                            std::to_string(d.layer_index) + " twice");
      }
      holders[d.layer_index].emplace_back(&r, &d);
    }
  }

  std::vector<AdapterDelta> out;
  for (const auto& [layer, list] : holders) {
    double total = 0.0;
    for (const auto& [rep, d] : list) total += static_cast<double>(rep->data_size);
    const AdapterDelta& first = *list.front().second;
    for (const auto& [rep, d] : list) {
      if (d->rank != first.rank || !d->da.same_shape(first.da) || !d->db.same_shape(first.db)) {
        throw RankMismatchError("fedavg: layer " + std::to_string(layer) + " shapes differ across clients");
      }
    }
    const double w0 = static_cast<double>(list.front().first->data_size) / total;
    AdapterDelta agg{layer, scale(first.da, w0), scale(first.db, w0), first.rank};
    for (std::size_t i = 1; i < list.size(); ++i) {
      const double w = static_cast<double>(list[i].first->data_size) / total;
      axpy(agg.da, w, list[i].second->da);
      axpy(agg.db, w, list[i].second->db);
    }
    out.push_back(std::move(agg));
  }
  return out;
}

/// Adds aggregated deltas to the canonical adapters (adapters[p-1] is
/// layer p). Layers without a delta are untouched.
inline void apply_to_base(std::vector<LoraAdapter>& adapters, const std::vector<AdapterDelta>& aggregated) {
  for (const auto& d : aggregated) {
    if (d.layer_index < 1 || d.layer_index > adapters.size()) {
      throw RangeError("apply_to_base: layer " + std::to_string(d.layer_index) + " out of range");
    }
    adapters[d.layer_index - 1] = apply_delta(std::move(adapters[d.layer_index - 1]), d);
  }
}

}  // namespace splitft
