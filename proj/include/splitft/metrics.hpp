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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "splitft/lora.hpp"
#include "splitft/model.hpp"

namespace splitft {

enum class ExecutionMode { kSequential, kParallel };

inline double perplexity(double mean_nll) { return std::exp(mean_nll); }

/// Fraction of rows whose argmax (lowest id on ties) equals the target.
inline double next_token_accuracy(const Mat& logits, std::span<const std::uint32_t> targets) {
  if (targets.size() != logits.rows()) throw DimensionError("accuracy: target count != logits rows");
  if (logits.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == targets[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

/// Declared compute and link speeds used to simulate round time.
struct CostModel {
  std::vector<double> client_seconds_per_layer_token;  // empty or too short: default_client
  double default_client = 1e-6;
  double server_seconds_per_layer_token = 1e-7;
  double bandwidth_bytes_per_second = 1.25e6;

  double client_speed(std::size_t i) const {
    return i < client_seconds_per_layer_token.size() ? client_seconds_per_layer_token[i] : default_client;
  }

  void validate() const {
    auto bad = [](double v) { return !(v >= 0.0) || !std::isfinite(v); };
    if (bad(default_client) || bad(server_seconds_per_layer_token)) throw ConfigError("cost: speeds must be >= 0");
    for (double s : client_seconds_per_layer_token)
      if (bad(s)) throw ConfigError("cost: speeds must be >= 0");
    if (!(bandwidth_bytes_per_second > 0.0)) throw ConfigError("cost: bandwidth must be > 0");
  }
};

struct RoundTime {
  double client_compute = 0.0;
  double server_compute = 0.0;
  double comm = 0.0;
  double total = 0.0;
};

/// Forward plus backward costs 2 passes per layer-token. Sequential rounds
/// add every client's term; parallel rounds wait for the slowest client.
/// The server processes every client's remaining layers either way.
inline RoundTime sim_round_time(const CostModel& cost, std::span<const std::size_t> client_layers,
                                std::size_t total_layers, std::size_t tokens_per_client, std::uint64_t bytes,
                                ExecutionMode mode) {
  RoundTime t;
  const double tokens = static_cast<double>(tokens_per_client);
  for (std::size_t i = 0; i < client_layers.size(); ++i) {
    const double client = cost.client_speed(i) * static_cast<double>(client_layers[i]) * tokens * 2.0;
    t.client_compute = mode == ExecutionMode::kSequential ? t.client_compute + client : std::max(t.client_compute, client);
    t.server_compute +=
        cost.server_seconds_per_layer_token * static_cast<double>(total_layers - client_layers[i]) * tokens * 2.0;
  }
  t.comm = static_cast<double>(bytes) / cost.bandwidth_bytes_per_second;
  t.total = t.client_compute + t.server_compute + t.comm;
  return t;
}

/// Σ over layers of d·r_p + r_p·d.
inline std::size_t trainable_param_total(const ModelConfig& cfg, const RankPlan& plan) {
  if (plan.ranks.size() != cfg.layers) throw DimensionError("trainable_param_total: plan length != layers");
  std::size_t total = 0;
  for (std::size_t r : plan.ranks) total += trainable_params(cfg.dim, cfg.dim, r);
  return total;
}

// ---------------------------------------------------------------------------

struct ClientMetrics {
  std::uint32_t client_id = 0;
  std::size_t layers = 0;
  double loss = 0.0;
  double perplexity = 0.0;
  double accuracy = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t cum_bytes = 0;  // this client's up + down since round 1
  double sim_time = 0.0;        // this client's compute + own traffic
};

struct RoundMetrics {
  std::uint32_t round = 0;
  std::vector<ClientMetrics> clients;
  double mean_loss = 0.0;
  double perplexity = 0.0;  // exp(mean_loss)
  double acc_avg = 0.0;
  std::size_t total_layers = 0;  // Σ l_c
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t cum_bytes = 0;
  std::uint64_t smashed_bytes = 0;  // SmashedData + SmashedGrad this round
  std::uint64_t adapter_bytes = 0;  // AdapterDelta + AggregatedAdapters + LayerAssignment
  double sim_round_time = 0.0;
  double wall_seconds = 0.0;  // informational, never written to CSV
};

inline constexpr const char* kCsvHeader =
    "round,client_id,layers,loss,perplexity,accuracy,bytes_up,bytes_down,cum_bytes,sim_round_time";

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_text(std::span<const RoundMetrics> rounds) {
  std::ostringstream out;
  out << kCsvHeader << '\n';
  for (const auto& r : rounds) {
    for (const auto& c : r.clients) {
      out << r.round << ',' << c.client_id << ',' << c.layers << ',' << format_double(c.loss) << ','
          << format_double(c.perplexity) << ',' << format_double(c.accuracy) << ',' << c.bytes_up << ','
          << c.bytes_down << ',' << c.cum_bytes << ',' << format_double(c.sim_time) << '\n';
    }
    out << r.round << ",global," << r.total_layers << ',' << format_double(r.mean_loss) << ','
        << format_double(r.perplexity) << ',' << format_double(r.acc_avg) << ',' << r.bytes_up << ','
        << r.bytes_down << ',' << r.cum_bytes << ',' << format_double(r.sim_round_time) << '\n';
  }
  return out.str();
}

inline void write_csv(std::span<const RoundMetrics> rounds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << csv_text(rounds);
  if (!out) throw IoError("write failed: " + path);
}

struct CsvRow {
  std::uint32_t round = 0;
  std::string client;  // numeric id or "global"
  std::size_t layers = 0;
  double loss = 0.0;
  double perplexity = 0.0;
  double accuracy = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t cum_bytes = 0;
  double sim_round_time = 0.0;

  bool is_global() const { return client == "global"; }
};

inline std::vector<CsvRow> parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("metrics csv: missing or unexpected header");
  std::vector<CsvRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw DataError("metrics csv line " + std::to_string(line_no) + ": expected 10 fields");
    try {
      std::size_t used = 0;
      auto whole = [&](const std::string& s) {
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      auto real = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      CsvRow r;
      r.round = static_cast<std::uint32_t>(whole(f[0]));
      r.client = f[1];
      if (!r.is_global()) whole(f[1]);
      r.layers = static_cast<std::size_t>(whole(f[2]));
      r.loss = real(f[3]);
      r.perplexity = real(f[4]);
      r.accuracy = real(f[5]);
      r.bytes_up = whole(f[6]);
      r.bytes_down = whole(f[7]);
      r.cum_bytes = whole(f[8]);
      r.sim_round_time = real(f[9]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("metrics csv line " + std::to_string(line_no) + ": malformed field");
    }
  }
  return rows;
}

inline std::vector<CsvRow> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return parse_csv(in);
}

}  // namespace splitft
