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

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "splitft/lora.hpp"
#include "splitft/metrics.hpp"
#include "splitft/model.hpp"
#include "splitft/transport.hpp"

namespace splitft {

enum class PartitionKind { kIid, kDirichlet };

struct DataConfig {
  std::size_t n_samples = 1000;
  std::size_t len_min = 9;
  std::size_t len_max = 64;
  PartitionKind partition = PartitionKind::kIid;
  double alpha = 0.5;
  std::size_t k_categories = 8;
};

struct FederationConfig {
  std::size_t n_clients = 5;
  std::size_t rounds = 100;
  std::size_t local_steps = 1;
  ExecutionMode execution = ExecutionMode::kSequential;
  CarrierKind carrier = CarrierKind::kMemory;
  bool lossless_wire = false;
  bool trace = false;
};

struct RankConfig {
  std::size_t r_cut = 8;
  std::size_t r_others = 16;
};

struct LearningConfig {
  double lr_client = 5e-5;
  double lr_server = 5e-5;
  std::size_t batch = 4;
};

struct AllocationConfig {
  double gamma = 0.5;
  std::size_t l_init = 2;
  std::size_t l_min = 1;
  std::size_t l_max = 0;  // 0 means M-1
  ResizePolicy resize_policy = ResizePolicy::kPadTruncate;
};

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  FederationConfig federation;
  RankConfig ranks;
  LearningConfig learning;
  AllocationConfig allocation;
  CostModel cost;
  std::uint64_t seed = 42;

  std::size_t l_max() const { return allocation.l_max == 0 ? model.layers - 1 : allocation.l_max; }

  WirePrecision wire_precision() const {
    return federation.lossless_wire ? WirePrecision::kFloat64 : WirePrecision::kFloat32;
  }

  void validate() const {
    model.validate();
    if (data.len_min < model.seq_len + 1) {
      throw ConfigError("data.len_min must be >= model.seq_len + 1 so every sample holds a training window");
    }
    if (data.len_max < data.len_min || data.len_max > 512) throw ConfigError("data: length range must lie within [1, 512]");
    if (data.k_categories < 1) throw ConfigError("data.k_categories must be >= 1");
    if (data.partition == PartitionKind::kDirichlet && !(data.alpha > 0.0)) throw ConfigError("data.alpha must be > 0");
    if (federation.n_clients < 1) throw ConfigError("federation.n_clients must be >= 1");
    if (federation.local_steps < 1) throw ConfigError("federation.local_steps must be >= 1");
    if (learning.batch < 1) throw ConfigError("learning.batch must be >= 1");
    if (!(learning.lr_client >= 0.0) || !(learning.lr_server >= 0.0)) throw ConfigError("learning rates must be >= 0");
    for (std::size_t r : {ranks.r_cut, ranks.r_others})
      if (r < 1 || r > model.dim) throw ConfigError("ranks must lie in [1, model.dim]");
    if (allocation.l_min < 1 || l_max() > model.layers - 1 || allocation.l_min > l_max()) {
      throw ConfigError("allocation bounds must satisfy 1 <= l_min <= l_max <= layers-1");
    }
    if (allocation.l_init < allocation.l_min || allocation.l_init > l_max()) {
      throw ConfigError("allocation.l_init outside [l_min, l_max]");
    }
    if (!(allocation.gamma >= 0.0)) throw ConfigError("allocation.gamma must be >= 0");
    cost.validate();
  }
};

namespace detail {

// Rejects keys this version does not know, so typos surface as errors.
inline void check_keys(const nlohmann::json& j, const std::string& section, std::set<std::string> known) {
  if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + section + "." + key + "'");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline std::string to_string(PartitionKind k) { return k == PartitionKind::kIid ? "iid" : "dirichlet"; }
inline std::string to_string(ExecutionMode m) { return m == ExecutionMode::kSequential ? "sequential" : "parallel"; }
inline std::string to_string(CarrierKind c) { return c == CarrierKind::kMemory ? "memory" : "stream"; }
inline std::string to_string(ResizePolicy p) { return p == ResizePolicy::kPadTruncate ? "pad_truncate" : "reinit"; }

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {
      {"seed", c.seed},
      {"model",
       {{"vocab", c.model.vocab},
        {"dim", c.model.dim},
        {"layers", c.model.layers},
        {"seq_len", c.model.seq_len},
        {"mixer", c.model.mixer}}},
      {"data",
       {{"n_samples", c.data.n_samples},
        {"len_min", c.data.len_min},
        {"len_max", c.data.len_max},
        {"partition", to_string(c.data.partition)},
        {"alpha", c.data.alpha},
        {"k_categories", c.data.k_categories}}},
      {"federation",
       {{"n_clients", c.federation.n_clients},
        {"rounds", c.federation.rounds},
        {"local_steps", c.federation.local_steps},
        {"execution", to_string(c.federation.execution)},
        {"carrier", to_string(c.federation.carrier)},
        {"lossless_wire", c.federation.lossless_wire},
        {"trace", c.federation.trace}}},
      {"ranks", {{"r_cut", c.ranks.r_cut}, {"r_others", c.ranks.r_others}}},
      {"learning", {{"lr_client", c.learning.lr_client}, {"lr_server", c.learning.lr_server}, {"batch", c.learning.batch}}},
      {"allocation",
       {{"gamma", c.allocation.gamma},
        {"l_init", c.allocation.l_init},
        {"l_min", c.allocation.l_min},
        {"l_max", c.allocation.l_max},
        {"resize_policy", to_string(c.allocation.resize_policy)}}},
      {"cost",
       {{"client_speeds", c.cost.client_seconds_per_layer_token},
        {"default_client_speed", c.cost.default_client},
        {"server_speed", c.cost.server_seconds_per_layer_token},
        {"bandwidth", c.cost.bandwidth_bytes_per_second}}},
  };
}

/// Missing keys keep their defaults; unknown keys are an error.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read_opt;
  ExperimentConfig c;
  try {
    check_keys(j, "", {"seed", "model", "data", "federation", "ranks", "learning", "allocation", "cost"});
    read_opt(j, "seed", c.seed);
    if (j.contains("model")) {
      const auto& m = j["model"];
      check_keys(m, "model", {"vocab", "dim", "layers", "seq_len", "mixer"});
      read_opt(m, "vocab", c.model.vocab);
      read_opt(m, "dim", c.model.dim);
      read_opt(m, "layers", c.model.layers);
      read_opt(m, "seq_len", c.model.seq_len);
      read_opt(m, "mixer", c.model.mixer);
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      check_keys(d, "data", {"n_samples", "len_min", "len_max", "partition", "alpha", "k_categories"});
      read_opt(d, "n_samples", c.data.n_samples);
      read_opt(d, "len_min", c.data.len_min);
      read_opt(d, "len_max", c.data.len_max);
      read_opt(d, "alpha", c.data.alpha);
      read_opt(d, "k_categories", c.data.k_categories);
      if (d.contains("partition")) {
        const auto p = d["partition"].get<std::string>();
        if (p == "iid") c.data.partition = PartitionKind::kIid;
        else if (p == "dirichlet") c.data.partition = PartitionKind::kDirichlet;
        else throw ConfigError("config: data.partition must be iid or dirichlet");
      }
    }
    if (j.contains("federation")) {
      const auto& f = j["federation"];
      check_keys(f, "federation", {"n_clients", "rounds", "local_steps", "execution", "carrier", "lossless_wire", "trace"});
      read_opt(f, "n_clients", c.federation.n_clients);
      read_opt(f, "rounds", c.federation.rounds);
      read_opt(f, "local_steps", c.federation.local_steps);
      read_opt(f, "lossless_wire", c.federation.lossless_wire);
      read_opt(f, "trace", c.federation.trace);
      if (f.contains("execution")) {
        const auto e = f["execution"].get<std::string>();
        if (e == "sequential") c.federation.execution = ExecutionMode::kSequential;
        else if (e == "parallel") c.federation.execution = ExecutionMode::kParallel;
        else throw ConfigError("config: federation.execution must be sequential or parallel");
      }
      if (f.contains("carrier")) {
        const auto e = f["carrier"].get<std::string>();
        if (e == "memory") c.federation.carrier = CarrierKind::kMemory;
        else if (e == "stream") c.federation.carrier = CarrierKind::kStream;
        else throw ConfigError("config: federation.carrier must be memory or stream");
      }
    }
    if (j.contains("ranks")) {
      const auto& r = j["ranks"];
      check_keys(r, "ranks", {"r_cut", "r_others"});
      read_opt(r, "r_cut", c.ranks.r_cut);
      read_opt(r, "r_others", c.ranks.r_others);
    }
    if (j.contains("learning")) {
      const auto& l = j["learning"];
      check_keys(l, "learning", {"lr_client", "lr_server", "batch"});
      read_opt(l, "lr_client", c.learning.lr_client);
      read_opt(l, "lr_server", c.learning.lr_server);
      read_opt(l, "batch", c.learning.batch);
    }
    if (j.contains("allocation")) {
      const auto& a = j["allocation"];
      check_keys(a, "allocation", {"gamma", "l_init", "l_min", "l_max", "resize_policy"});
      read_opt(a, "gamma", c.allocation.gamma);
      read_opt(a, "l_init", c.allocation.l_init);
      read_opt(a, "l_min", c.allocation.l_min);
      read_opt(a, "l_max", c.allocation.l_max);
      if (a.contains("resize_policy")) {
        const auto p = a["resize_policy"].get<std::string>();
        if (p == "pad_truncate") c.allocation.resize_policy = ResizePolicy::kPadTruncate;
        else if (p == "reinit") c.allocation.resize_policy = ResizePolicy::kReinit;
        else throw ConfigError("config: allocation.resize_policy must be pad_truncate or reinit");
      }
    }
    if (j.contains("cost")) {
      const auto& k = j["cost"];
      check_keys(k, "cost", {"client_speeds", "default_client_speed", "server_speed", "bandwidth"});
      read_opt(k, "client_speeds", c.cost.client_seconds_per_layer_token);
      read_opt(k, "default_client_speed", c.cost.default_client);
      read_opt(k, "server_speed", c.cost.server_seconds_per_layer_token);
      read_opt(k, "bandwidth", c.cost.bandwidth_bytes_per_second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace splitft
