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

// Federated split fine-tuning: the client, main server and FedAvg server
// state machines, and the global-round driver that wires them together over
// counted channels.
//
// One global round, per active client in ascending id:
//   local_steps × { client forward → SmashedData → server forward, loss,
//                   backward, server SGD → SmashedGrad → client backward, SGD }
// then
//   AdapterDelta (client → FedAvg), layer-wise FedAvg,
//   AggregatedAdapters (FedAvg → client; the FedAvg server is co-located
//   with the main server, which applies the same aggregate to the base),
//   evaluation of the updated base on every client's shard, layer
//   reallocation and cut migration, LayerAssignment (server → client).

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "splitft/aggregate.hpp"
#include "splitft/allocate.hpp"
#include "splitft/config.hpp"
#include "splitft/lora.hpp"
#include "splitft/metrics.hpp"
#include "splitft/model.hpp"
#include "splitft/partition.hpp"
#include "splitft/transport.hpp"

namespace splitft {

struct TokenBatch {
  std::size_t samples = 0;
  std::vector<std::uint32_t> inputs;   // samples·seq_len, sample-major
  std::vector<std::uint32_t> targets;  // inputs shifted by one token
};

/// Windows of seq_len input tokens plus the following token as target.
inline TokenBatch window_batch(const Corpus& corpus, std::span<const std::size_t> sample_ids,
                               std::span<const std::size_t> offsets, std::size_t seq_len) {
  TokenBatch b;
  b.samples = sample_ids.size();
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    const auto& s = corpus.samples.at(sample_ids[i]);
    if (offsets[i] + seq_len + 1 > s.size()) {
      throw DataError("sample " + std::to_string(sample_ids[i]) + " too short for a window at offset " +
                      std::to_string(offsets[i]));
    }
    b.inputs.insert(b.inputs.end(), s.begin() + offsets[i], s.begin() + offsets[i] + seq_len);
    b.targets.insert(b.targets.end(), s.begin() + offsets[i] + 1, s.begin() + offsets[i] + seq_len + 1);
  }
  return b;
}

/// The first window of every listed sample; used for evaluation.
inline TokenBatch eval_batch(const Corpus& corpus, std::span<const std::size_t> sample_ids, std::size_t seq_len) {
  const std::vector<std::size_t> zeros(sample_ids.size(), 0);
  return window_batch(corpus, sample_ids, zeros, seq_len);
}

/// Mini-batches drawn uniformly with replacement from a shard, each sample
/// at a uniform window offset.
class BatchSampler {
 public:
  BatchSampler(const Corpus* corpus, std::vector<std::size_t> indices, std::size_t batch, std::size_t seq_len,
               std::uint64_t seed)
      : corpus_(corpus), indices_(std::move(indices)), batch_(batch), seq_len_(seq_len), rng_(seed) {}

  TokenBatch next() {
    if (indices_.empty()) throw DataError("batch sampler: empty shard");
    std::vector<std::size_t> ids(batch_);
    std::vector<std::size_t> offsets(batch_);
    for (std::size_t i = 0; i < batch_; ++i) {
      ids[i] = indices_[rng_.below(indices_.size())];
      const std::size_t len = corpus_->samples[ids[i]].size();
      offsets[i] = static_cast<std::size_t>(rng_.below(len - seq_len_));
    }
    return window_batch(*corpus_, ids, offsets, seq_len_);
  }

 private:
  const Corpus* corpus_;
  std::vector<std::size_t> indices_;
  std::size_t batch_;
  std::size_t seq_len_;
  Rng rng_;
};

struct TraceEvent {
  std::uint32_t round = 0;
  std::string direction;  // e.g. "client0->server"
  MsgType type{};
  std::size_t bytes = 0;
};

/// "round,direction,type,bytes"
inline std::string trace_line(const TraceEvent& e) {
  return std::to_string(e.round) + "," + e.direction + "," + std::string(type_name(e.type)) + "," +
         std::to_string(e.bytes);
}

// ---------------------------------------------------------------------------

/// Holds adapters for layers 1..depth and trains them against the server.
class Client {
 public:
  Client(std::uint32_t id, std::shared_ptr<const FrozenBase> base, std::vector<LoraAdapter> adapters,
         std::size_t data_size, double lr, std::optional<BatchSampler> sampler)
      : id_(id),
        base_(std::move(base)),
        adapters_(std::move(adapters)),
        snapshot_(adapters_),
        data_size_(data_size),
        lr_(lr),
        sampler_(std::move(sampler)) {
    check_span(adapters_);
  }

  std::uint32_t id() const { return id_; }
  std::size_t depth() const { return adapters_.size(); }
  std::size_t data_size() const { return data_size_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  bool has_pending() const { return pending_.has_value(); }

  TokenBatch next_batch() {
    if (!sampler_ || data_size_ == 0) throw DataError("client " + std::to_string(id_) + ": empty shard");
    return sampler_->next();
  }

  /// Forward over layers 1..depth; the output is the smashed data.
  SmashedData forward_step(const TokenBatch& batch, std::uint32_t round) {
    if (data_size_ == 0) throw DataError("client " + std::to_string(id_) + ": empty shard");
    if (pending_) throw ProtocolError("client " + std::to_string(id_) + ": forward with a step still pending");
    if (round < last_round_) throw ProtocolError("client " + std::to_string(id_) + ": round went backwards");
    ForwardResult fwd = forward(*base_, adapters_, batch.inputs, 1, depth());
    pending_ = Pending{round, std::move(fwd.cache)};
    last_round_ = round;
    return {id_, round, std::move(fwd.output)};
  }

  /// Backward over layers 1..depth with upstream g_φ, then SGD.
  void backward_step(const SmashedGrad& msg) {
    if (msg.client_id != id_) throw ProtocolError("client " + std::to_string(id_) + ": gradient for another client");
    if (!pending_) throw ProtocolError("client " + std::to_string(id_) + ": no pending forward for this gradient");
    if (msg.round != pending_->round) throw ProtocolError("client " + std::to_string(id_) + ": gradient round mismatch");
    const BackwardResult bwd = backward(*base_, adapters_, pending_->cache, msg.grad, 1, depth());
    pending_.reset();
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
      adapters_[i] = sgd_step(std::move(adapters_[i]), bwd.grads[i].ga, bwd.grads[i].gb, lr_);
    }
  }

  /// Changes since the last synchronisation.
  AdapterDeltaSet report() const {
    if (pending_) throw ProtocolError("client " + std::to_string(id_) + ": report with a step pending");
    AdapterDeltaSet out{id_, {}};
    for (std::size_t i = 0; i < adapters_.size(); ++i) out.deltas.push_back(diff(adapters_[i], snapshot_[i]));
    return out;
  }

  /// Rebuilds every held layer as last-synchronised state + aggregate.
  void apply_aggregate(const AggregatedAdapters& msg) {
    std::vector<LoraAdapter> next = snapshot_;
    for (const auto& d : msg.deltas) {
      if (d.layer_index < 1 || d.layer_index > depth()) {
        throw ProtocolError("client " + std::to_string(id_) + ": aggregate for layer it does not hold");
      }
      next[d.layer_index - 1] = apply_delta(std::move(next[d.layer_index - 1]), d);
    }
    adapters_ = std::move(next);
  }

  /// Adopts the new depth. Adapters carried by the message replace local
  /// ones; every other layer of the new span must already be held.
  void apply_assignment(const LayerAssignment& msg, std::size_t total_layers) {
    if (msg.client_id != id_) throw ProtocolError("client " + std::to_string(id_) + ": assignment for another client");
    if (msg.l_new < 1 || msg.l_new >= total_layers) throw ProtocolError("assignment depth out of range");
    std::vector<std::optional<LoraAdapter>> next(msg.l_new);
    for (std::size_t p = 1; p <= std::min<std::size_t>(msg.l_new, depth()); ++p) next[p - 1] = adapters_[p - 1];
    for (const auto& a : msg.adapters) {
      if (a.layer_index < 1 || a.layer_index > msg.l_new) throw ProtocolError("assignment carries adapter outside span");
      check_adapter(a, "apply_assignment");
      next[a.layer_index - 1] = a;
    }
    std::vector<LoraAdapter> adapters;
    for (auto& a : next) {
      if (!a) throw ProtocolError("client " + std::to_string(id_) + ": assignment misses an acquired layer");
      adapters.push_back(std::move(*a));
    }
    adapters_ = std::move(adapters);
    snapshot_ = adapters_;
  }

 private:
  struct Pending {
    std::uint32_t round;
    ActivationCache cache;
  };

  static void check_span(const std::vector<LoraAdapter>& adapters) {
    if (adapters.empty()) throw ConfigError("client needs at least one layer");
    for (std::size_t i = 0; i < adapters.size(); ++i)
      if (adapters[i].layer_index != i + 1) throw ConfigError("client adapters must cover layers 1..l");
  }

  std::uint32_t id_;
  std::shared_ptr<const FrozenBase> base_;
  std::vector<LoraAdapter> adapters_;
  std::vector<LoraAdapter> snapshot_;
  std::size_t data_size_;
  double lr_;
  std::optional<BatchSampler> sampler_;
  std::optional<Pending> pending_;
  std::uint32_t last_round_ = 0;
};

struct ServerStep {
  double loss = 0.0;
  SmashedGrad grad;
};

/// Server half of one step on an all-layer adapter stack: forward over
/// depth+1..M from the smashed data, loss, backward, SGD on those layers.
/// g_φ comes from the same backward pass, i.e. the pre-update weights.
inline ServerStep server_update(const FrozenBase& base, std::vector<LoraAdapter>& adapters, std::size_t depth,
                                const SmashedData& msg, std::span<const std::uint32_t> targets, double lr) {
  const ModelConfig& cfg = base.cfg;
  if (msg.activations.cols() != cfg.dim || msg.activations.rows() != targets.size() || targets.empty() ||
      msg.activations.rows() % cfg.seq_len != 0) {
    throw ProtocolError("server: smashed data " + shape_str(msg.activations) + " does not match " +
                        std::to_string(targets.size()) + " targets of width " + std::to_string(cfg.dim));
  }
  const std::size_t from = depth + 1;
  const std::size_t to = cfg.layers;
  std::span<const LoraAdapter> span = std::span<const LoraAdapter>(adapters).subspan(from - 1, to - from + 1);
  const ForwardResult fwd = forward(base, span, msg.activations, from, to);
  const LossGrad lg = loss_and_head_grad(fwd.output, targets);
  BackwardResult bwd = backward(base, span, fwd.cache, lg.grad, from, to);
  for (std::size_t p = from; p <= to; ++p) {
    const AdapterGrad& g = bwd.grads[p - from];
    adapters[p - 1] = sgd_step(std::move(adapters[p - 1]), g.ga, g.gb, lr);
  }
  return {lg.loss, SmashedGrad{msg.client_id, msg.round, std::move(bwd.input_grad)}};
}

/// Owns the base model (every layer's canonical adapter) and serves layers
/// depth+1..M for each registered client.
class MainServer {
 public:
  MainServer(SplitModel model, double lr) : model_(std::move(model)), lr_(lr) {}

  void set_depth(std::uint32_t client, std::size_t depth) {
    if (depth < 1 || depth >= model_.config().layers) throw RangeError("server: client depth out of range");
    depths_[client] = depth;
  }

  std::size_t depth(std::uint32_t client) const {
    const auto it = depths_.find(client);
    if (it == depths_.end()) throw ProtocolError("server: unknown client " + std::to_string(client));
    return it->second;
  }

  ServerStep step(const SmashedData& msg, std::span<const std::uint32_t> targets) {
    return server_update(*model_.base, model_.adapters, depth(msg.client_id), msg, targets, lr_);
  }

  struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
  };

  /// Full-model evaluation of the current base.
  Evaluation evaluate(const TokenBatch& batch) const {
    const ForwardResult fwd = forward(model_, batch.inputs, 1, model_.config().layers);
    return {loss_and_head_grad(fwd.output, batch.targets).loss, next_token_accuracy(fwd.output, batch.targets)};
  }

  double lr() const { return lr_; }
  SplitModel& model() { return model_; }
  const SplitModel& model() const { return model_; }

 private:
  SplitModel model_;
  double lr_;
  std::map<std::uint32_t, std::size_t> depths_;
};

/// Collects one report per active client and aggregates once all are in.
class FedAvgServer {
 public:
  void expect(std::set<std::uint32_t> active) {
    expected_ = std::move(active);
    reports_.clear();
  }

  void submit(const AdapterDeltaSet& msg, std::size_t data_size) {
    if (!expected_.count(msg.client_id)) throw ProtocolError("fedavg: unexpected client " + std::to_string(msg.client_id));
    if (reports_.count(msg.client_id)) throw ProtocolError("fedavg: duplicate report from " + std::to_string(msg.client_id));
    reports_[msg.client_id] = WeightedDelta{msg.client_id, data_size, msg.deltas};
  }

  std::vector<AdapterDelta> aggregate() {
    for (std::uint32_t id : expected_) {
      if (!reports_.count(id)) throw ProtocolError("fedavg: missing report from client " + std::to_string(id));
    }
    std::vector<WeightedDelta> list;
    for (auto& [id, r] : reports_) list.push_back(std::move(r));
    reports_.clear();
    return fedavg(std::move(list));
  }

 private:
  std::set<std::uint32_t> expected_;
  std::map<std::uint32_t, WeightedDelta> reports_;
};

// ---------------------------------------------------------------------------

struct TrainingResult {
  std::vector<RoundMetrics> rounds;                   // rounds[0] is the untrained model
  std::vector<std::vector<std::size_t>> layer_log;    // depth per client after each round
  std::vector<LoraAdapter> final_adapters;            // base model, layers 1..M
  std::vector<std::uint32_t> active_clients;
  std::vector<TraceEvent> trace;
  std::uint64_t total_frame_bytes = 0;                // Σ over all channel counters
};

inline constexpr std::uint64_t kStreamCorpus = 1;
inline constexpr std::uint64_t kStreamPartition = 2;

/// The synthetic corpus a config describes.
inline Corpus make_corpus(const ExperimentConfig& cfg) {
  return synth_corpus(cfg.model.vocab, cfg.data.n_samples, cfg.data.len_min, cfg.data.len_max,
                      derive_seed(cfg.seed, kStreamCorpus));
}

/// Client shards of `corpus` per the config's partition strategy. IID
/// shards also carry their length-category histogram.
inline std::vector<ClientShard> make_shards(const ExperimentConfig& cfg, const Corpus& corpus) {
  const std::uint64_t seed = derive_seed(cfg.seed, kStreamPartition);
  const Categories categories = bucket_by_length(corpus, cfg.data.k_categories);
  if (cfg.data.partition == PartitionKind::kDirichlet) {
    return dirichlet_partition(categories, cfg.federation.n_clients, cfg.data.alpha, seed);
  }
  std::vector<ClientShard> shards = partition_iid(corpus, cfg.federation.n_clients, seed);
  assign_categories(shards, categories);
  return shards;
}

inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SPLITFT_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = std::min<std::size_t>(n, v);
  }
  return n;
}

class Federation {
 public:
  using BatchObserver = std::function<void(std::uint32_t client, const TokenBatch&)>;

  explicit Federation(const ExperimentConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Corpus corpus = make_corpus(cfg_);
    std::vector<ClientShard> shards = make_shards(cfg_, corpus);
    init(std::move(corpus), std::move(shards));
  }

  Federation(const ExperimentConfig& cfg, Corpus corpus, std::vector<ClientShard> shards) : cfg_(cfg) {
    cfg_.validate();
    init(std::move(corpus), std::move(shards));
  }

  Federation(const Federation&) = delete;
  Federation& operator=(const Federation&) = delete;

  void set_batch_observer(BatchObserver obs) { batch_observer_ = std::move(obs); }

  const ExperimentConfig& config() const { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  const std::vector<ClientShard>& shards() const { return shards_; }
  const MainServer& server() const { return *server_; }
  const Client& client(std::uint32_t id) const { return *clients_.at(id); }
  const std::vector<std::uint32_t>& active_clients() const { return active_; }
  std::vector<std::size_t> depths() const {
    std::vector<std::size_t> d;
    for (const auto& c : clients_) d.push_back(c->depth());
    return d;
  }
  const RankPlan& rank_plan() const { return plan_; }
  std::uint32_t round() const { return round_; }
  const std::vector<TraceEvent>& trace() const { return trace_; }

  std::uint64_t total_frame_bytes() const {
    std::uint64_t t = 0;
    for (const auto& l : links_) t += l->to_server.bytes() + l->from_server.bytes() + l->to_fedavg.bytes() + l->from_fedavg.bytes();
    return t;
  }

  /// Metrics of the untrained model (round 0).
  RoundMetrics initial_metrics() const {
    RoundMetrics m;
    m.round = 0;
    for (std::uint32_t id : active_) {
      const auto ev = server_->evaluate(eval_batches_[id]);
      ClientMetrics c;
      c.client_id = id;
      c.layers = clients_[id]->depth();
      c.loss = ev.loss;
      c.perplexity = perplexity(ev.loss);
      c.accuracy = ev.accuracy;
      m.clients.push_back(c);
    }
    finish_global(m);
    return m;
  }

  /// Runs one global round and returns its metrics.
  RoundMetrics run_round() {
    const auto wall_start = std::chrono::steady_clock::now();
    ++round_;
    round_bytes_.assign(clients_.size(), Traffic{});
    if (cfg_.federation.execution == ExecutionMode::kSequential) {
      local_phase_sequential();
    } else {
      local_phase_parallel();
    }
    const std::vector<std::size_t> depths_used = depths();
    end_of_round();

    RoundMetrics m;
    m.round = round_;
    const std::size_t m_layers = cfg_.model.layers;
    const std::size_t tokens = cfg_.learning.batch * cfg_.model.seq_len * cfg_.federation.local_steps;
    std::vector<std::size_t> active_depths;
    std::uint64_t round_total = 0;
    for (std::uint32_t id : active_) {
      const Traffic& t = round_bytes_[id];
      ClientMetrics c;
      c.client_id = id;
      c.layers = depths_used[id];
      c.loss = evals_[id].loss;
      c.perplexity = perplexity(c.loss);
      c.accuracy = evals_[id].accuracy;
      c.bytes_up = t.up;
      c.bytes_down = t.down;
      cum_client_bytes_[id] += t.up + t.down;
      c.cum_bytes = cum_client_bytes_[id];
      const std::size_t one[] = {depths_used[id]};
      CostModel own = cfg_.cost;
      own.client_seconds_per_layer_token = {cfg_.cost.client_speed(id)};
      c.sim_time = sim_round_time(own, one, m_layers, tokens, t.up + t.down, ExecutionMode::kSequential).total;
      m.clients.push_back(c);
      m.bytes_up += t.up;
      m.bytes_down += t.down;
      m.smashed_bytes += t.smashed;
      m.adapter_bytes += t.adapter;
      round_total += t.up + t.down;
      active_depths.push_back(depths_used[id]);
    }
    cum_bytes_ += round_total;
    finish_global(m);
    m.cum_bytes = cum_bytes_;
    CostModel active_cost = cfg_.cost;
    active_cost.client_seconds_per_layer_token.clear();
    for (std::uint32_t id : active_) active_cost.client_seconds_per_layer_token.push_back(cfg_.cost.client_speed(id));
    m.sim_round_time =
        sim_round_time(active_cost, active_depths, m_layers, tokens, round_total, cfg_.federation.execution).total;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    return m;
  }

  /// Round 0 plus every configured round.
  TrainingResult run() {
    TrainingResult res;
    res.rounds.push_back(initial_metrics());
    res.layer_log.push_back(depths());
    for (std::size_t r = 0; r < cfg_.federation.rounds; ++r) {
      res.rounds.push_back(run_round());
      res.layer_log.push_back(depths());
    }
    res.final_adapters = server_->model().adapters;
    res.active_clients = active_;
    res.trace = trace_;
    res.total_frame_bytes = total_frame_bytes();
    return res;
  }

 private:
  static constexpr std::uint64_t kStreamModel = 3;
  static constexpr std::uint64_t kStreamMigration = 4;
  static constexpr std::uint64_t kStreamSampler = 100;

  struct Links {
    Channel to_server;
    Channel from_server;
    Channel to_fedavg;
    Channel from_fedavg;
    Links(CarrierKind kind, WirePrecision p)
        : to_server(make_carrier(kind), p),
          from_server(make_carrier(kind), p),
          to_fedavg(make_carrier(kind), p),
          from_fedavg(make_carrier(kind), p) {}
  };

  struct Traffic {
    std::uint64_t up = 0;
    std::uint64_t down = 0;
    std::uint64_t smashed = 0;
    std::uint64_t adapter = 0;
    std::vector<TraceEvent> events;
  };

  void init(Corpus corpus, std::vector<ClientShard> shards) {
    corpus_ = std::move(corpus);
    shards_ = std::move(shards);
    const std::size_t n = cfg_.federation.n_clients;
    if (shards_.size() != n) throw ConfigError("federation: shard count != n_clients");
    for (const auto& s : corpus_.samples) {
      if (s.size() < cfg_.model.seq_len + 1) throw DataError("federation: corpus sample shorter than seq_len + 1");
    }

    const std::size_t l_init = cfg_.allocation.l_init;
    std::set<std::size_t> depth_set;
    for (std::uint32_t id = 0; id < n; ++id) {
      if (shards_[id].client_id != id) throw ConfigError("federation: shards must be ordered by client id");
      if (shards_[id].size() > 0) {
        active_.push_back(id);
        depth_set.insert(l_init);
      }
    }
    if (active_.empty()) throw DataError("federation: every shard is empty");
    plan_ = cut_rank_plan(cfg_.model.layers, depth_set, cfg_.ranks.r_cut, cfg_.ranks.r_others);
    SplitModel model = build_model(cfg_.model, derive_seed(cfg_.seed, kStreamModel), plan_);
    auto base = model.base;
    server_ = std::make_unique<MainServer>(std::move(model), cfg_.learning.lr_server);
    migration_rng_ = std::make_unique<Rng>(derive_seed(cfg_.seed, kStreamMigration));

    const WirePrecision precision = cfg_.wire_precision();
    for (std::uint32_t id = 0; id < n; ++id) {
      const auto& shard = shards_[id];
      std::vector<LoraAdapter> span(server_->model().adapters.begin(),
                                    server_->model().adapters.begin() + static_cast<std::ptrdiff_t>(l_init));
      std::optional<BatchSampler> sampler;
      if (shard.size() > 0) {
        sampler.emplace(&corpus_, shard.sample_indices, cfg_.learning.batch, cfg_.model.seq_len,
                        derive_seed(cfg_.seed, kStreamSampler + id));
      }
      clients_.push_back(std::make_unique<Client>(id, base, std::move(span), shard.size(), cfg_.learning.lr_client,
                                                  std::move(sampler)));
      server_->set_depth(id, l_init);
      links_.push_back(std::make_unique<Links>(cfg_.federation.carrier, precision));
      eval_batches_.push_back(shard.size() > 0 ? eval_batch(corpus_, shard.sample_indices, cfg_.model.seq_len)
                                               : TokenBatch{});
    }
    evals_.resize(n);
    cum_client_bytes_.assign(n, 0);
  }

  static std::string client_name(std::uint32_t id) { return "client" + std::to_string(id); }

  // Sends on `ch`, charging the frame to client `id` in the given direction.
  void account(Traffic& t, std::uint32_t id, bool up, std::string_view peer, MsgType type, std::size_t bytes) const {
    (up ? t.up : t.down) += bytes;
    if (type == MsgType::kSmashedData || type == MsgType::kSmashedGrad) {
      t.smashed += bytes;
    } else {
      t.adapter += bytes;
    }
    const std::string dir = up ? client_name(id) + "->" + std::string(peer) : std::string(peer) + "->" + client_name(id);
    t.events.push_back({round_, dir, type, bytes});
  }

  template <typename T>
  T transfer(Channel& ch, const T& msg, Traffic& t, std::uint32_t id, bool up, std::string_view peer) {
    const std::size_t bytes = ch.send(msg);
    account(t, id, up, peer, type_of(ProtocolMessage(std::in_place_type<T>, msg)), bytes);
    ProtocolMessage got = ch.recv();
    if (!std::holds_alternative<T>(got)) throw ProtocolError("unexpected message type on channel");
    return std::get<T>(std::move(got));
  }

  // One client's local steps against the given server adapter stack.
  void local_steps(std::uint32_t id, std::vector<LoraAdapter>& server_adapters, Traffic& t) {
    Client& client = *clients_[id];
    Links& links = *links_[id];
    const FrozenBase& base = *server_->model().base;
    for (std::size_t s = 0; s < cfg_.federation.local_steps; ++s) {
      const TokenBatch batch = client.next_batch();
      if (batch_observer_) batch_observer_(id, batch);
      const SmashedData sent = client.forward_step(batch, round_);
      const SmashedData smashed = transfer(links.to_server, sent, t, id, true, "server");
      ServerStep step = server_update(base, server_adapters, server_->depth(id), smashed, batch.targets, server_->lr());
      const SmashedGrad grad = transfer(links.from_server, step.grad, t, id, false, "server");
      client.backward_step(grad);
    }
  }

  void local_phase_sequential() {
    for (std::uint32_t id : active_) {
      local_steps(id, server_->model().adapters, round_bytes_[id]);
      flush_trace(round_bytes_[id]);
    }
  }

  // Every client trains against its own copy of the round-start server
  // stack; the copies' changes are summed into the base in client order.
  void local_phase_parallel() {
    const std::vector<LoraAdapter> snapshot = server_->model().adapters;
    std::vector<std::vector<LoraAdapter>> copies(clients_.size());
    std::vector<std::exception_ptr> errors(clients_.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t k = next++; k < active_.size(); k = next++) {
        const std::uint32_t id = active_[k];
        try {
          copies[id] = snapshot;
          local_steps(id, copies[id], round_bytes_[id]);
        } catch (...) {
          errors[id] = std::current_exception();
        }
      }
    };
    {
      std::vector<std::jthread> pool;
      const std::size_t threads = std::min(worker_threads(), active_.size());
      for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    for (std::uint32_t id : active_)
      if (errors[id]) std::rethrow_exception(errors[id]);

    auto& adapters = server_->model().adapters;
    for (std::uint32_t id : active_) {
      for (std::size_t p = server_->depth(id) + 1; p <= cfg_.model.layers; ++p) {
        adapters[p - 1] = apply_delta(std::move(adapters[p - 1]), diff(copies[id][p - 1], snapshot[p - 1]));
      }
      flush_trace(round_bytes_[id]);
    }
  }

  void flush_trace(Traffic& t) {
    trace_.insert(trace_.end(), t.events.begin(), t.events.end());
    t.events.clear();
  }

  void end_of_round() {
    // Adapter deltas to the FedAvg server.
    FedAvgServer fedavg;
    fedavg.expect(std::set<std::uint32_t>(active_.begin(), active_.end()));
    for (std::uint32_t id : active_) {
      const AdapterDeltaSet report = transfer(links_[id]->to_fedavg, clients_[id]->report(), round_bytes_[id], id, true, "fedavg");
      fedavg.submit(report, clients_[id]->data_size());
    }
    const std::vector<AdapterDelta> aggregated = fedavg.aggregate();

    // Aggregate back to each client for its own layers. The base receives
    // the same values the wire delivers.
    const WirePrecision precision = cfg_.wire_precision();
    for (std::uint32_t id : active_) {
      AggregatedAdapters mine;
      for (const auto& d : aggregated)
        if (d.layer_index <= clients_[id]->depth()) mine.deltas.push_back(d);
      clients_[id]->apply_aggregate(transfer(links_[id]->from_fedavg, mine, round_bytes_[id], id, false, "fedavg"));
    }
    apply_to_base(server_->model().adapters, over_wire(AggregatedAdapters{aggregated}, precision).deltas);

    // Evaluate the updated base on every client's shard.
    std::vector<double> accs;
    for (std::uint32_t id : active_) {
      const auto ev = server_->evaluate(eval_batches_[id]);
      evals_[id] = ev;
      accs.push_back(ev.accuracy);
    }

    // Reallocate depths and migrate cut ranks.
    AllocationState state;
    state.gamma = cfg_.allocation.gamma;
    state.l_min = cfg_.allocation.l_min;
    state.l_max = cfg_.l_max();
    state.r_cut = cfg_.ranks.r_cut;
    state.r_others = cfg_.ranks.r_others;
    for (std::uint32_t id : active_) state.layers.push_back(clients_[id]->depth());
    const std::vector<std::size_t> new_depths = reallocate(state, accs);
    std::set<std::size_t> depth_set(new_depths.begin(), new_depths.end());
    const RankPlan new_plan = cut_rank_plan(cfg_.model.layers, depth_set, cfg_.ranks.r_cut, cfg_.ranks.r_others);
    std::vector<MigrationAction> actions;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      auto a = migrate_cut(state.layers[k], new_depths[k], plan_, new_plan);
      actions.insert(actions.end(), a.begin(), a.end());
    }
    apply_migration(server_->model().adapters, actions, cfg_.allocation.resize_policy, *migration_rng_);
    plan_ = new_plan;

    // Layer assignments carry whatever the client cannot derive itself.
    const auto& base_adapters = server_->model().adapters;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      const std::uint32_t id = active_[k];
      Client& client = *clients_[id];
      LayerAssignment la{id, static_cast<std::uint32_t>(new_depths[k]), {}};
      for (std::size_t p = 1; p <= new_depths[k]; ++p) {
        if (p > client.depth() || !(client.adapters()[p - 1] == base_adapters[p - 1])) {
          la.adapters.push_back(base_adapters[p - 1]);
        }
      }
      const LayerAssignment got = transfer(links_[id]->from_server, la, round_bytes_[id], id, false, "server");
      client.apply_assignment(got, cfg_.model.layers);
      server_->set_depth(id, new_depths[k]);
    }
    for (std::uint32_t id : active_) flush_trace(round_bytes_[id]);
  }

  void finish_global(RoundMetrics& m) const {
    std::vector<double> losses;
    std::vector<double> accs;
    for (const auto& c : m.clients) {
      losses.push_back(c.loss);
      accs.push_back(c.accuracy);
      m.total_layers += c.layers;
    }
    m.mean_loss = mean(losses);
    m.perplexity = perplexity(m.mean_loss);
    m.acc_avg = mean(accs);
  }

  ExperimentConfig cfg_;
  Corpus corpus_;
  std::vector<ClientShard> shards_;
  std::vector<std::uint32_t> active_;
  RankPlan plan_;
  std::unique_ptr<MainServer> server_;
  std::unique_ptr<Rng> migration_rng_;
  std::vector<std::unique_ptr<Client>> clients_;
  std::vector<std::unique_ptr<Links>> links_;
  std::vector<TokenBatch> eval_batches_;
  std::vector<MainServer::Evaluation> evals_;
  std::vector<Traffic> round_bytes_;
  std::vector<std::uint64_t> cum_client_bytes_;
  std::uint64_t cum_bytes_ = 0;
  std::vector<TraceEvent> trace_;
  std::uint32_t round_ = 0;
  BatchObserver batch_observer_;
};

inline TrainingResult run_training(const ExperimentConfig& cfg) {
  Federation fed(cfg);
  return fed.run();
}

}  // namespace splitft
