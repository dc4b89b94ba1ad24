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

// Subcommand bodies for the splitft tool. Each takes already-parsed inputs,
// writes its files and returns a value the caller prints.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "splitft/config.hpp"
#include "splitft/metrics.hpp"
#include "splitft/model.hpp"
#include "splitft/partition.hpp"
#include "splitft/protocol.hpp"
#include "splitft/transport.hpp"

namespace splitft {

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// partition

struct PartitionOutcome {
  ShardFile file;
  std::optional<double> heterogeneity;  // needs at least two clients
};

inline PartitionOutcome cmd_partition(const ExperimentConfig& cfg, const std::string& out_path) {
  cfg.validate();
  const Corpus corpus = make_corpus(cfg);
  PartitionOutcome out;
  out.file.shards = make_shards(cfg, corpus);
  if (cfg.data.partition == PartitionKind::kDirichlet) out.file.alpha = cfg.data.alpha;
  out.file.seed = cfg.seed;
  out.file.k_categories = cfg.data.k_categories;
  if (out.file.shards.size() >= 2) out.heterogeneity = heterogeneity(out.file.shards);
  write_shard_file(out.file, out_path);
  return out;
}

// ---------------------------------------------------------------------------
// train

// Adapter snapshot: "SFTA", precision byte, u32 count, then per adapter
// layer u32, a, b (wire matrices), rank u32.
inline constexpr std::uint8_t kAdapterMagic[4] = {0x53, 0x46, 0x54, 0x41};

inline std::vector<std::uint8_t> encode_adapters(const std::vector<LoraAdapter>& adapters, WirePrecision precision) {
  detail::Writer w(precision);
  w.size(adapters.size());
  for (const auto& a : adapters) w.adapter(a);
  std::vector<std::uint8_t> out(kAdapterMagic, kAdapterMagic + 4);
  out.push_back(static_cast<std::uint8_t>(precision));
  out.insert(out.end(), w.bytes().begin(), w.bytes().end());
  return out;
}

inline std::vector<LoraAdapter> decode_adapters(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || !std::equal(kAdapterMagic, kAdapterMagic + 4, bytes.begin())) {
    throw CodecError("adapter file: bad magic");
  }
  if (bytes[4] != 1 && bytes[4] != 2) throw CodecError("adapter file: unknown precision");
  detail::Reader r(bytes.subspan(5), static_cast<WirePrecision>(bytes[4]));
  auto adapters = r.list([&] { return r.adapter(); });
  if (!r.done()) throw CodecError("adapter file: trailing bytes");
  return adapters;
}

inline std::vector<LoraAdapter> read_adapters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_adapters(bytes);
}

/// "round,client_id,layers" for every active client after every round.
inline std::string layer_log_text(const TrainingResult& res) {
  std::string out = "round,client_id,layers\n";
  for (std::size_t r = 0; r < res.layer_log.size(); ++r) {
    for (std::uint32_t id : res.active_clients) {
      out += std::to_string(r) + "," + std::to_string(id) + "," + std::to_string(res.layer_log[r][id]) + "\n";
    }
  }
  return out;
}

inline std::string trace_text(const std::vector<TraceEvent>& trace) {
  std::string out = "round,direction,type,bytes\n";
  for (const auto& e : trace) out += trace_line(e) + "\n";
  return out;
}

/// Writes config.json, metrics.csv, layers.csv, adapters.bin and, when
/// tracing, trace.log into out_dir.
inline TrainingResult cmd_train(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const std::filesystem::path dir(out_dir);
  detail::ensure_dir(dir);
  detail::write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  TrainingResult res = run_training(cfg);
  write_csv(res.rounds, (dir / "metrics.csv").string());
  detail::write_text(dir / "layers.csv", layer_log_text(res));
  const auto bin = encode_adapters(res.final_adapters, cfg.wire_precision());
  detail::write_text(dir / "adapters.bin", std::string(bin.begin(), bin.end()));
  if (cfg.federation.trace) detail::write_text(dir / "trace.log", trace_text(res.trace));
  return res;
}

// ---------------------------------------------------------------------------
// report

struct ReportSummary {
  std::size_t rounds = 0;  // global rows
  std::optional<double> max_accuracy;
  std::optional<double> final_perplexity;
  std::optional<double> total_comm_mb;
  std::optional<double> mean_sim_round_time;  // rounds >= 1
  bool layers_constant = true;
};

inline ReportSummary summarize(const std::vector<CsvRow>& rows) {
  ReportSummary s;
  std::map<std::string, std::size_t> first_layers;
  double sim_sum = 0.0;
  std::size_t sim_n = 0;
  for (const auto& r : rows) {
    const auto [it, fresh] = first_layers.emplace(r.client, r.layers);
    if (!fresh && it->second != r.layers) s.layers_constant = false;
    if (!r.is_global()) continue;
    ++s.rounds;
    s.max_accuracy = std::max(s.max_accuracy.value_or(r.accuracy), r.accuracy);
    s.final_perplexity = r.perplexity;
    s.total_comm_mb = static_cast<double>(r.cum_bytes) / 1e6;
    if (r.round >= 1) {
      sim_sum += r.sim_round_time;
      ++sim_n;
    }
  }
  if (sim_n > 0) s.mean_sim_round_time = sim_sum / static_cast<double>(sim_n);
  return s;
}

inline void print_summary(std::ostream& out, const ReportSummary& s) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("n/a"); };
  out << "rounds: " << s.rounds << "\n"
      << "max_accuracy: " << opt(s.max_accuracy) << "\n"
      << "final_perplexity: " << opt(s.final_perplexity) << "\n"
      << "total_comm_mb: " << opt(s.total_comm_mb) << "\n"
      << "mean_sim_round_time: " << opt(s.mean_sim_round_time) << "\n"
      << "layers_constant: " << (s.layers_constant ? "yes" : "no") << "\n";
}

inline const std::vector<std::string>& series_names() {
  static const std::vector<std::string> names = {"loss",     "perplexity", "accuracy",
                                                  "layers",   "cum_bytes",  "sim_round_time"};
  return names;
}

/// Reads a metrics CSV and, if out_dir is given, writes one
/// series_<name>.csv ("round,value") per global column.
inline ReportSummary cmd_report(const std::string& csv_path, const std::optional<std::string>& out_dir) {
  const std::vector<CsvRow> rows = read_csv(csv_path);
  if (out_dir) {
    const std::filesystem::path dir(*out_dir);
    detail::ensure_dir(dir);
    for (const auto& name : series_names()) {
      std::string text = "round,value\n";
      for (const auto& r : rows) {
        if (!r.is_global()) continue;
        std::string v;
        if (name == "loss") v = format_double(r.loss);
        else if (name == "perplexity") v = format_double(r.perplexity);
        else if (name == "accuracy") v = format_double(r.accuracy);
        else if (name == "layers") v = std::to_string(r.layers);
        else if (name == "cum_bytes") v = std::to_string(r.cum_bytes);
        else v = format_double(r.sim_round_time);
        text += std::to_string(r.round) + "," + v + "\n";
      }
      detail::write_text(dir / ("series_" + name + ".csv"), text);
    }
  }
  return summarize(rows);
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::size_t max_dim = 8;   // V, d, M and seq_len drawn from [lower, max_dim]
  std::uint64_t seed = 0;
  std::size_t count = 100;
  double step = 1e-6;
  double tolerance = 1e-5;
  bool corrupt = false;        // test hook: +1e-3 on one analytic entry
  bool zero_upstream = false;  // objective ⟨0, logits⟩ instead of cross-entropy
};

struct GradcheckReport {
  std::size_t checks = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return failures == 0; }
};

namespace detail {

// Normwise relative error max|x−y| / max(max|x|, max|y|); 0 when both vanish.
inline double normwise_rel_error(const std::vector<double>& x, const std::vector<double>& y) {
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff = std::max(diff, std::abs(x[i] - y[i]));
    scale = std::max({scale, std::abs(x[i]), std::abs(y[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

}  // namespace detail

/// Central finite differences against backward() on random small models:
/// every adapter entry plus the gradient w.r.t. the embedded input.
inline GradcheckReport cmd_gradcheck(const GradcheckOptions& opt) {
  if (opt.max_dim < 2 || opt.max_dim > 8) throw ConfigError("gradcheck: dims must lie in [2, 8]");
  GradcheckReport report;
  report.tolerance = opt.tolerance;
  for (std::size_t c = 0; c < opt.count; ++c) {
    Rng rng(derive_seed(opt.seed, c));
    auto pick = [&](std::size_t lo) { return lo + static_cast<std::size_t>(rng.below(opt.max_dim - lo + 1)); };
    ModelConfig cfg;
    cfg.vocab = pick(2);
    cfg.dim = pick(2);
    cfg.layers = pick(2);
    cfg.seq_len = pick(1);
    cfg.mixer = rng.below(2) == 1;
    const std::size_t batch = 1 + static_cast<std::size_t>(rng.below(2));
    RankPlan plan;
    for (std::size_t p = 0; p < cfg.layers; ++p) plan.ranks.push_back(1 + static_cast<std::size_t>(rng.below(cfg.dim)));
    SplitModel model = build_model(cfg, rng.next_u64(), plan);
    for (auto& ad : model.adapters) {
      ad.a = gaussian(rng, ad.a.rows(), ad.a.cols(), 0.3);
      ad.b = gaussian(rng, ad.b.rows(), ad.b.cols(), 0.3);
    }
    std::vector<std::uint32_t> tokens(batch * cfg.seq_len);
    std::vector<std::uint32_t> targets(batch * cfg.seq_len);
    for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.below(cfg.vocab));
    for (auto& t : targets) t = static_cast<std::uint32_t>(rng.below(cfg.vocab));
    const Mat input = embed(*model.base, tokens);
    const std::size_t m = cfg.layers;

    auto objective = [&](const SplitModel& mdl, const Mat& x) {
      const Mat logits = forward(mdl, x, 1, m).output;
      return opt.zero_upstream ? 0.0 : loss_and_head_grad(logits, targets).loss;
    };

    const ForwardResult fwd = forward(model, input, 1, m);
    const Mat upstream = opt.zero_upstream ? Mat(fwd.output.rows(), fwd.output.cols())
                                           : loss_and_head_grad(fwd.output, targets).grad;
    BackwardResult bwd = backward(model, fwd.cache, upstream, 1, m);
    if (opt.corrupt && c == 0) bwd.grads[0].ga(0, 0) += 1e-3;

    std::vector<double> analytic;
    std::vector<double> numeric;
    const double h = opt.step;
    for (std::size_t p = 0; p < m; ++p) {
      for (Mat LoraAdapter::*field : {&LoraAdapter::a, &LoraAdapter::b}) {
        const Mat& g = field == &LoraAdapter::a ? bwd.grads[p].ga : bwd.grads[p].gb;
        for (std::size_t e = 0; e < g.size(); ++e) {
          SplitModel probe = model;
          double& w = (probe.adapters[p].*field).data()[e];
          const double w0 = w;
          w = w0 + h;
          const double up = objective(probe, input);
          w = w0 - h;
          const double down = objective(probe, input);
          analytic.push_back(g.data()[e]);
          numeric.push_back((up - down) / (2.0 * h));
        }
      }
    }
    for (std::size_t e = 0; e < input.size(); ++e) {
      Mat probe = input;
      probe.data()[e] = input.data()[e] + h;
      const double up = objective(model, probe);
      probe.data()[e] = input.data()[e] - h;
      const double down = objective(model, probe);
      analytic.push_back(bwd.input_grad.data()[e]);
      numeric.push_back((up - down) / (2.0 * h));
    }
    const double err = detail::normwise_rel_error(analytic, numeric);
    ++report.checks;
    report.max_rel_error = std::max(report.max_rel_error, err);
    if (!(err < opt.tolerance)) ++report.failures;
  }
  return report;
}

}  // namespace splitft
