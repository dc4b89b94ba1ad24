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

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "splitft/splitft.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool trace = false;
  bool lossless = false;
};

// File first, then flags.
splitft::ExperimentConfig resolve(const Common& c) {
  splitft::ExperimentConfig cfg = c.config.empty() ? splitft::ExperimentConfig{} : splitft::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.trace) cfg.federation.trace = true;
  if (c.lossless) cfg.federation.lossless_wire = true;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* sub, Common& c, const std::string& out_help) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "override the config seed");
  sub->add_option("--out", c.out, out_help);
  sub->add_flag("--trace", c.trace, "write the per-message trace log");
  sub->add_flag("--lossless-wire", c.lossless, "64-bit floats on the wire");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SplitFT federated split fine-tuning engine"};
  app.require_subcommand(1);

  Common part;
  auto* partition = app.add_subcommand("partition", "partition the synthetic corpus into client shards");
  add_common(partition, part, "shard file to write");
  part.out = "shards.json";

  Common train;
  auto* trainc = app.add_subcommand("train", "run federated split training");
  add_common(trainc, train, "output directory");
  train.out = "run";

  std::string csv;
  std::optional<std::string> plot_dir;
  auto* report = app.add_subcommand("report", "summarise a metrics CSV");
  report->add_option("csv", csv, "metrics.csv from a train run")->required();
  report->add_option("--out", plot_dir, "directory for plot-data series");

  splitft::GradcheckOptions gopt;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--dims", gopt.max_dim, "largest V, d, M, seq_len (<= 8)");
  gradcheck->add_option("--seed", gopt.seed, "seed");
  gradcheck->add_option("--count", gopt.count, "number of random configs");
  gradcheck->add_flag("--zero-upstream", gopt.zero_upstream, "use a zero upstream gradient");
  gradcheck->add_flag("--corrupt", gopt.corrupt, "perturb one analytic entry (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*partition) {
      const auto out = splitft::cmd_partition(resolve(part), part.out);
      std::cout << "wrote " << part.out << " (" << out.file.shards.size() << " shards)\n";
      if (out.heterogeneity) std::cout << "heterogeneity: " << splitft::format_double(*out.heterogeneity) << "\n";
      for (const auto& s : out.file.shards) std::cout << "client " << s.client_id << ": " << s.size() << " samples\n";
    } else if (*trainc) {
      const auto res = splitft::cmd_train(resolve(train), train.out);
      const auto& first = res.rounds.front();
      const auto& last = res.rounds.back();
      std::cout << "rounds: " << res.rounds.size() - 1 << "\n"
                << "perplexity: " << splitft::format_double(first.perplexity) << " -> "
                << splitft::format_double(last.perplexity) << "\n"
                << "total bytes: " << res.total_frame_bytes << "\n"
                << "outputs in " << train.out << "\n";
    } else if (*report) {
      splitft::print_summary(std::cout, splitft::cmd_report(csv, plot_dir));
    } else if (*gradcheck) {
      const auto rep = splitft::cmd_gradcheck(gopt);
      std::cout << "checks: " << rep.checks << "\n"
                << "max_rel_error: " << splitft::format_double(rep.max_rel_error) << "\n"
                << (rep.passed() ? "PASS" : "FAIL") << "\n";
      return rep.passed() ? 0 : 1;
    }
  } catch (const splitft::Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error[E_INTERNAL]: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
