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

// Synthetic corpus generation plus IID and length-based Dirichlet client
// partitioning.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "splitft/numkit.hpp"

namespace splitft {

struct Corpus {
  std::vector<std::vector<std::uint32_t>> samples;
  std::size_t vocab = 0;

  std::size_t size() const noexcept { return samples.size(); }
};

struct ClientShard {
  std::uint32_t client_id = 0;
  std::vector<std::size_t> sample_indices;
  std::vector<std::size_t> category_counts;  // length K; empty when unknown

  std::size_t size() const noexcept { return sample_indices.size(); }
  friend bool operator==(const ClientShard&, const ClientShard&) = default;
};

// Bucket index per category, sample indices ascending inside each bucket.
using Categories = std::vector<std::vector<std::size_t>>;

inline constexpr double kMarkovSharpness = 2.5;

/// Row-stochastic V×V bigram table. Row weights are exp(sharpness·z) with
/// z ~ N(0,1), which gives every token a handful of likely successors.
inline Mat markov_table(std::size_t vocab, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 1));
  Mat t(vocab, vocab);
  for (std::size_t i = 0; i < vocab; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      t(i, j) = std::exp(kMarkovSharpness * rng.normal());
      sum += t(i, j);
    }
    for (std::size_t j = 0; j < vocab; ++j) t(i, j) /= sum;
  }
  return t;
}

/// Sequences from the seeded bigram chain; lengths uniform in
/// [len_min, len_max], first token uniform.
inline Corpus synth_corpus(std::size_t vocab, std::size_t n_samples, std::size_t len_min,
                           std::size_t len_max, std::uint64_t seed) {
  if (vocab < 2) throw ConfigError("synth_corpus: vocab must be >= 2");
  if (len_min < 1 || len_max > 512 || len_min > len_max) {
    throw ConfigError("synth_corpus: length range must lie within [1, 512]");
  }
  const Mat table = markov_table(vocab, seed);
  Rng rng(derive_seed(seed, 2));
  Corpus c;
  c.vocab = vocab;
  c.samples.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const std::size_t len = len_min + static_cast<std::size_t>(rng.below(len_max - len_min + 1));
    std::vector<std::uint32_t> seq(len);
    seq[0] = static_cast<std::uint32_t>(rng.below(vocab));
    for (std::size_t t = 1; t < len; ++t) {
      const double u = rng.uniform();
      const auto row = table.row(seq[t - 1]);
      double cum = 0.0;
      std::size_t next = vocab - 1;
      for (std::size_t j = 0; j < vocab; ++j) {
        cum += row[j];
        if (u < cum) {
          next = j;
          break;
        }
      }
      seq[t] = static_cast<std::uint32_t>(next);
    }
    c.samples.push_back(std::move(seq));
  }
  return c;
}

/// Seeded permutation split into near-equal shards; the first
/// |corpus| mod N shards get one extra sample.
inline std::vector<ClientShard> partition_iid(const Corpus& corpus, std::size_t n_clients,
                                              std::uint64_t seed) {
  if (n_clients < 1) throw ConfigError("partition_iid: n_clients must be >= 1");
  if (n_clients > corpus.size()) throw DataError("partition_iid: more clients than samples");
  std::vector<std::size_t> perm(corpus.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(perm);
  std::vector<ClientShard> shards(n_clients);
  const std::size_t base = corpus.size() / n_clients;
  const std::size_t extra = corpus.size() % n_clients;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n_clients; ++i) {
    const std::size_t take = base + (i < extra ? 1 : 0);
    shards[i].client_id = static_cast<std::uint32_t>(i);
    shards[i].sample_indices.assign(perm.begin() + pos, perm.begin() + pos + take);
    std::sort(shards[i].sample_indices.begin(), shards[i].sample_indices.end());
    pos += take;
  }
  return shards;
}

/// Buckets samples by token length at the empirical K-quantiles. Equal
/// lengths always share a bucket (the lower one); empty buckets are dropped,
/// so fewer distinct lengths than K yields one bucket per length.
inline Categories bucket_by_length(const Corpus& corpus, std::size_t k_categories) {
  if (k_categories < 1) throw ConfigError("bucket_by_length: k must be >= 1");
  const std::size_t n = corpus.size();
  if (n == 0) return {};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.samples[a].size() < corpus.samples[b].size();
  });
  // Upper length bound of bucket j is the length at sorted position
  // round((j+1)·n/K) − 1.
  std::vector<std::size_t> upper(k_categories);
  for (std::size_t j = 0; j < k_categories; ++j) {
    const std::size_t cut = (2 * (j + 1) * n + k_categories) / (2 * k_categories);
    upper[j] = corpus.samples[order[std::max<std::size_t>(cut, 1) - 1]].size();
  }
  upper.back() = corpus.samples[order.back()].size();

  Categories buckets(k_categories);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = corpus.samples[i].size();
    const auto it = std::lower_bound(upper.begin(), upper.end(), len);
    buckets[static_cast<std::size_t>(it - upper.begin())].push_back(i);
  }
  std::erase_if(buckets, [](const auto& b) { return b.empty(); });
  return buckets;
}

/// Fills each shard's category histogram from a bucketing.
inline void assign_categories(std::vector<ClientShard>& shards, const Categories& categories) {
  std::size_t total = 0;
  for (const auto& c : categories)
    for (std::size_t idx : c) total = std::max(total, idx + 1);
  std::vector<std::size_t> category_of(total, categories.size());
  for (std::size_t k = 0; k < categories.size(); ++k)
    for (std::size_t idx : categories[k]) category_of[idx] = k;
  for (auto& s : shards) {
    s.category_counts.assign(categories.size(), 0);
    for (std::size_t idx : s.sample_indices) {
      if (idx >= total || category_of[idx] == categories.size()) {
        throw DataError("assign_categories: sample " + std::to_string(idx) + " has no category");
      }
      ++s.category_counts[category_of[idx]];
    }
  }
}

/// Proportions p_k ~ Dir(α·1) for one category: normalised Gamma(α, 1)
/// draws, client order. Falls back to uniform if every draw underflows.
inline std::vector<double> dirichlet_draw(Rng& rng, std::size_t n, double alpha) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& x : p) {
    x = rng.gamma(alpha);
    sum += x;
  }
  if (!(sum > 0.0)) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(n));
    return p;
  }
  for (double& x : p) x /= sum;
  return p;
}

/// Per-client sample counts ⌊p_i·n_k⌋, with the samples stranded by the
/// floor handed out one each in descending fractional-part order
/// (ties to the lower client id).
inline std::vector<std::size_t> floor_allocation(const std::vector<double>& p, std::size_t n_k) {
  const std::size_t n = p.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = p[i] * static_cast<double>(n_k);
    counts[i] = std::min(static_cast<std::size_t>(std::floor(exact)), n_k);
    frac[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  while (assigned > n_k) {  // guards rounding above n_k
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < n_k; ++r, ++assigned) ++counts[order[r % n]];
  return counts;
}

/// Length-based Dirichlet partition. For each non-empty category, in order:
/// draw p_k, shuffle the category's samples, give client i the next
/// floor_allocation(p_k)[i] of them.
inline std::vector<ClientShard> dirichlet_partition(const Categories& categories,
                                                    std::size_t n_clients, double alpha,
                                                    std::uint64_t seed) {
  if (n_clients < 1) throw ConfigError("dirichlet_partition: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be > 0");
  Rng rng(seed);
  std::vector<ClientShard> shards(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) {
    shards[i].client_id = static_cast<std::uint32_t>(i);
    shards[i].category_counts.assign(categories.size(), 0);
  }
  for (std::size_t k = 0; k < categories.size(); ++k) {
    if (categories[k].empty()) continue;
    const std::vector<double> p = dirichlet_draw(rng, n_clients, alpha);
    std::vector<std::size_t> members = categories[k];
    rng.shuffle(members);
    const std::vector<std::size_t> counts = floor_allocation(p, members.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n_clients; ++i) {
      shards[i].sample_indices.insert(shards[i].sample_indices.end(), members.begin() + pos,
                                      members.begin() + pos + counts[i]);
      shards[i].category_counts[k] = counts[i];
      pos += counts[i];
    }
  }
  for (auto& s : shards) std::sort(s.sample_indices.begin(), s.sample_indices.end());
  return shards;
}

/// Mean pairwise total-variation distance between the clients' normalised
/// category histograms. An empty shard counts as the uniform histogram.
inline double heterogeneity(const std::vector<ClientShard>& shards) {
  if (shards.size() < 2) throw DataError("heterogeneity: needs at least 2 shards");
  const std::size_t k = shards.front().category_counts.size();
  if (k == 0) throw DataError("heterogeneity: shards carry no category histogram");
  std::vector<std::vector<double>> hist;
  for (const auto& s : shards) {
    if (s.category_counts.size() != k) throw DataError("heterogeneity: histogram lengths differ");
    const double total = static_cast<double>(
        std::accumulate(s.category_counts.begin(), s.category_counts.end(), std::size_t{0}));
    std::vector<double> h(k, 1.0 / static_cast<double>(k));
    if (total > 0.0)
      for (std::size_t j = 0; j < k; ++j) h[j] = static_cast<double>(s.category_counts[j]) / total;
    hist.push_back(std::move(h));
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < hist.size(); ++a) {
    for (std::size_t b = a + 1; b < hist.size(); ++b) {
      double tv = 0.0;
      for (std::size_t j = 0; j < k; ++j) tv += std::abs(hist[a][j] - hist[b][j]);
      sum += 0.5 * tv;
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Shard file: {"clients": [{"id", "indices"}], "alpha", "seed", "k_categories"}.
// "alpha" is null for IID partitions.

struct ShardFile {
  std::vector<ClientShard> shards;
  std::optional<double> alpha;
  std::uint64_t seed = 0;
  std::size_t k_categories = 0;
};

inline nlohmann::json shard_file_to_json(const ShardFile& f) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& s : f.shards) {
    clients.push_back({{"id", s.client_id}, {"indices", s.sample_indices}});
  }
  nlohmann::json j;
  j["clients"] = std::move(clients);
  j["alpha"] = f.alpha ? nlohmann::json(*f.alpha) : nlohmann::json(nullptr);
  j["seed"] = f.seed;
  j["k_categories"] = f.k_categories;
  return j;
}

inline ShardFile shard_file_from_json(const nlohmann::json& j) {
  try {
    ShardFile f;
    for (const auto& c : j.at("clients")) {
      ClientShard s;
      s.client_id = c.at("id").get<std::uint32_t>();
      s.sample_indices = c.at("indices").get<std::vector<std::size_t>>();
      f.shards.push_back(std::move(s));
    }
    if (!j.at("alpha").is_null()) f.alpha = j.at("alpha").get<double>();
    f.seed = j.at("seed").get<std::uint64_t>();
    f.k_categories = j.at("k_categories").get<std::size_t>();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("shard file: ") + e.what());
  }
}

inline void write_shard_file(const ShardFile& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << shard_file_to_json(f).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline ShardFile read_shard_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return shard_file_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("shard file: ") + e.what());
  }
}

}  // namespace splitft
