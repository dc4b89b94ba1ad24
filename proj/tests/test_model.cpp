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

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "splitft/model.hpp"

namespace {

using splitft::Mat;
using splitft::ModelConfig;
using splitft::Rng;
using splitft::SplitModel;

ModelConfig small_config(bool mixer) {
  ModelConfig cfg;
  cfg.vocab = 8;
  cfg.dim = 6;
  cfg.layers = 5;
  cfg.seq_len = 4;
  cfg.mixer = mixer;
  return cfg;
}

void randomize_adapters(SplitModel& m, Rng& rng, double sigma = 0.3) {
  for (auto& ad : m.adapters) {
    ad.a = splitft::gaussian(rng, ad.a.rows(), ad.a.cols(), sigma);
    ad.b = splitft::gaussian(rng, ad.b.rows(), ad.b.cols(), sigma);
  }
}

std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::uint32_t> t(n);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

class ModelTest : public ::testing::TestWithParam<bool> {};

TEST_P(ModelTest, BuildIsDeterministic) {
  const auto cfg = small_config(GetParam());
  const auto plan = splitft::uniform_rank_plan(cfg.layers, 2);
  const SplitModel a = splitft::build_model(cfg, 9, plan);
  const SplitModel b = splitft::build_model(cfg, 9, plan);
  EXPECT_EQ(a.base->embedding, b.base->embedding);
  EXPECT_EQ(a.base->blocks, b.base->blocks);
  EXPECT_EQ(a.adapters, b.adapters);
}

TEST_P(ModelTest, SplitForwardComposesBitwise) {
  const auto cfg = small_config(GetParam());
  Rng rng(3);
  SplitModel m = splitft::build_model(cfg, 3, splitft::uniform_rank_plan(cfg.layers, 3));
  randomize_adapters(m, rng);
  const auto tokens = random_tokens(rng, 2 * cfg.seq_len, cfg.vocab);
  const Mat whole = splitft::forward(m, tokens, 1, cfg.layers).output;
  for (std::size_t cut = 1; cut < cfg.layers; ++cut) {
    const Mat smashed = splitft::forward(m, tokens, 1, cut).output;
    EXPECT_EQ(splitft::forward(m, smashed, cut + 1, cfg.layers).output, whole) << "cut " << cut;
  }
}

TEST_P(ModelTest, MatchesStraightLineOracle) {
  const auto cfg = small_config(GetParam());
  Rng rng(4);
  SplitModel m = splitft::build_model(cfg, 4, splitft::uniform_rank_plan(cfg.layers, 2));
  const auto tokens = random_tokens(rng, 3 * cfg.seq_len, cfg.vocab);
  const Mat ref = oracle::forward_blocks(*m.base, m.adapters, oracle::embed(*m.base, tokens), 1, cfg.layers);
  EXPECT_LT(oracle::max_abs(splitft::forward(m, tokens, 1, cfg.layers).output, ref), 1e-12);

  randomize_adapters(m, rng);
  const Mat ref2 = oracle::forward_blocks(*m.base, m.adapters, oracle::embed(*m.base, tokens), 1, cfg.layers);
  EXPECT_LT(oracle::max_abs(splitft::forward(m, tokens, 1, cfg.layers).output, ref2), 1e-12);
}

TEST_P(ModelTest, InitialForwardEqualsFrozenBase) {
  const auto cfg = small_config(GetParam());
  Rng rng(5);
  const SplitModel m = splitft::build_model(cfg, 5, splitft::uniform_rank_plan(cfg.layers, 2));
  SplitModel zeroed = m;
  for (auto& ad : zeroed.adapters) ad.a = Mat(ad.a.rows(), ad.a.cols());
  const auto tokens = random_tokens(rng, cfg.seq_len, cfg.vocab);
  EXPECT_EQ(splitft::forward(m, tokens, 1, cfg.layers).output, splitft::forward(zeroed, tokens, 1, cfg.layers).output);
}

TEST_P(ModelTest, SplitBackwardEqualsMonolithic) {
  const auto cfg = small_config(GetParam());
  Rng rng(6);
  SplitModel m = splitft::build_model(cfg, 6, splitft::uniform_rank_plan(cfg.layers, 2));
  randomize_adapters(m, rng);
  const auto tokens = random_tokens(rng, 2 * cfg.seq_len, cfg.vocab);
  const auto targets = random_tokens(rng, 2 * cfg.seq_len, cfg.vocab);
  const auto full = splitft::forward(m, tokens, 1, cfg.layers);
  const auto lg = splitft::loss_and_head_grad(full.output, targets);
  const auto mono = splitft::backward(m, full.cache, lg.grad, 1, cfg.layers);
  for (std::size_t cut = 1; cut < cfg.layers; ++cut) {
    const auto client = splitft::forward(m, tokens, 1, cut);
    const auto server = splitft::forward(m, client.output, cut + 1, cfg.layers);
    const auto slg = splitft::loss_and_head_grad(server.output, targets);
    const auto sb = splitft::backward(m, server.cache, slg.grad, cut + 1, cfg.layers);
    const auto cb = splitft::backward(m, client.cache, sb.input_grad, 1, cut);
    for (std::size_t p = 1; p <= cfg.layers; ++p) {
      const auto& g = p <= cut ? cb.grads[p - 1] : sb.grads[p - cut - 1];
      EXPECT_LE(splitft::max_abs_diff(g.ga, mono.grads[p - 1].ga), 1e-12) << "cut " << cut << " layer " << p;
      EXPECT_LE(splitft::max_abs_diff(g.gb, mono.grads[p - 1].gb), 1e-12) << "cut " << cut << " layer " << p;
    }
  }
}

TEST_P(ModelTest, BackwardMatchesFiniteDifferences) {
  const auto cfg = small_config(GetParam());
  Rng rng(7);
  SplitModel m = splitft::build_model(cfg, 7, splitft::uniform_rank_plan(cfg.layers, 2));
  randomize_adapters(m, rng);
  const auto tokens = random_tokens(rng, cfg.seq_len, cfg.vocab);
  const auto targets = random_tokens(rng, cfg.seq_len, cfg.vocab);
  const auto fwd = splitft::forward(m, tokens, 1, cfg.layers);
  const auto bwd = splitft::backward(m, fwd.cache, splitft::loss_and_head_grad(fwd.output, targets).grad, 1, cfg.layers);
  for (std::size_t p = 0; p < cfg.layers; ++p) {
    auto loss_with = [&](std::size_t which, const Mat& x) {
      SplitModel probe = m;
      (which == 0 ? probe.adapters[p].a : probe.adapters[p].b) = x;
      return oracle::cross_entropy(
          oracle::forward_blocks(*probe.base, probe.adapters, oracle::embed(*probe.base, tokens), 1, cfg.layers),
          targets);
    };
    const Mat fa = oracle::finite_diff([&](const Mat& x) { return loss_with(0, x); }, m.adapters[p].a);
    const Mat fb = oracle::finite_diff([&](const Mat& x) { return loss_with(1, x); }, m.adapters[p].b);
    EXPECT_LT(oracle::rel_err(bwd.grads[p].ga, fa), 1e-5) << "layer " << p + 1;
    EXPECT_LT(oracle::rel_err(bwd.grads[p].gb, fb), 1e-5) << "layer " << p + 1;
  }
}

TEST_P(ModelTest, ZeroUpstreamGivesZeroGrads) {
  const auto cfg = small_config(GetParam());
  Rng rng(8);
  SplitModel m = splitft::build_model(cfg, 8, splitft::uniform_rank_plan(cfg.layers, 2));
  randomize_adapters(m, rng);
  const auto fwd = splitft::forward(m, random_tokens(rng, cfg.seq_len, cfg.vocab), 1, cfg.layers);
  const auto bwd = splitft::backward(m, fwd.cache, Mat(fwd.output.rows(), fwd.output.cols()), 1, cfg.layers);
  EXPECT_EQ(bwd.input_grad, Mat(cfg.seq_len, cfg.dim));
  for (const auto& g : bwd.grads) {
    EXPECT_EQ(g.ga, Mat(g.ga.rows(), g.ga.cols()));
    EXPECT_EQ(g.gb, Mat(g.gb.rows(), g.gb.cols()));
  }
}

TEST_P(ModelTest, SmashedShapeIndependentOfRank) {
  const auto cfg = small_config(GetParam());
  Rng rng(9);
  const auto tokens = random_tokens(rng, 3 * cfg.seq_len, cfg.vocab);
  for (std::size_t r = 1; r <= cfg.dim; ++r) {
    const SplitModel m = splitft::build_model(cfg, 9, splitft::uniform_rank_plan(cfg.layers, r));
    const Mat out = splitft::forward(m, tokens, 1, 2).output;
    EXPECT_EQ(out.rows(), 3 * cfg.seq_len);
    EXPECT_EQ(out.cols(), cfg.dim);
  }
}

INSTANTIATE_TEST_SUITE_P(Mixer, ModelTest, ::testing::Bool(),
                         [](const auto& info) { return info.param ? "On" : "Off"; });

TEST(Model, ShapesForTinyConfig) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.dim = 4;
  cfg.vocab = 8;
  const SplitModel m = splitft::build_model(cfg, 1, splitft::uniform_rank_plan(2, 3));
  ASSERT_EQ(m.adapters.size(), 2u);
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_EQ(m.adapters[p].a.rows(), 4u);
    EXPECT_EQ(m.adapters[p].a.cols(), 3u);
    EXPECT_EQ(m.adapters[p].b.rows(), 3u);
    EXPECT_EQ(m.adapters[p].b.cols(), 4u);
    EXPECT_EQ(m.adapters[p].layer_index, p + 1);
  }
  EXPECT_EQ(m.base->embedding.rows(), 8u);
}

TEST(Model, InvalidConfigRejected) {
  ModelConfig cfg;
  cfg.layers = 1;
  EXPECT_THROW(splitft::build_model(cfg, 1, splitft::uniform_rank_plan(1, 1)), splitft::ConfigError);
  cfg = ModelConfig{};
  EXPECT_THROW(splitft::build_model(cfg, 1, splitft::uniform_rank_plan(3, 1)), splitft::ConfigError);
}

TEST(Model, FrozenScaleIsInverseSqrtDim) {
  ModelConfig cfg;
  cfg.dim = 64;
  cfg.vocab = 256;
  const SplitModel m = splitft::build_model(cfg, 1, splitft::uniform_rank_plan(cfg.layers, 4));
  double ss = 0.0;
  for (double v : m.base->embedding.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / m.base->embedding.size()), 1.0 / 8.0, 0.005);
}

TEST(Model, HandComputedSingleBlock) {
  ModelConfig cfg;
  cfg.vocab = 2;
  cfg.dim = 2;
  cfg.layers = 2;
  cfg.seq_len = 1;
  auto base = std::make_shared<splitft::FrozenBase>();
  base->cfg = cfg;
  base->embedding = Mat{{1, 0}, {0, 1}};
  base->blocks = {Mat{{0.5, 0}, {0, 0.5}}, Mat{{1, 0}, {0, 1}}};
  SplitModel m{base, {{Mat{{1}, {0}}, Mat{{0.1, 0.2}}, 1, 1}, {Mat{{0}, {0}}, Mat{{0, 0}}, 1, 2}}};
  const std::vector<std::uint32_t> tok{0};
  const Mat out = splitft::forward(m, tok, 1, 1).output;
  // W = [[0.6, 0.2], [0, 0.5]], z = [1, 0]·W = [0.6, 0.2].
  EXPECT_NEAR(out(0, 0), 1.0 + std::tanh(0.6), 1e-12);
  EXPECT_NEAR(out(0, 1), std::tanh(0.2), 1e-12);
}

TEST(Model, RangeErrors) {
  const auto cfg = small_config(false);
  const SplitModel m = splitft::build_model(cfg, 1, splitft::uniform_rank_plan(cfg.layers, 2));
  const std::vector<std::uint32_t> tok(cfg.seq_len, 0);
  EXPECT_THROW(splitft::forward(m, tok, 0, 2), splitft::RangeError);
  EXPECT_THROW(splitft::forward(m, tok, 3, 2), splitft::RangeError);
  EXPECT_THROW(splitft::forward(m, tok, 1, cfg.layers + 1), splitft::RangeError);
  EXPECT_THROW(splitft::forward(m, tok, 2, 3), splitft::RangeError);
  const auto fwd = splitft::forward(m, tok, 1, 2);
  EXPECT_THROW(splitft::backward(m, fwd.cache, fwd.output, 1, 3), splitft::RangeError);
}

TEST(Model, TokenOutOfVocab) {
  const auto cfg = small_config(false);
  const SplitModel m = splitft::build_model(cfg, 1, splitft::uniform_rank_plan(cfg.layers, 2));
  const std::vector<std::uint32_t> tok(cfg.seq_len, static_cast<std::uint32_t>(cfg.vocab));
  EXPECT_THROW(splitft::forward(m, tok, 1, 2), splitft::DataError);
}

TEST(Model, MixerIsCausal) {
  auto cfg = small_config(true);
  Rng rng(10);
  SplitModel m = splitft::build_model(cfg, 10, splitft::uniform_rank_plan(cfg.layers, 2));
  randomize_adapters(m, rng);
  auto tokens = random_tokens(rng, cfg.seq_len, cfg.vocab);
  const Mat a = splitft::forward(m, tokens, 1, cfg.layers).output;
  tokens.back() = (tokens.back() + 1) % cfg.vocab;
  const Mat b = splitft::forward(m, tokens, 1, cfg.layers).output;
  for (std::size_t r = 0; r + 1 < cfg.seq_len; ++r)
    for (std::size_t v = 0; v < cfg.vocab; ++v) EXPECT_EQ(a(r, v), b(r, v));
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  const Mat logits(6, 16);
  const std::vector<std::uint32_t> t{0, 1, 2, 3, 4, 15};
  EXPECT_NEAR(splitft::loss_and_head_grad(logits, t).loss, std::log(16.0), 1e-14);
}

TEST(Loss, LargeMarginApproachesZero) {
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    Mat logits(1, 4);
    logits(0, 2) = margin;
    const double l = splitft::loss_and_head_grad(logits, std::vector<std::uint32_t>{2}).loss;
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(Loss, GradMatchesFiniteDifferences) {
  Rng rng(11);
  const Mat logits = splitft::gaussian(rng, 5, 7, 2.0);
  const auto targets = random_tokens(rng, 5, 7);
  const Mat g = splitft::loss_and_head_grad(logits, targets).grad;
  const Mat fd = oracle::finite_diff([&](const Mat& x) { return oracle::cross_entropy(x, targets); }, logits);
  EXPECT_LT(oracle::rel_err(g, fd), 1e-5);
}

TEST(Loss, TargetOutOfRange) {
  EXPECT_THROW(splitft::loss_and_head_grad(Mat(1, 4), std::vector<std::uint32_t>{4}), splitft::DataError);
}

TEST(ModelProperty, FrozenPartsUnchangedByTraining) {
  const auto cfg = small_config(true);
  Rng rng(12);
  SplitModel m = splitft::build_model(cfg, 12, splitft::uniform_rank_plan(cfg.layers, 2));
  const Mat emb = m.base->embedding;
  const auto blocks = m.base->blocks;
  for (int step = 0; step < 20; ++step) {
    const auto tokens = random_tokens(rng, cfg.seq_len, cfg.vocab);
    const auto fwd = splitft::forward(m, tokens, 1, cfg.layers);
    const auto bwd = splitft::backward(m, fwd.cache, splitft::loss_and_head_grad(fwd.output, tokens).grad, 1, cfg.layers);
    for (std::size_t p = 0; p < cfg.layers; ++p)
      m.adapters[p] = splitft::sgd_step(m.adapters[p], bwd.grads[p].ga, bwd.grads[p].gb, 0.5);
  }
  EXPECT_EQ(m.base->embedding, emb);
  EXPECT_EQ(m.base->blocks, blocks);
}

TEST(RankPlan, CutPairGetsCutRank) {
  const auto plan = splitft::cut_rank_plan(8, {2}, 8, 16);
  EXPECT_EQ(plan.ranks, (std::vector<std::size_t>{16, 8, 8, 16, 16, 16, 16, 16}));
  const auto two = splitft::cut_rank_plan(8, {2, 5}, 4, 16);
  EXPECT_EQ(two.ranks, (std::vector<std::size_t>{16, 4, 4, 16, 4, 4, 16, 16}));
  EXPECT_THROW(splitft::cut_rank_plan(8, {8}, 4, 16), splitft::RangeError);
}

}  // namespace
