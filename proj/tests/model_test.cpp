// Copyright 2026 The stackattn Authors
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

#include <cmath>
#include <random>

#include "stackattn/experiment.hpp"
#include "stackattn/model.hpp"

namespace sa = stackattn;
using sa::AttentionVariant;

namespace {

constexpr AttentionVariant kVariants[] = {AttentionVariant::kSdpa, AttentionVariant::kSuperposition,
                                          AttentionVariant::kNondeterministic};

sa::ModelConfig small_config(AttentionVariant v, std::size_t symbols = 3) {
  sa::ModelConfig c;
  c.variant = v;
  c.num_layers = 3;
  c.stack_layer_index = 2;
  c.d_model = 8;
  c.ffn_hidden = 16;
  c.num_heads = 2;
  c.stack_vector_dim = 3;
  c.num_states = 2;
  c.num_symbols = 2;
  for (std::size_t i = 0; i < symbols; ++i) c.alphabet.push_back(std::string(1, char('a' + i)));
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t symbols, std::mt19937_64& rng) {
  std::vector<int> out(n);
  for (auto& t : out) t = int(rng() % symbols);
  return out;
}

std::size_t reference_count(const std::string& task, AttentionVariant v) {
  std::mt19937_64 rng(0);
  return sa::count_parameters(sa::build_model<float>(sa::default_model_config(sa::make_task(task), v), rng));
}

}  // namespace

TEST(ParameterCount, ReferenceTable) {
  struct Row {
    const char* task;
    std::size_t tf, sup, nd;
  };
  const Row rows[] = {{"marked-reversal", 43044, 40964, 33273},
                      {"unmarked-reversal", 42979, 40899, 33216},
                      {"padded-reversal", 42979, 40899, 33216},
                      {"dyck", 43109, 41029, 33330},
                      {"hardest-cfl", 43304, 41224, 36861}};
  for (const Row& r : rows) {
    EXPECT_EQ(reference_count(r.task, AttentionVariant::kSdpa), r.tf) << r.task;
    EXPECT_EQ(reference_count(r.task, AttentionVariant::kSuperposition), r.sup) << r.task;
    EXPECT_EQ(reference_count(r.task, AttentionVariant::kNondeterministic), r.nd) << r.task;
  }
}

TEST(ParameterCount, ClosedFormForSdpaModel) {
  // L * (2 * 2d + (3d^2 + 3d) + (d^2 + d) + (2dh + h + d)) + 2d + (|S|+1)d + d(|S|+1) + |S|+1.
  const sa::ModelConfig c = small_config(AttentionVariant::kSdpa, 5);
  std::mt19937_64 rng(0);
  const auto m = sa::build_model<double>(c, rng);
  const std::size_t d = 8, h = 16, L = 3, V = 6;
  const std::size_t layer = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * h + h + d;
  EXPECT_EQ(sa::count_parameters(m), L * layer + 2 * d + V * d + d * V + V);
  std::size_t sum = 0;
  for (const auto& [name, n] : sa::parameter_breakdown(m)) sum += n;
  EXPECT_EQ(sum, sa::count_parameters(m));
}

TEST(BuildModel, SameSeedIsParameterIdentical) {
  for (auto v : kVariants) {
    std::mt19937_64 a(11), b(11), c(12);
    const auto m1 = sa::build_model<double>(small_config(v), a);
    const auto m2 = sa::build_model<double>(small_config(v), b);
    const auto m3 = sa::build_model<double>(small_config(v), c);
    bool differs = false;
    for (std::size_t k = 0; k < m1.parameters.size(); ++k) {
      const auto x = m1.parameters[k].tensor.values(), y = m2.parameters[k].tensor.values(),
                 z = m3.parameters[k].tensor.values();
      EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
      differs |= !std::equal(x.begin(), x.end(), z.begin());
    }
    EXPECT_TRUE(differs);
  }
}

TEST(BuildModel, StackOnlyInConfiguredLayer) {
  std::mt19937_64 rng(1);
  sa::ModelConfig c = sa::default_model_config(sa::make_task("dyck"), AttentionVariant::kSuperposition);
  const auto m = sa::build_model<float>(c, rng);
  for (std::size_t l = 0; l < 5; ++l) {
    const bool stack = l == 2;
    EXPECT_EQ(m.layers[l].stack.action_weight.defined(), stack) << l;
    EXPECT_EQ(m.layers[l].sdpa.in_weight.defined(), !stack) << l;
  }
  EXPECT_FALSE(m.layers[2].stack.initial_vector.defined());
  c.variant = AttentionVariant::kNondeterministic;
  const auto nd = sa::build_model<float>(c, rng);
  EXPECT_TRUE(nd.layers[2].stack.initial_vector.defined());
}

TEST(BuildModel, InvalidConfigThrows) {
  std::mt19937_64 rng(0);
  auto c = small_config(AttentionVariant::kSdpa);
  c.stack_layer_index = 4;
  EXPECT_THROW(sa::build_model<double>(c, rng), sa::ParameterError);
  c = small_config(AttentionVariant::kSdpa);
  c.ffn_hidden = 0;
  EXPECT_THROW(sa::build_model<double>(c, rng), sa::ParameterError);
  c = small_config(AttentionVariant::kSdpa);
  c.num_heads = 3;
  EXPECT_THROW(sa::build_model<double>(c, rng), sa::ParameterError);
}

TEST(Init, LayerNormsAndRanges) {
  std::mt19937_64 rng(3);
  const auto c = sa::default_model_config(sa::make_task("marked-reversal"), AttentionVariant::kSuperposition);
  const auto m = sa::build_model<double>(c, rng);
  for (const auto& p : m.parameters) {
    const auto v = p.tensor.values();
    switch (p.init) {
      case sa::ParamInit::kNormGain:
        for (double x : v) EXPECT_EQ(x, 1.0) << p.name;
        break;
      case sa::ParamInit::kNormBias:
        for (double x : v) EXPECT_EQ(x, 0.0) << p.name;
        break;
      case sa::ParamInit::kXavier: {
        const double b = sa::xavier_bound(p.tensor.dim(0), p.tensor.dim(1));
        for (double x : v) EXPECT_LE(std::abs(x), b) << p.name;
        break;
      }
      case sa::ParamInit::kUniform:
        for (double x : v) EXPECT_LE(std::abs(x), 0.1) << p.name;
        break;
    }
    if (p.name.find("sdpa") != std::string::npos) EXPECT_EQ(p.init, sa::ParamInit::kUniform) << p.name;
    if (p.name.find("ffn.w") != std::string::npos || (p.name.find("stack.") != std::string::npos && p.name.find("initial") == std::string::npos) ||
        p.name == "head.weight") {
      EXPECT_EQ(p.init, sa::ParamInit::kXavier) << p.name;
    }
  }
}

TEST(Init, XavierDrawsFillTheBound) {
  // 10^4 draws from a 100 x 100 weight: within +-sqrt(6/200) and reaching
  // past 99% of it on both sides, variance close to b^2 / 3.
  sa::ModelConfig c = small_config(AttentionVariant::kSdpa);
  c.d_model = 100;
  c.num_heads = 4;
  c.ffn_hidden = 100;
  std::mt19937_64 rng(4);
  const auto m = sa::build_model<double>(c, rng);
  const auto w = m.parameter("layers.0.ffn.w1").values();
  ASSERT_EQ(w.size(), 10000u);
  const double b = std::sqrt(6.0 / 200.0);
  EXPECT_DOUBLE_EQ(sa::xavier_bound(100, 100), b);
  double lo = 0, hi = 0, sq = 0;
  for (double x : w) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    sq += x * x;
  }
  EXPECT_GE(lo, -b);
  EXPECT_LE(hi, b);
  EXPECT_LT(lo, -0.99 * b);
  EXPECT_GT(hi, 0.99 * b);
  EXPECT_NEAR(sq / 1e4, b * b / 3, 0.05 * b * b / 3);
}

TEST(Forward, ShapeAndNormalizedRows) {
  std::mt19937_64 rng(5);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    const auto tokens = random_tokens(5, 3, rng);
    const auto logits = sa::forward_logits(m, tokens, sa::Mode::kEval, rng);
    ASSERT_EQ(logits.shape(), (sa::Shape{6, 4}));
    const auto p = sa::softmax(logits);
    for (std::size_t t = 0; t < 6; ++t) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += p[t * 4 + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Forward, EmptySequencePredictsFromBosAlone) {
  std::mt19937_64 rng(6);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    const auto logits = sa::forward_logits(m, std::vector<int>{}, sa::Mode::kEval, rng);
    EXPECT_EQ(logits.shape(), (sa::Shape{1, 4}));
    EXPECT_LE(sa::sequence_logprob(m, {}), 0.0);
  }
}

TEST(Forward, OutOfVocabularyThrows) {
  std::mt19937_64 rng(7);
  const auto m = sa::build_model<double>(small_config(AttentionVariant::kSdpa), rng);
  EXPECT_THROW(sa::forward_logits(m, std::vector<int>{0, 3}, sa::Mode::kEval, rng), sa::InputError);
  EXPECT_THROW(sa::forward_logits(m, std::vector<int>{-1}, sa::Mode::kEval, rng), sa::InputError);
  EXPECT_THROW(sa::tokenize(m.config, "abz"), sa::InputError);
  EXPECT_EQ(sa::tokenize(m.config, "cab"), (std::vector<int>{2, 0, 1}));
}

TEST(ForwardProperty, AppendingATokenKeepsEarlierRowsBitIdentical) {
  std::mt19937_64 rng(8);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    for (int trial = 0; trial < 4; ++trial) {
      auto tokens = random_tokens(2 + trial * 3, 3, rng);
      const auto before = sa::forward_logits(m, tokens, sa::Mode::kEval, rng);
      tokens.push_back(int(rng() % 3));
      const auto after = sa::forward_logits(m, tokens, sa::Mode::kEval, rng);
      for (std::size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], after[i]) << sa::variant_name(v);
    }
  }
}

TEST(ForwardProperty, BatchMatchesSingleSequences) {
  std::mt19937_64 rng(9);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    std::vector<std::vector<int>> batch;
    for (int k = 0; k < 3; ++k) batch.push_back(random_tokens(6, 3, rng));
    const auto joint = sa::forward_logits(m, batch, sa::Mode::kEval, rng);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const auto alone = sa::forward_logits(m, batch[k], sa::Mode::kEval, rng);
      for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_NEAR(joint[k * alone.size() + i], alone[i], 1e-12);
    }
  }
}

TEST(SequenceLogprob, UniformOutputModel) {
  std::mt19937_64 rng(10);
  auto m = sa::build_model<double>(small_config(AttentionVariant::kSuperposition), rng);
  for (auto& v : m.head_weight.mutable_data()) v = 0;
  for (auto& v : m.head_bias.mutable_data()) v = 0;
  for (std::size_t n : {0, 1, 7}) {
    EXPECT_NEAR(sa::sequence_logprob(m, random_tokens(n, 3, rng)), double(n + 1) * std::log(0.25), 1e-12);
  }
}

TEST(SequenceLogprob, MatchesIncrementalChainRule) {
  // Score each next token from the last row of a fresh forward pass over the
  // prefix; the sum must equal the one-pass log-likelihood.
  std::mt19937_64 rng(11);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    const auto x = random_tokens(6, 3, rng);
    double chain = 0;
    for (std::size_t t = 0; t <= x.size(); ++t) {
      const std::vector<int> prefix(x.begin(), x.begin() + t);
      const auto logits = sa::forward_logits(m, prefix, sa::Mode::kEval, rng);
      const double* row = logits.values().data() + t * 4;
      double z = 0;
      for (int k = 0; k < 4; ++k) z += std::exp(row[k]);
      const int target = t < x.size() ? x[t] : m.config.eos();
      chain += row[target] - std::log(z);
    }
    EXPECT_NEAR(sa::sequence_logprob(m, x), chain, 1e-10) << sa::variant_name(v);
  }
}

TEST(SequenceLogprobProperty, NeverPositive) {
  std::mt19937_64 rng(12);
  for (auto v : kVariants) {
    const auto m = sa::build_model<double>(small_config(v), rng);
    for (int k = 0; k < 10; ++k) EXPECT_LE(sa::sequence_logprob(m, random_tokens(rng() % 9, 3, rng)), 0.0);
  }
}

TEST(SequenceLogprob, UntrainedCrossEntropyNearUniform) {
  std::mt19937_64 rng(13);
  for (auto v : kVariants) {
    for (const char* task : {"marked-reversal", "dyck"}) {
      const auto c = sa::default_model_config(sa::make_task(task), v);
      const auto m = sa::build_model<float>(c, rng);
      double nll = 0, symbols = 0;
      for (int k = 0; k < 5; ++k) {
        const auto x = random_tokens(20, c.alphabet.size(), rng);
        nll -= sa::sequence_logprob(m, x);
        symbols += 21;
      }
      const double target = std::log(double(c.alphabet.size() + 1));
      EXPECT_NEAR(nll / symbols, target, 0.2 * target) << task << " " << sa::variant_name(v);
    }
  }
}

TEST(StackActions, SuperpositionRowsAreDistributions) {
  std::mt19937_64 rng(14);
  const auto m = sa::build_model<double>(small_config(AttentionVariant::kSuperposition), rng);
  const auto x = random_tokens(7, 3, rng);
  const auto a = sa::stack_actions(m, x);
  ASSERT_EQ(a.shape(), (sa::Shape{8, 3}));
  for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(a[3 * t] + a[3 * t + 1] + a[3 * t + 2], 1.0, 1e-12);
}

TEST(StackActions, NondeterministicRowsHaveFullTransitionExtent) {
  std::mt19937_64 rng(15);
  const auto c = small_config(AttentionVariant::kNondeterministic);
  const auto m = sa::build_model<double>(c, rng);
  const auto a = sa::stack_actions(m, random_tokens(4, 3, rng));
  EXPECT_EQ(a.shape(), (sa::Shape{5, c.stack().action_dim()}));
  const auto tf = sa::build_model<double>(small_config(AttentionVariant::kSdpa), rng);
  EXPECT_THROW(sa::stack_actions(tf, {0}), sa::ParameterError);
}

TEST(StackActions, ZeroActionWeightGivesUniformRows) {
  std::mt19937_64 rng(16);
  auto m = sa::build_model<double>(small_config(AttentionVariant::kSuperposition), rng);
  const auto x = random_tokens(5, 3, rng);
  auto w = m.layers[1].stack.action_weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  const auto a = sa::stack_actions(m, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 1.0 / 3, 1e-12);
}

TEST(SequenceLogprob, UntrainedLogitScaleFollowsXavierHead) {
  // The final layer norm gives every row sum(x^2) = d, so head logits minus
  // the bias have variance d * b^2 / 3 with b the head's Xavier bound.
  std::mt19937_64 rng(17);
  const auto c = sa::default_model_config(sa::make_task("marked-reversal"), AttentionVariant::kSdpa);
  const std::size_t V = c.vocab_out();
  double sq = 0, count = 0;
  for (int seed = 0; seed < 20; ++seed) {
    const auto m = sa::build_model<double>(c, rng);
    const auto logits = sa::forward_logits(m, random_tokens(30, 3, rng), sa::Mode::kEval, rng);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double z = logits[i] - m.head_bias[i % V];
      sq += z * z;
      ++count;
    }
  }
  const double b = sa::xavier_bound(c.d_model, V);
  EXPECT_NEAR(sq / count, double(c.d_model) * b * b / 3, 0.1 * double(c.d_model) * b * b / 3);
}
