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
#include <limits>
#include <random>

#include "stackattn/grad_check.hpp"
#include "stackattn/run_oracle.hpp"
#include "stackattn/superposition.hpp"
#include "stackattn/vpda.hpp"

namespace sa = stackattn;
using TD = sa::Tensor<double>;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> random_vec(std::size_t m, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(m);
  for (auto& x : v) x = u(rng);
  return v;
}

sa::ActionTriple<double> random_triple(std::mt19937_64& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  const double a = g(rng), b = g(rng), c = g(rng), s = a + b + c;
  return {a / s, b / s, c / s};
}

// Weights for a one-state one-symbol automaton: push, replace (no-op), pop.
sa::TransitionWeights<double> single_weights(const sa::ActionTriple<double>& a) {
  sa::VpdaConfig c{1, 1, 1};
  auto w = sa::TransitionWeights<double>::zero(c);
  auto lg = [](double p) { return p > 0 ? std::log(p) : kNegInf; };
  w.push(0, 0, 0, 0) = lg(a.push);
  w.replace(0, 0, 0, 0) = lg(a.noop);
  w.pop(0, 0, 0) = lg(a.pop);
  return w;
}

struct RandomInstance {
  sa::VpdaConfig config;
  std::vector<double> r0;
  std::vector<sa::TransitionWeights<double>> deltas;
  std::vector<std::vector<double>> pushed;
};

RandomInstance random_instance(std::mt19937_64& rng, std::size_t max_q, std::size_t max_g,
                               std::size_t max_m, std::size_t max_n) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  RandomInstance inst;
  inst.config = {pick(1, max_q), pick(1, max_g), pick(1, max_m)};
  const std::size_t n = pick(0, max_n);
  inst.r0 = random_vec(inst.config.stack_vector_dim, rng);
  std::bernoulli_distribution sparse(0.15);
  for (std::size_t t = 0; t < n; ++t) {
    auto w = random_vec(inst.config.action_dim(), rng, -3, 3);
    for (auto& x : w)
      if (sparse(rng)) x = kNegInf;
    inst.deltas.emplace_back(inst.config, std::move(w));
    inst.pushed.push_back(random_vec(inst.config.stack_vector_dim, rng));
  }
  return inst;
}

std::vector<double> dp_reading(const RandomInstance& inst) {
  auto state = sa::vpda_init<double>(inst.deltas.size(), inst.config, inst.r0);
  for (std::size_t t = 0; t < inst.deltas.size(); ++t)
    sa::vpda_update<double>(state, inst.deltas[t], inst.pushed[t]);
  return sa::vpda_reading(state);
}

}  // namespace

// ---------------------------------------------------------------------------
// Superposition

TEST(Superposition, PurePushReadsPushed) {
  sa::SuperpositionState<double> s(2);
  s = sa::sup_update<double>(s, {1, 0, 0}, std::vector<double>{0.3, -0.4});
  EXPECT_EQ(sa::sup_reading(s), (std::vector<double>{0.3, -0.4}));
}

TEST(Superposition, PopOfSingleElementReadsZero) {
  sa::SuperpositionState<double> s(2);
  s = sa::sup_update<double>(s, {1, 0, 0}, std::vector<double>{0.3, -0.4});
  s = sa::sup_update<double>(s, {0, 0, 1}, std::vector<double>{9, 9});
  EXPECT_EQ(sa::sup_reading(s), (std::vector<double>{0, 0}));
}

TEST(Superposition, HalfPushHalfNoop) {
  sa::SuperpositionState<double> s(1);
  s = sa::sup_update<double>(s, {1, 0, 0}, std::vector<double>{0.2});
  s = sa::sup_update<double>(s, {0.5, 0.5, 0}, std::vector<double>{0.8});
  EXPECT_DOUBLE_EQ(sa::sup_reading(s)[0], 0.5 * 0.8 + 0.5 * 0.2);
}

TEST(Superposition, InitialReadingIsZero) {
  sa::SuperpositionState<double> s(3);
  EXPECT_EQ(s.depth(), 1u);
  EXPECT_EQ(sa::sup_reading(s), (std::vector<double>{0, 0, 0}));
}

TEST(Superposition, PushesThenPopsReadZero) {
  for (std::size_t k = 1; k <= 6; ++k) {
    sa::SuperpositionState<double> s(1);
    for (std::size_t i = 0; i < k; ++i)
      s = sa::sup_update<double>(s, {1, 0, 0}, std::vector<double>{double(i + 1)});
    for (std::size_t i = 0; i < k; ++i)
      s = sa::sup_update<double>(s, {0, 0, 1}, std::vector<double>{-7});
    EXPECT_EQ(sa::sup_reading(s)[0], 0.0) << k;
    EXPECT_EQ(s.depth(), 2 * k);
  }
}

TEST(Superposition, Errors) {
  sa::SuperpositionState<double> s(2);
  EXPECT_THROW(sa::sup_update<double>(s, {1, 0, 0}, std::vector<double>{1}), sa::DimensionError);
  EXPECT_THROW(sa::sup_update<double>(s, {0.5, 0.6, 0}, std::vector<double>{1, 1}),
               sa::ParameterError);
}

TEST(SuperpositionProperty, RowsStayInConvexHullOfInputsAndZero) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 3;
    sa::SuperpositionState<double> s(m);
    std::vector<double> lo(m, 0.0), hi(m, 0.0);
    for (int t = 0; t < 15; ++t) {
      auto v = random_vec(m, rng);
      for (std::size_t d = 0; d < m; ++d) {
        lo[d] = std::min(lo[d], v[d]);
        hi[d] = std::max(hi[d], v[d]);
      }
      s = sa::sup_update<double>(s, random_triple(rng), v);
      EXPECT_EQ(s.depth(), std::size_t(t + 1));
      for (std::size_t i = 0; i < s.depth(); ++i)
        for (std::size_t d = 0; d < m; ++d) {
          EXPECT_GE(s.row(i)[d], lo[d] - 1e-12);
          EXPECT_LE(s.row(i)[d], hi[d] + 1e-12);
        }
    }
  }
}

TEST(SuperpositionProperty, NoopFreeConservation) {
  // Without no-ops, the column sum after a push is push*(v + S) + pop*(S - top)
  // where S is the previous column sum.
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    sa::SuperpositionState<double> s(1);
    for (int t = 0; t < 12; ++t) {
      const double p = u(rng);
      const double v = u(rng) * 2 - 1;
      double before = 0;
      for (std::size_t i = 0; i < s.depth(); ++i) before += s.row(i)[0];
      const double top = s.row(0)[0];
      s = sa::sup_update<double>(s, {p, 0, 1 - p}, std::vector<double>{v});
      double after = 0;
      for (std::size_t i = 0; i < s.depth(); ++i) after += s.row(i)[0];
      EXPECT_NEAR(after, p * (v + before) + (1 - p) * (before - top), 1e-12);
    }
  }
}

TEST(SuperpositionReadings, MatchesStepwiseState) {
  std::mt19937_64 rng(23);
  const std::size_t n = 9, m = 2;
  std::vector<double> a, v;
  sa::SuperpositionState<double> s(m);
  std::vector<double> expect;
  for (std::size_t t = 0; t < n; ++t) {
    auto tr = random_triple(rng);
    auto pv = random_vec(m, rng);
    a.insert(a.end(), {tr.push, tr.noop, tr.pop});
    v.insert(v.end(), pv.begin(), pv.end());
    s = sa::sup_update<double>(s, tr, pv);
    auto r = sa::sup_reading(s);
    expect.insert(expect.end(), r.begin(), r.end());
  }
  auto out = sa::superposition_readings(TD({n, 3}, a), TD({n, m}, v));
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-15);
}

// ---------------------------------------------------------------------------
// dVPDA

TEST(Vpda, InitialReading) {
  sa::VpdaConfig c{2, 2, 3};
  std::vector<double> r0{0.1, -0.2, 0.3};
  auto s = sa::vpda_init<double>(4, c, r0);
  auto r = sa::vpda_reading(s);
  ASSERT_EQ(r.size(), c.reading_dim());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], i < 3 ? r0[i] : 0.0, 1e-15);
  EXPECT_EQ(s.log_alpha(-1, 0, 0), 0.0);
  for (std::size_t q = 0; q < 2; ++q)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t r1 = 0; r1 < 2; ++r1)
        for (std::size_t y = 0; y < 2; ++y) {
          const double g = s.log_gamma(-1, 0, q, x, r1, y);
          if (q == 0 && x == 0 && r1 == 0 && y == 0)
            EXPECT_EQ(g, 0.0);
          else
            EXPECT_EQ(g, kNegInf);
        }
}

TEST(Vpda, SinglePush) {
  sa::VpdaConfig c{1, 1, 2};
  auto w = sa::TransitionWeights<double>::zero(c);
  w.push(0, 0, 0, 0) = 1.7;
  auto s = sa::vpda_init<double>(1, c, std::vector<double>{0.5, 0.5});
  sa::vpda_update<double>(s, w, std::vector<double>{0.25, -3});
  EXPECT_DOUBLE_EQ(s.log_alpha(1, 0, 0), 1.7);
  auto r = sa::vpda_reading(s);
  EXPECT_NEAR(r[0], 0.25, 1e-15);
  EXPECT_NEAR(r[1], -3, 1e-15);
}

TEST(Vpda, AllZeroWeightsReadZero) {
  sa::VpdaConfig c{2, 2, 2};
  auto s = sa::vpda_init<double>(3, c, std::vector<double>{1, 1});
  for (int t = 0; t < 3; ++t) {
    sa::vpda_update<double>(s, sa::TransitionWeights<double>::zero(c), std::vector<double>{1, 2});
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t y = 0; y < 2; ++y) EXPECT_EQ(s.log_alpha(t + 1, r, y), kNegInf);
    for (double v : sa::vpda_reading(s)) EXPECT_EQ(v, 0.0);
  }
}

TEST(Vpda, UpdatePastLengthThrows) {
  sa::VpdaConfig c{1, 1, 1};
  auto s = sa::vpda_init<double>(1, c, std::vector<double>{0});
  auto w = sa::TransitionWeights<double>::zero(c);
  sa::vpda_update<double>(s, w, std::vector<double>{1});
  EXPECT_THROW(sa::vpda_update<double>(s, w, std::vector<double>{1}), sa::ContractError);
}

TEST(Vpda, InvalidConfig) {
  EXPECT_THROW(sa::vpda_init<double>(2, sa::VpdaConfig{0, 1, 1}, std::vector<double>{0}),
               sa::ParameterError);
  EXPECT_THROW(sa::vpda_init<double>(2, sa::VpdaConfig{1, 1, 2}, std::vector<double>{0}),
               sa::DimensionError);
  EXPECT_THROW(sa::TransitionWeights<double>(sa::VpdaConfig{1, 1, 1}, std::vector<double>(2)),
               sa::DimensionError);
}

TEST(Vpda, CompetingPushAndReplace) {
  // |Q| = 1, |G| = 2, n = 3, frozen against the brute-force oracle.
  sa::VpdaConfig c{1, 2, 1};
  std::vector<sa::TransitionWeights<double>> deltas;
  std::vector<std::vector<double>> pushed{{0.9}, {-0.4}, {0.2}};
  for (int t = 0; t < 3; ++t) {
    auto w = sa::TransitionWeights<double>::zero(c);
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t y = 0; y < 2; ++y) {
        w.push(0, x, 0, y) = std::log(1.0 + x + 2 * y + t);
        w.replace(0, x, 0, y) = std::log(0.5 + y);
      }
    deltas.push_back(w);
  }
  RandomInstance inst{c, {0.1}, deltas, pushed};
  auto runs = sa::enumerate_runs(c, inst.r0, deltas, pushed);
  auto oracle = sa::oracle_reading(c, runs);
  auto dp = dp_reading(inst);
  for (std::size_t i = 0; i < dp.size(); ++i) EXPECT_NEAR(dp[i], oracle[i], 1e-12);
}

TEST(VpdaProperty, OracleEquivalence) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    auto inst = random_instance(rng, 2, 2, 3, 5);
    auto runs = sa::enumerate_runs(inst.config, inst.r0, inst.deltas, inst.pushed);
    auto oracle = sa::oracle_reading(inst.config, runs);
    auto dp = dp_reading(inst);
    ASSERT_EQ(dp.size(), oracle.size());
    for (std::size_t i = 0; i < dp.size(); ++i) EXPECT_NEAR(dp[i], oracle[i], 1e-6) << trial;
  }
}

TEST(VpdaProperty, ScalingOneTimestepLeavesReadingUnchanged) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = random_instance(rng, 2, 2, 2, 5);
    if (inst.deltas.empty()) continue;
    auto base = dp_reading(inst);
    const std::size_t t = trial % inst.deltas.size();
    std::vector<double> w(inst.deltas[t].log_weights().begin(), inst.deltas[t].log_weights().end());
    const double c = u(rng);
    for (auto& x : w) x += c;
    inst.deltas[t] = sa::TransitionWeights<double>(inst.config, w);
    auto scaled = dp_reading(inst);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], scaled[i], 1e-10);
  }
}

TEST(VpdaProperty, BatchedReadingsMatchReference) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t lanes = 1 + trial % 3, n = 1 + trial % 6;
    sa::VpdaConfig c{1 + std::size_t(trial % 2), 1 + std::size_t((trial / 2) % 3), 2};
    auto r0 = random_vec(c.stack_vector_dim, rng, 0, 1);
    std::vector<double> acts, push;
    std::vector<double> expect;
    for (std::size_t l = 0; l < lanes; ++l) {
      auto s = sa::vpda_init<double>(n, c, r0);
      for (std::size_t t = 0; t < n; ++t) {
        auto w = random_vec(c.action_dim(), rng, -3, 3);
        auto v = random_vec(c.stack_vector_dim, rng, 0, 1);
        acts.insert(acts.end(), w.begin(), w.end());
        push.insert(push.end(), v.begin(), v.end());
        sa::vpda_update<double>(s, sa::TransitionWeights<double>(c, w), v);
        auto r = sa::vpda_reading(s);
        expect.insert(expect.end(), r.begin(), r.end());
      }
    }
    auto out = sa::vpda_readings(TD({lanes * n, c.action_dim()}, acts),
                                 TD({lanes * n, c.stack_vector_dim}, push),
                                 TD({c.stack_vector_dim}, r0), c, lanes);
    ASSERT_EQ(out.size(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Run enumeration

TEST(EnumerateRuns, EmptyRun) {
  sa::VpdaConfig c{2, 2, 1};
  auto runs = sa::enumerate_runs(c, std::vector<double>{0.5}, {}, {});
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].weight, 1.0);
  EXPECT_EQ(runs[0].stack.size(), 1u);
}

TEST(EnumerateRuns, SinglePushOfWeightTwo) {
  sa::VpdaConfig c{1, 1, 1};
  auto w = sa::TransitionWeights<double>::zero(c);
  w.push(0, 0, 0, 0) = std::log(2.0);
  auto runs = sa::enumerate_runs(c, std::vector<double>{0}, {w}, {{1}});
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_DOUBLE_EQ(runs[0].weight, 2.0);
  EXPECT_EQ(runs[0].stack.size(), 2u);
}

TEST(EnumerateRuns, HandEnumerationTwoSymbols) {
  // All weights 1. Step 1 from [bot]: push 0/1, replace 0/1 (pop excluded) = 4.
  // Step 2: depth-2 runs (2 of them) have 2+2+1 = 5 successors, depth-1 runs 4.
  sa::VpdaConfig c{1, 2, 1};
  std::vector<sa::TransitionWeights<double>> d(
      2, sa::TransitionWeights<double>(c, std::vector<double>(c.action_dim(), 0.0)));
  auto runs = sa::enumerate_runs(c, std::vector<double>{0}, d, {{1}, {2}});
  EXPECT_EQ(runs.size(), 2u * 5u + 2u * 4u);
  std::size_t depth1 = 0, depth2 = 0, depth3 = 0;
  for (const auto& r : runs) {
    EXPECT_EQ(r.weight, 1.0);
    depth1 += r.stack.size() == 1;
    depth2 += r.stack.size() == 2;
    depth3 += r.stack.size() == 3;
  }
  EXPECT_EQ(depth1, 2u * 1u + 2u * 2u);  // pop back to bot, or replace twice
  EXPECT_EQ(depth2, 2u * 2u + 2u * 2u);
  EXPECT_EQ(depth3, 2u * 2u);
}

TEST(EnumerateRuns, CapRaisesResourceError) {
  sa::VpdaConfig c{2, 2, 1};
  std::vector<sa::TransitionWeights<double>> d(
      6, sa::TransitionWeights<double>(c, std::vector<double>(c.action_dim(), 0.0)));
  std::vector<std::vector<double>> v(6, std::vector<double>{1});
  EXPECT_THROW(sa::enumerate_runs(c, std::vector<double>{0}, d, v, 1000), sa::ResourceError);
}

TEST(OracleReading, SingleRunAndMean) {
  sa::VpdaConfig c{1, 1, 2};
  sa::Run a;
  a.weight = 3.5;
  a.stack = {{0, {1, 2}}};
  EXPECT_EQ(sa::oracle_reading(c, {a}), (std::vector<double>{1, 2}));
  sa::Run b = a;
  b.stack = {{0, {3, -2}}};
  b.weight = 3.5;
  EXPECT_EQ(sa::oracle_reading(c, {a, b}), (std::vector<double>{2, 0}));
  a.weight = 0;
  EXPECT_EQ(sa::oracle_reading(c, {a}), (std::vector<double>{0, 0}));
}

TEST(OracleReading, GlobalNormalizationAcrossEndpoints) {
  sa::VpdaConfig c{2, 1, 1};
  sa::Run a, b;
  a.weight = 1;
  a.state = 0;
  a.stack = {{0, {4}}};
  b.weight = 3;
  b.state = 1;
  b.stack = {{0, {8}}};
  auto r = sa::oracle_reading(c, {a, b});
  EXPECT_DOUBLE_EQ(r[0], 1.0);
  EXPECT_DOUBLE_EQ(r[1], 6.0);
}

// ---------------------------------------------------------------------------
// Superposition as a one-state one-symbol dVPDA

TEST(SpecialCase, AgreesWithoutPops) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 20;
    sa::SuperpositionState<double> sup(1);
    auto vp = sa::vpda_init<double>(n, sa::VpdaConfig{1, 1, 1}, std::vector<double>{0});
    for (std::size_t t = 0; t < n; ++t) {
      const double p = u(rng);
      const sa::ActionTriple<double> a{p, 1 - p, 0};
      const std::vector<double> v{u(rng)};
      sup = sa::sup_update<double>(sup, a, v);
      sa::vpda_update<double>(vp, single_weights(a), v);
      EXPECT_NEAR(sa::sup_reading(sup)[0], sa::vpda_reading(vp)[0], 1e-12);
    }
  }
}

TEST(SpecialCase, AgreesOnDeterministicActionsThatNeverPopBottom) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> pick(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 20;
    sa::SuperpositionState<double> sup(1);
    auto vp = sa::vpda_init<double>(n, sa::VpdaConfig{1, 1, 1}, std::vector<double>{0});
    std::size_t depth = 0;
    for (std::size_t t = 0; t < n; ++t) {
      int k = pick(rng);
      if (k == 2 && depth == 0) k = 0;
      depth += k == 0 ? 1 : 0;
      depth -= k == 2 ? 1 : 0;
      const sa::ActionTriple<double> a{k == 0 ? 1.0 : 0.0, k == 1 ? 1.0 : 0.0, k == 2 ? 1.0 : 0.0};
      const std::vector<double> v{u(rng)};
      sup = sa::sup_update<double>(sup, a, v);
      sa::vpda_update<double>(vp, single_weights(a), v);
      EXPECT_NEAR(sa::sup_reading(sup)[0], sa::vpda_reading(vp)[0], 1e-12);
    }
  }
}

TEST(SpecialCase, PopBelowBottomIsRenormalizedByVpda) {
  // At t = 1 a pop has nowhere to go. The superposition stack keeps its
  // weight on a zero row; the dVPDA drops the run and renormalizes.
  const sa::ActionTriple<double> a{0.5, 0.3, 0.2};
  const std::vector<double> v{0.8};
  sa::SuperpositionState<double> sup(1);
  sup = sa::sup_update<double>(sup, a, v);
  auto vp = sa::vpda_init<double>(1, sa::VpdaConfig{1, 1, 1}, std::vector<double>{0});
  sa::vpda_update<double>(vp, single_weights(a), v);
  EXPECT_NEAR(sa::sup_reading(sup)[0], 0.5 * 0.8, 1e-15);
  EXPECT_NEAR(sa::vpda_reading(vp)[0], 0.5 * 0.8 / (0.5 + 0.3), 1e-15);
}

// ---------------------------------------------------------------------------
// Gradients

TEST(StackGradients, SuperpositionReadings) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 6, m = 1 + trial % 3;
    auto pushed = random_vec(n * m, rng);
    auto logits = random_vec(n * 3, rng, -2, 2);
    auto f = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      sa::Tensor<T> v({n, m}, std::vector<T>(pushed.begin(), pushed.end()));
      return sa::superposition_readings(sa::softmax(x), v);
    };
    auto r64 = sa::grad_check(f, TD({n, 3}, logits));
    EXPECT_LE(r64.max_rel_error, 1e-6) << trial;
    std::vector<float> lf(logits.begin(), logits.end());
    auto r32 = sa::grad_check(f, sa::Tensor<float>({n, 3}, lf), 1e-6, 1e-4);
    EXPECT_LE(r32.max_rel_error, 1e-4) << trial;
    auto g = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      sa::Tensor<T> a({n, 3}, std::vector<T>(logits.begin(), logits.end()));
      return sa::superposition_readings(sa::softmax(a), x);
    };
    EXPECT_LE(sa::grad_check(g, TD({n, m}, pushed)).max_rel_error, 1e-6) << trial;
  }
}

TEST(StackGradients, VpdaReadings) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t lanes = 1 + trial % 2, n = 1 + trial % 4;
    sa::VpdaConfig c{1 + std::size_t(trial % 2), 1 + std::size_t((trial / 2) % 2), 2};
    const std::size_t D = c.action_dim(), m = c.stack_vector_dim;
    auto acts = random_vec(lanes * n * D, rng, -2, 2);
    auto pushed = random_vec(lanes * n * m, rng, 0, 1);
    auto r0 = random_vec(m, rng, 0, 1);
    auto conv = [](const std::vector<double>& v, auto tag) {
      using T = decltype(tag);
      return std::vector<T>(v.begin(), v.end());
    };
    auto fa = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      return sa::vpda_readings(x, sa::Tensor<T>({lanes * n, m}, conv(pushed, T{})),
                               sa::Tensor<T>({m}, conv(r0, T{})), c, lanes);
    };
    auto fp = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      return sa::vpda_readings(sa::Tensor<T>({lanes * n, D}, conv(acts, T{})), x,
                               sa::Tensor<T>({m}, conv(r0, T{})), c, lanes);
    };
    auto fr = [&](const auto& x) {
      using T = typename std::decay_t<decltype(x)>::value_type;
      return sa::vpda_readings(sa::Tensor<T>({lanes * n, D}, conv(acts, T{})),
                               sa::Tensor<T>({lanes * n, m}, conv(pushed, T{})), x, c, lanes);
    };
    // Many outputs feed the contraction, so a wider step keeps central
    // differences clear of roundoff.
    const double eps = 1e-4;
    EXPECT_LE(sa::grad_check(fa, TD({lanes * n, D}, acts), eps).max_rel_error, 1e-6) << trial;
    EXPECT_LE(sa::grad_check(fp, TD({lanes * n, m}, pushed), eps).max_rel_error, 1e-6) << trial;
    EXPECT_LE(sa::grad_check(fr, TD({m}, r0), eps).max_rel_error, 1e-6) << trial;
    auto r32 = sa::grad_check(fa, sa::Tensor<float>({lanes * n, D}, conv(acts, float{})), eps,
                              1e-4);
    EXPECT_LE(r32.max_rel_error, 1e-4) << trial;
  }
}

TEST(StackGradients, VpdaWithLogZeroWeights) {
  // -inf entries must not poison gradients of the remaining ones.
  std::mt19937_64 rng(53);
  sa::VpdaConfig c{2, 2, 1};
  const std::size_t n = 4, D = c.action_dim();
  auto acts = random_vec(n * D, rng, -2, 2);
  for (std::size_t i = 0; i < acts.size(); i += 3) acts[i] = kNegInf;
  auto pushed = random_vec(n, rng, 0, 1);
  sa::Tape<double> tape;
  sa::Tape<double>::Scope scope(tape);
  auto ap = TD::parameter({n, D}, acts);
  auto out = sa::vpda_readings(ap, TD({n, 1}, pushed), TD({1}, {0.5}), c);
  tape.backward(sa::sum(out));
  for (std::size_t i = 0; i < acts.size(); ++i) {
    EXPECT_TRUE(std::isfinite(ap.grad()[i])) << i;
    if (!std::isfinite(acts[i])) EXPECT_EQ(ap.grad()[i], 0.0);
  }
}
