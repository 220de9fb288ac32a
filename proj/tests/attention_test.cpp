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

#include "stackattn/attention.hpp"
#include "stackattn/grad_check.hpp"

namespace sa = stackattn;
using TD = sa::Tensor<double>;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <typename T>
sa::Tensor<T> as(const sa::Shape& s, const std::vector<double>& v) {
  return sa::Tensor<T>(s, std::vector<T>(v.begin(), v.end()));
}

// Parameters of one attention sublayer held at 64-bit and materialized at
// any precision, with one slot optionally replaced by the grad-check input.
struct Layer {
  sa::StackAttentionConfig stack;
  sa::SdpaConfig sdpa;
  bool is_sdpa = false;
  std::size_t d = 0;
  std::vector<sa::Shape> shapes;
  std::vector<std::vector<double>> values;

  static Layer make_sdpa(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
    Layer l;
    l.d = d;
    l.is_sdpa = true;
    l.sdpa = {d, heads, true, 0.0};
    l.shapes = {{d, 3 * d}, {3 * d}, {d, d}, {d}};
    for (const auto& s : l.shapes) l.values.push_back(random_vec(sa::shape_size(s), rng, -0.5, 0.5));
    return l;
  }
  static Layer make_stack(std::size_t d, sa::StackAttentionConfig c, std::mt19937_64& rng) {
    Layer l;
    l.d = d;
    l.stack = c;
    l.shapes = {{d, c.action_dim()}, {d, c.stack_vector_dim}, {c.reading_dim(), d}};
    if (c.variant == sa::StackVariant::kNondeterministic) l.shapes.push_back({c.stack_vector_dim});
    for (const auto& s : l.shapes) l.values.push_back(random_vec(sa::shape_size(s), rng, -1, 1));
    return l;
  }

  template <typename T>
  std::vector<sa::Tensor<T>> tensors(int slot, const sa::Tensor<T>* x) const {
    std::vector<sa::Tensor<T>> out;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      out.push_back(int(i) == slot ? *x : as<T>(shapes[i], values[i]));
    return out;
  }

  template <typename T>
  sa::Tensor<T> apply(const sa::Tensor<T>& input, std::size_t lanes, int slot = -1,
                      const sa::Tensor<T>* x = nullptr) const {
    auto p = tensors<T>(slot, x);
    std::mt19937_64 unused(0);
    if (is_sdpa) {
      sa::SdpaParams<T> sp{p[0], p[1], p[2], p[3]};
      return sa::sdpa_multihead(input, sdpa, sp, sa::Mode::kEval, unused, lanes);
    }
    sa::StackAttentionParams<T> sp{p[0], p[1], p[2], p.size() > 3 ? p[3] : sa::Tensor<T>()};
    return sa::stack_attention(input, stack, sp, lanes);
  }
};

std::vector<Layer> all_variants(std::size_t d, std::mt19937_64& rng) {
  return {Layer::make_sdpa(d, 2, rng),
          Layer::make_stack(d, {sa::StackVariant::kSuperposition, 3, 2, 3}, rng),
          Layer::make_stack(d, {sa::StackVariant::kNondeterministic, 2, 2, 2}, rng)};
}

}  // namespace

TEST(Sdpa, ZeroQueryKeyAveragesCausalPrefix) {
  // With W_q = W_k = 0 every score is 0, so row t is the mean of v_1..v_t.
  const std::size_t d = 4, n = 5;
  std::mt19937_64 rng(1);
  auto x = random_vec(n * d, rng);
  std::vector<double> w_in(d * 3 * d, 0.0), b_in(3 * d, 0.0), w_out(d * d, 0.0), b_out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    w_in[i * 3 * d + 2 * d + i] = 1;  // V = X
    w_out[i * d + i] = 1;
  }
  sa::SdpaParams<double> p{TD({d, 3 * d}, w_in), TD({3 * d}, b_in), TD({d, d}, w_out), TD({d}, b_out)};
  std::mt19937_64 unused(0);
  auto y = sa::sdpa_multihead(TD({n, d}, x), sa::SdpaConfig{d, 2, true, 0.0}, p, sa::Mode::kEval, unused);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0;
      for (std::size_t s = 0; s <= t; ++s) mean += x[s * d + c];
      EXPECT_NEAR(y[t * d + c], mean / double(t + 1), 1e-12);
    }
  }
}

TEST(Sdpa, MatchesDirectLoopReference) {
  const std::size_t d = 4, n = 3, h = 2;
  std::mt19937_64 rng(2);
  Layer two = Layer::make_sdpa(d, h, rng);
  auto x = random_vec(n * d, rng);
  auto y = two.apply(TD({n, d}, x), 1);
  const auto& W = two.values[0];
  const auto& B = two.values[1];
  std::vector<double> qkv(n * 3 * d);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < 3 * d; ++j) {
      double s = B[j];
      for (std::size_t i = 0; i < d; ++i) s += x[t * d + i] * W[i * 3 * d + j];
      qkv[t * 3 * d + j] = s;
    }
  const std::size_t dk = d / h;
  std::vector<double> concat(n * d, 0.0);
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<double> sc(t + 1);
      double mx = -1e300;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0;
        for (std::size_t k = 0; k < dk; ++k)
          dot += qkv[t * 3 * d + head * dk + k] * qkv[s * 3 * d + d + head * dk + k];
        sc[s] = dot / std::sqrt(double(dk));
        mx = std::max(mx, sc[s]);
      }
      double z = 0;
      for (auto& v : sc) z += (v = std::exp(v - mx));
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t k = 0; k < dk; ++k)
          concat[t * d + head * dk + k] += sc[s] / z * qkv[s * 3 * d + 2 * d + head * dk + k];
    }
  }
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      double s = two.values[3][j];
      for (std::size_t i = 0; i < d; ++i) s += concat[t * d + i] * two.values[2][i * d + j];
      EXPECT_NEAR(y[t * d + j], s, 1e-12);
    }
}

TEST(Sdpa, RejectsIndivisibleHeads) {
  std::mt19937_64 unused(0);
  sa::SdpaParams<double> p;
  EXPECT_THROW(sa::sdpa_multihead(TD({2, 6}, std::vector<double>(12, 0.0)), sa::SdpaConfig{6, 4, true, 0},
                                  p, sa::Mode::kEval, unused),
               sa::ParameterError);
}

TEST(AttentionProperty, CausalForEveryVariant) {
  // Perturbing input row j leaves every output row before j unchanged.
  std::mt19937_64 rng(3);
  const std::size_t d = 4;
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t n = 3 + trial;
    for (const Layer& layer : all_variants(d, rng)) {
      auto x = random_vec(n * d, rng);
      const auto base = layer.apply(TD({n, d}, x), 1);
      const std::size_t j = 1 + rng() % (n - 1);
      auto xp = x;
      for (std::size_t c = 0; c < d; ++c) xp[j * d + c] += 0.7;
      const auto pert = layer.apply(TD({n, d}, xp), 1);
      for (std::size_t i = 0; i < j * d; ++i) EXPECT_EQ(base[i], pert[i]) << "trial " << trial;
      double moved = 0;
      for (std::size_t i = j * d; i < n * d; ++i) moved += std::abs(base[i] - pert[i]);
      EXPECT_GT(moved, 0.0);
    }
  }
}

TEST(AttentionProperty, LanesMatchSeparateSequences) {
  std::mt19937_64 rng(4);
  const std::size_t d = 4, n = 5, lanes = 3;
  for (const Layer& layer : all_variants(d, rng)) {
    auto x = random_vec(lanes * n * d, rng);
    const auto joint = layer.apply(TD({lanes * n, d}, x), lanes);
    for (std::size_t l = 0; l < lanes; ++l) {
      std::vector<double> part(x.begin() + l * n * d, x.begin() + (l + 1) * n * d);
      const auto alone = layer.apply(TD({n, d}, part), 1);
      for (std::size_t i = 0; i < n * d; ++i) EXPECT_NEAR(joint[l * n * d + i], alone[i], 1e-12);
    }
  }
}

TEST(Sublayer, ZeroFunctionIsIdentity) {
  std::mt19937_64 rng(5);
  auto h = random_vec(12, rng);
  TD g({4}, {1, 1, 1, 1}), b({4}, {0, 0, 0, 0});
  auto y = sa::sublayer_apply([](const TD& x) { return sa::scale(x, 0.0); }, TD({3, 4}, h), g, b, 0.0,
                              sa::Mode::kEval, rng);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(y[i], h[i]);
}

TEST(Sublayer, AddsFunctionOfNormalizedInput) {
  // f = identity: output = h + LayerNorm(h).
  TD h({1, 4}, {1, 2, 3, 6});
  TD g({4}, {1, 1, 1, 1}), b({4}, {0, 0, 0, 0});
  std::mt19937_64 rng(0);
  auto y = sa::sublayer_apply([](const TD& x) { return x; }, h, g, b, 0.0, sa::Mode::kEval, rng);
  const double mean = 3, var = (4 + 1 + 0 + 9) / 4.0;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], h[i] + (h[i] - mean) / std::sqrt(var + 1e-5), 1e-9);
}

TEST(Sublayer, ShapeMismatchIsContractError) {
  std::mt19937_64 rng(0);
  TD h({2, 4}, std::vector<double>(8, 1.0));
  TD g({4}, {1, 1, 1, 1}), b({4}, {0, 0, 0, 0});
  EXPECT_THROW(sa::sublayer_apply([](const TD& x) { return sa::slice_cols(x, 0, 2); }, h, g, b, 0.0,
                                  sa::Mode::kEval, rng),
               sa::ContractError);
}

TEST(Sinusoidal, KnownValues) {
  auto pe = sa::sinusoidal_encoding<double>(3, 4);
  EXPECT_EQ(pe[0], 0.0);
  EXPECT_EQ(pe[1], 1.0);
  EXPECT_NEAR(pe[4], std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe[5], std::cos(1.0), 1e-15);
  EXPECT_NEAR(pe[6], std::sin(1.0 / 100.0), 1e-15);
  EXPECT_NEAR(pe[2 * 4 + 3], std::cos(2.0 / 100.0), 1e-15);
  EXPECT_THROW(sa::sinusoidal_encoding<double>(2, 3), sa::ParameterError);
}

TEST(SuperpositionAttention, UsesActionOrderPushNoopPop) {
  // A single column of W_a that strongly favours push makes r_1 = v_1.
  const std::size_t d = 2, m = 2;
  TD x({1, d}, {1.0, 0.0});
  sa::StackAttentionParams<double> p;
  p.action_weight = TD({d, 3}, {40, 0, 0, 0, 0, 0});
  p.push_weight = TD({d, m}, {0.5, -0.5, 0, 0});
  p.output_weight = TD({m, d}, {1, 0, 0, 1});
  auto y = sa::superposition_attention(x, p);
  EXPECT_NEAR(y[0], 1 / (1 + std::exp(-0.5)), 1e-12);
  EXPECT_NEAR(y[1], 1 / (1 + std::exp(0.5)), 1e-12);
}

TEST(AttentionGradients, EverySublayerInputAndParameter) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t d = 4, n = 2 + trial % 3, lanes = 1 + trial % 2;
    for (const Layer& layer : all_variants(d, rng)) {
      const auto x = random_vec(lanes * n * d, rng);
      auto fx = [&](const auto& in) { return layer.apply(in, lanes); };
      EXPECT_LE(sa::grad_check(fx, TD({lanes * n, d}, x), 1e-5).max_rel_error, 1e-6);
      auto x32 = as<float>({lanes * n, d}, x);
      EXPECT_LE(sa::grad_check(fx, x32, 1e-4, 1e-4).max_rel_error, 1e-4);
      for (std::size_t slot = 0; slot < layer.shapes.size(); ++slot) {
        auto fp = [&](const auto& w) {
          using T = typename std::decay_t<decltype(w)>::value_type;
          return layer.apply(as<T>({lanes * n, d}, x), lanes, int(slot), &w);
        };
        EXPECT_LE(sa::grad_check(fp, TD(layer.shapes[slot], layer.values[slot]), 1e-5).max_rel_error,
                  1e-6)
            << "slot " << slot;
      }
    }
  }
}

TEST(AttentionGradients, SublayerWrapperAndLayerNorm) {
  std::mt19937_64 rng(7);
  const std::size_t d = 4, n = 3;
  Layer layer = Layer::make_stack(d, {sa::StackVariant::kSuperposition, 3, 2, 3}, rng);
  const auto h = random_vec(n * d, rng);
  const auto g = random_vec(d, rng, 0.5, 1.5), b = random_vec(d, rng);
  auto f = [&](const auto& in) {
    using T = typename std::decay_t<decltype(in)>::value_type;
    std::mt19937_64 unused(0);
    return sa::sublayer_apply([&](const sa::Tensor<T>& x) { return layer.apply(x, 1); }, in,
                              as<T>({d}, g), as<T>({d}, b), 0.1, sa::Mode::kEval, unused);
  };
  EXPECT_LE(sa::grad_check(f, TD({n, d}, h), 1e-5).max_rel_error, 1e-6);
  auto fg = [&](const auto& gain) {
    using T = typename std::decay_t<decltype(gain)>::value_type;
    return sa::layer_norm(as<T>({n, d}, h), gain, as<T>({d}, b));
  };
  EXPECT_LE(sa::grad_check(fg, TD({d}, g)).max_rel_error, 1e-6);
}
