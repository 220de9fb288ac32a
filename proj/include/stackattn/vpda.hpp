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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "stackattn/errors.hpp"
#include "stackattn/logspace.hpp"
#include "stackattn/tensor.hpp"

// Differentiable vector pushdown automaton (dVPDA).
//
// Stack entries pair a symbol from Gamma with an m-vector. At every timestep
// the automaton takes one normal-form transition (push, replace or pop) with a
// nonnegative weight, and the reading is the expected top vector over all runs,
// normalized by the total weight of runs, split per (state, top symbol).
//
// The runs are summed with Lang's dynamic program over three tables:
//   gamma[i][t](q,x -> r,y)  inner weights: runs from time i with x on top in
//                            state q, to time t in state r with y on top,
//                            where y sits directly on x;
//   zeta[i][t](q,x -> r,y)   the same weighted by the vector of the y element;
//   alpha[t](r,y)            forward weights from the initial configuration.
// i ranges over [-1, n-1] and is stored at offset i+1. Everything is kept in
// log space; zeta is kept as signed logs since pushed vectors may be negative.

namespace stackattn {

struct VpdaConfig {
  std::size_t num_states = 1;
  std::size_t num_symbols = 1;
  std::size_t stack_vector_dim = 1;

  static constexpr std::size_t kStartState = 0;
  static constexpr std::size_t kBottomSymbol = 0;

  void validate() const {
    if (num_states < 1 || num_symbols < 1 || stack_vector_dim < 1) {
      throw ParameterError("VPDA needs at least one state, one symbol and m >= 1");
    }
  }
  /// Extent of the per-(q, x, r) action block: |G| pushes, |G| replaces, 1 pop.
  std::size_t actions_per_target() const { return 2 * num_symbols + 1; }
  /// |Q| * |G| * |Q| * (2|G| + 1).
  std::size_t action_dim() const {
    return num_states * num_symbols * num_states * actions_per_target();
  }
  /// |Q| * |G| * m.
  std::size_t reading_dim() const { return num_states * num_symbols * stack_vector_dim; }
  std::size_t state_symbol_pairs() const { return num_states * num_symbols; }
};

/// Log transition weights for one timestep. Layout per (q, x, r): |G| push
/// targets, |G| replace targets, then the pop weight.
template <typename T>
class TransitionWeights {
 public:
  TransitionWeights(const VpdaConfig& config, std::vector<T> log_weights)
      : config_(config), w_(std::move(log_weights)) {
    if (w_.size() != config.action_dim()) {
      throw DimensionError("transition weights: expected " + std::to_string(config.action_dim()) +
                           " entries, got " + std::to_string(w_.size()));
    }
  }
  static TransitionWeights zero(const VpdaConfig& config) {
    return TransitionWeights(config, std::vector<T>(config.action_dim(), log_zero<T>()));
  }

  static std::size_t index(const VpdaConfig& c, std::size_t q, std::size_t x, std::size_t r,
                           std::size_t k) {
    return ((q * c.num_symbols + x) * c.num_states + r) * c.actions_per_target() + k;
  }

  T push(std::size_t q, std::size_t x, std::size_t r, std::size_t y) const {
    return w_[index(config_, q, x, r, y)];
  }
  T replace(std::size_t q, std::size_t x, std::size_t r, std::size_t y) const {
    return w_[index(config_, q, x, r, config_.num_symbols + y)];
  }
  T pop(std::size_t q, std::size_t x, std::size_t r) const {
    return w_[index(config_, q, x, r, 2 * config_.num_symbols)];
  }
  T& push(std::size_t q, std::size_t x, std::size_t r, std::size_t y) {
    return w_[index(config_, q, x, r, y)];
  }
  T& replace(std::size_t q, std::size_t x, std::size_t r, std::size_t y) {
    return w_[index(config_, q, x, r, config_.num_symbols + y)];
  }
  T& pop(std::size_t q, std::size_t x, std::size_t r) {
    return w_[index(config_, q, x, r, 2 * config_.num_symbols)];
  }

  const VpdaConfig& config() const { return config_; }
  std::span<const T> log_weights() const { return w_; }

 private:
  VpdaConfig config_;
  std::vector<T> w_;
};

namespace detail {

// Lane vectors: one cache line of T. The chart stores every table with the
// sequence (lane) index innermost and the lane count rounded up to a whole
// number of lane vectors, so the recurrences run as fixed-width SIMD code.
template <typename T>
inline constexpr std::size_t kLaneWidth = 64 / sizeof(T);
template <typename T>
using LaneVec = Eigen::Array<T, kLaneWidth<T>, 1>;
template <typename T>
using LaneRef = Eigen::Map<LaneVec<T>, Eigen::Aligned64>;
template <typename T>
using LaneCRef = Eigen::Map<const LaneVec<T>, Eigen::Aligned64>;

template <typename T>
struct CacheLineAllocator {
  using value_type = T;
  CacheLineAllocator() = default;
  template <typename U>
  CacheLineAllocator(const CacheLineAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t{64}); }
  template <typename U>
  bool operator==(const CacheLineAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using LaneBuffer = std::vector<T, CacheLineAllocator<T>>;

// exp with exp(-inf) = 0 exactly; vectorized exp clamps its argument and
// would otherwise leave a tiny mass on log-zero entries.
template <typename T>
LaneVec<T> masked_exp(const LaneVec<T>& x) {
  return (x == -std::numeric_limits<T>::infinity()).select(T(0), x.exp());
}

// Log-zero replaced by +inf, so that exp(x - safe) is 0 rather than NaN.
template <typename T>
LaneVec<T> safe_shift(const LaneVec<T>& x) {
  constexpr T kInf = std::numeric_limits<T>::infinity();
  return (x == -kInf).select(kInf, x);
}

// Lang's inner/forward tables for a batch of sequences of equal length.
template <typename T>
class LangChart {
 public:
  static constexpr std::size_t kW = kLaneWidth<T>;

  LangChart(const VpdaConfig& config, std::size_t n, std::size_t lanes)
      : n_(n), lanes_((lanes + kW - 1) / kW * kW), Q_(config.num_states),
        G_(config.num_symbols), QG_(Q_ * G_), K_(config.actions_per_target()),
        D_(config.action_dim()) {
    config.validate();
    const std::size_t L = lanes_;
    const double cells = double(n + 1) * double(n + 1) * double(QG_) * double(QG_) * double(L);
    if (cells > 2e8) throw ResourceError("VPDA chart too large for sequence length");
    try {
      gamma_.assign(static_cast<std::size_t>(cells), log_zero<T>());
      alpha_.assign((n + 2) * QG_ * L, log_zero<T>());
      gamma_pop_.resize(n + 1);
      b_.resize(n + 1);
      delta_.assign((n + 1) * D_ * L, log_zero<T>());
    } catch (const std::bad_alloc&) {
      throw ResourceError("VPDA chart allocation failed");
    }
    // gamma[-1][0](q0,bot -> q0,bot) = 1 and alpha[-1](q0,bot) = alpha[0](q0,bot) = 1.
    const std::size_t s0 = VpdaConfig::kStartState * G_ + VpdaConfig::kBottomSymbol;
    for (std::size_t b = 0; b < L; ++b) {
      gamma_[g_index(0, 0, s0, s0) + b] = T(0);
      alpha_[a_index(0, s0) + b] = T(0);
      alpha_[a_index(1, s0) + b] = T(0);
    }
    buf_.resize((QG_ + Q_ * (n + 1) + 2) * L);
  }

  std::size_t length() const { return n_; }
  /// Internal lane count (a multiple of the lane width).
  std::size_t lanes() const { return lanes_; }

  // Offsets into the lane-innermost tables; i1 = i + 1, t1 = t + 1.
  std::size_t g_index(std::size_t i1, std::size_t t, std::size_t qx, std::size_t ry) const {
    return (((i1 * (n_ + 1) + t) * QG_ + qx) * QG_ + ry) * lanes_;
  }
  std::size_t a_index(std::size_t t1, std::size_t ry) const { return (t1 * QG_ + ry) * lanes_; }
  std::size_t gp_index(std::size_t k, std::size_t uy, std::size_t r) const {
    return ((k * QG_ + uy) * Q_ + r) * lanes_;
  }
  std::size_t d_index(std::size_t t, std::size_t flat) const {
    return (t * D_ + flat) * lanes_;
  }
  std::size_t b_index(std::size_t i1, std::size_t ry) const { return (i1 * QG_ + ry) * lanes_; }

  const LaneBuffer<T>& gamma() const { return gamma_; }
  const LaneBuffer<T>& alpha() const { return alpha_; }
  const LaneBuffer<T>& gamma_pop(std::size_t t) const { return gamma_pop_[t]; }
  const LaneBuffer<T>& delta() const { return delta_; }
  /// B[t](i; r,y): weight of runs ending at t whose top was pushed at i+1.
  const LaneBuffer<T>& top_origin(std::size_t t) const { return b_[t]; }

  /// Stores lane b's transition log-weights for step t (1-based).
  void set_delta(std::size_t t, std::size_t b, std::span<const T> w) {
    for (std::size_t j = 0; j < D_; ++j) delta_[d_index(t, j) + b] = w[j];
  }

  /// Fills gamma[.][t], the pop helper and B for t, then alpha[t].
  void compute_column(std::size_t t) {
    const std::size_t L = lanes_;
    const T* dt = delta_.data() + d_index(t, 0);
    auto delta_at = [&](std::size_t qx, std::size_t r, std::size_t k) {
      return dt + ((qx * Q_ + r) * K_ + k) * L;
    };

    // gamma'[k](u,y -> r) = sum_{s,z} gamma[k][t-1](u,y -> s,z) * pop_t(s,z,r).
    auto& gp = gamma_pop_[t];
    gp.assign((t >= 1 ? t - 1 : 0) * QG_ * Q_ * L, log_zero<T>());
    for (std::size_t k = 0; k + 2 <= t; ++k) {
      for (std::size_t uy = 0; uy < QG_; ++uy) {
        for (std::size_t r = 0; r < Q_; ++r) {
          std::size_t nt = 0;
          for (std::size_t sz = 0; sz < QG_; ++sz) {
            add_term(nt++, &gamma_[g_index(k + 1, t - 1, uy, sz)], delta_at(sz, r, 2 * G_));
          }
          finish(nt, &gp[gp_index(k, uy, r)]);
        }
      }
    }

    for (std::size_t i1 = 0; i1 <= t; ++i1) {  // i = i1 - 1 in [-1, t-1]
      for (std::size_t qx = 0; qx < QG_; ++qx) {
        for (std::size_t r = 0; r < Q_; ++r) {
          for (std::size_t y = 0; y < G_; ++y) {
            const std::size_t ry = r * G_ + y;
            std::size_t nt = 0;
            if (i1 == t) {
              // push: only the span that starts right before t.
              copy_term(nt++, delta_at(qx, r, y));
            } else {
              // replace
              for (std::size_t sz = 0; sz < QG_; ++sz) {
                add_term(nt++, &gamma_[g_index(i1, t - 1, qx, sz)], delta_at(sz, r, G_ + y));
              }
              // pop: k from i+1 to t-2, i.e. k from i1 to t-2.
              for (std::size_t k = i1; k + 2 <= t; ++k) {
                for (std::size_t u = 0; u < Q_; ++u) {
                  const std::size_t uy = u * G_ + y;
                  add_term(nt++, &gamma_[g_index(i1, k, qx, uy)], &gp[gp_index(k, uy, r)]);
                }
              }
            }
            finish(nt, &gamma_[g_index(i1, t, qx, ry)]);
          }
        }
      }
    }

    // B[t](i; r,y) = sum_{q,x} alpha[i](q,x) * gamma[i][t](q,x -> r,y) and
    // alpha[t](r,y) = sum_i B[t](i; r,y).
    auto& bt = b_[t];
    bt.assign((t + 1) * QG_ * L, log_zero<T>());
    for (std::size_t i1 = 0; i1 <= t; ++i1) {
      for (std::size_t ry = 0; ry < QG_; ++ry) {
        std::size_t nt = 0;
        for (std::size_t qx = 0; qx < QG_; ++qx) {
          add_term(nt++, &alpha_[a_index(i1, qx)], &gamma_[g_index(i1, t, qx, ry)]);
        }
        finish(nt, &bt[b_index(i1, ry)]);
      }
    }
    ensure_buffer(t + 1);
    for (std::size_t ry = 0; ry < QG_; ++ry) {
      std::size_t nt = 0;
      for (std::size_t i1 = 0; i1 <= t; ++i1) copy_term(nt++, &bt[b_index(i1, ry)]);
      finish(nt, &alpha_[a_index(t + 1, ry)]);
    }
  }

  void ensure_buffer(std::size_t terms) {
    if (buf_.size() < terms * lanes_) buf_.resize(terms * lanes_);
  }
  void add_term(std::size_t j, const T* a, const T* b) {
    T* out = buf_.data() + j * lanes_;
    for (std::size_t c = 0; c < lanes_; c += kW)
      LaneRef<T>(out + c) = LaneCRef<T>(a + c) + LaneCRef<T>(b + c);
  }
  void copy_term(std::size_t j, const T* a) {
    std::copy_n(a, lanes_, buf_.data() + j * lanes_);
  }
  // Per-lane log-sum-exp of the first nt buffered terms.
  void finish(std::size_t nt, T* out) {
    const std::size_t L = lanes_;
    for (std::size_t c = 0; c < L; c += kW) {
      LaneVec<T> mx = LaneVec<T>::Constant(log_zero<T>());
      for (std::size_t j = 0; j < nt; ++j) mx = mx.max(LaneCRef<T>(buf_.data() + j * L + c));
      // An all-zero lane shifts by 0 so that the sum is 0 and its log -inf.
      mx = (mx == log_zero<T>()).select(T(0), mx);
      LaneVec<T> sum = LaneVec<T>::Zero();
      for (std::size_t j = 0; j < nt; ++j)
        sum += masked_exp<T>(LaneCRef<T>(buf_.data() + j * L + c) - mx);
      LaneRef<T>(out + c) = mx + sum.log();
    }
  }

 private:
  std::size_t n_, lanes_, Q_, G_, QG_, K_, D_;
  LaneBuffer<T> gamma_;
  LaneBuffer<T> alpha_;
  std::vector<LaneBuffer<T>> gamma_pop_;
  std::vector<LaneBuffer<T>> b_;
  LaneBuffer<T> delta_;
  LaneBuffer<T> buf_;
};

}  // namespace detail

/// Stack state (t, gamma, zeta, alpha) pre-allocated for n updates.
template <typename T>
class VpdaState {
 public:
  VpdaState(std::size_t n, const VpdaConfig& config, std::span<const T> r0)
      : config_(config), chart_(config, n, 1) {
    config.validate();
    const std::size_t m = config.stack_vector_dim;
    if (r0.size() != m) throw DimensionError("vpda_init: r0 must have dimension m");
    try {
      zeta_log_.assign(chart_.gamma().size() / chart_.lanes() * m, log_zero<T>());
      zeta_sign_.assign(chart_.gamma().size() / chart_.lanes() * m, 1);
    } catch (const std::bad_alloc&) {
      throw ResourceError("VPDA state allocation failed");
    }
    const std::size_t s0 = VpdaConfig::kStartState * config.num_symbols + VpdaConfig::kBottomSymbol;
    for (std::size_t d = 0; d < m; ++d) {
      const auto v = SignedLog<T>::from_value(r0[d]);
      zeta_log_[z_index(0, 0, s0, s0, d)] = v.log_abs;
      zeta_sign_[z_index(0, 0, s0, s0, d)] = static_cast<std::int8_t>(v.sign);
    }
  }

  std::size_t timestep() const { return t_; }
  std::size_t length() const { return chart_.length(); }
  const VpdaConfig& config() const { return config_; }

  /// log gamma[i][t](q,x -> r,y), i >= -1.
  T log_gamma(long i, std::size_t t, std::size_t q, std::size_t x, std::size_t r,
              std::size_t y) const {
    const std::size_t G = config_.num_symbols;
    return chart_.gamma()[chart_.g_index(static_cast<std::size_t>(i + 1), t, q * G + x,
                                         r * G + y)];
  }
  /// log alpha[t](r,y), t >= -1.
  T log_alpha(long t, std::size_t r, std::size_t y) const {
    return chart_.alpha()[chart_.a_index(static_cast<std::size_t>(t + 1),
                                         r * config_.num_symbols + y)];
  }
  SignedLog<T> zeta(long i, std::size_t t, std::size_t q, std::size_t x, std::size_t r,
                    std::size_t y, std::size_t d) const {
    const std::size_t G = config_.num_symbols;
    const std::size_t idx =
        z_index(static_cast<std::size_t>(i + 1), t, q * G + x, r * G + y, d);
    return {zeta_log_[idx], zeta_sign_[idx]};
  }

 private:
  template <typename U>
  friend void vpda_update(VpdaState<U>&, const TransitionWeights<U>&, std::span<const U>);
  template <typename U>
  friend std::vector<U> vpda_reading(const VpdaState<U>&);

  std::size_t z_index(std::size_t i1, std::size_t t, std::size_t qx, std::size_t ry,
                      std::size_t d) const {
    return chart_.g_index(i1, t, qx, ry) / chart_.lanes() * config_.stack_vector_dim + d;
  }

  VpdaConfig config_;
  detail::LangChart<T> chart_;
  std::vector<T> zeta_log_;
  std::vector<std::int8_t> zeta_sign_;
  std::size_t t_ = 0;
};

template <typename T>
VpdaState<T> vpda_init(std::size_t n, const VpdaConfig& config, std::span<const T> r0) {
  return VpdaState<T>(n, config, r0);
}

/// Advances the state by one timestep in place.
template <typename T>
void vpda_update(VpdaState<T>& state, const TransitionWeights<T>& delta,
                 std::span<const T> pushed) {
  const VpdaConfig& c = state.config_;
  const std::size_t m = c.stack_vector_dim;
  if (state.t_ >= state.chart_.length()) {
    throw ContractError("vpda_update past the pre-allocated length " +
                        std::to_string(state.chart_.length()));
  }
  if (pushed.size() != m) throw DimensionError("vpda_update: pushed vector dimension");
  if (delta.log_weights().size() != c.action_dim()) {
    throw DimensionError("vpda_update: transition weight extent");
  }
  const std::size_t t = ++state.t_;
  auto& chart = state.chart_;
  chart.set_delta(t, 0, delta.log_weights());
  chart.compute_column(t);

  const std::size_t Q = c.num_states, G = c.num_symbols, QG = Q * G;
  const auto& gp = chart.gamma_pop(t);
  std::vector<SignedLog<T>> pushed_log(m);
  for (std::size_t d = 0; d < m; ++d) pushed_log[d] = SignedLog<T>::from_value(pushed[d]);

  for (std::size_t i1 = 0; i1 <= t; ++i1) {
    for (std::size_t qx = 0; qx < QG; ++qx) {
      for (std::size_t r = 0; r < Q; ++r) {
        for (std::size_t y = 0; y < G; ++y) {
          const std::size_t ry = r * G + y;
          for (std::size_t d = 0; d < m; ++d) {
            SignedLogAccumulator<T> acc;
            if (i1 == t) {
              acc.add(pushed_log[d], delta.push(qx / G, qx % G, r, y));
            } else {
              for (std::size_t sz = 0; sz < QG; ++sz) {
                const std::size_t z = state.z_index(i1, t - 1, qx, sz, d);
                acc.add(SignedLog<T>{state.zeta_log_[z], state.zeta_sign_[z]},
                        delta.replace(sz / G, sz % G, r, y));
              }
              for (std::size_t k = i1; k + 2 <= t; ++k) {
                for (std::size_t u = 0; u < Q; ++u) {
                  const std::size_t uy = u * G + y;
                  const std::size_t z = state.z_index(i1, k, qx, uy, d);
                  acc.add(SignedLog<T>{state.zeta_log_[z], state.zeta_sign_[z]},
                          gp[chart.gp_index(k, uy, r)]);
                }
              }
            }
            const auto res = acc.result();
            const std::size_t z = state.z_index(i1, t, qx, ry, d);
            state.zeta_log_[z] = res.log_abs;
            state.zeta_sign_[z] = static_cast<std::int8_t>(res.sign);
          }
        }
      }
    }
  }
}

/// Expected top vector per (state, top symbol), normalized by the total run
/// weight; zero when every run has zero weight. Layout [r][y][d].
template <typename T>
std::vector<T> vpda_reading(const VpdaState<T>& state) {
  const VpdaConfig& c = state.config_;
  const std::size_t m = c.stack_vector_dim, QG = c.state_symbol_pairs();
  const std::size_t t = state.t_;
  const auto& chart = state.chart_;
  std::vector<T> out(c.reading_dim(), T(0));
  std::vector<T> alpha_t(QG);
  for (std::size_t ry = 0; ry < QG; ++ry) alpha_t[ry] = chart.alpha()[chart.a_index(t + 1, ry)];
  const T log_z = log_sum_exp<T>(alpha_t);
  if (is_log_zero(log_z)) return out;
  for (std::size_t ry = 0; ry < QG; ++ry) {
    for (std::size_t d = 0; d < m; ++d) {
      SignedLogAccumulator<T> acc;
      for (std::size_t i1 = 0; i1 <= t; ++i1) {
        for (std::size_t qx = 0; qx < QG; ++qx) {
          const std::size_t z = state.z_index(i1, t, qx, ry, d);
          acc.add(SignedLog<T>{state.zeta_log_[z], state.zeta_sign_[z]},
                  chart.alpha()[chart.a_index(i1, qx)]);
        }
      }
      const auto eta = acc.result();
      if (!is_log_zero(eta.log_abs)) out[ry * m + d] = T(eta.sign) * std::exp(eta.log_abs - log_z);
    }
  }
  return out;
}

/// Differentiable dVPDA readings for a batch of `lanes` sequences of equal
/// length n, processed together.
///
/// log_actions[lanes * n, action_dim] holds the log transition weights of
/// each step (sequence-major rows), pushed[lanes * n, m] the pushed vectors
/// and r0[m] the initial bottom vector shared by every sequence. Returns
/// readings[lanes * n, reading_dim] for t = 1..n.
///
/// The top vector of a run ending in a gamma[i][t] item is always the one
/// pushed at i+1, so the reading is sum_i P_t(i; r,y) v_{i+1} with
/// P_t = B[t] / Z_t. Gradients flow through that form and back through the
/// log-space inner weights.
template <typename T>
Tensor<T> vpda_readings(const Tensor<T>& log_actions, const Tensor<T>& pushed, const Tensor<T>& r0,
                        const VpdaConfig& config, std::size_t lanes = 1) {
  config.validate();
  log_actions.require_rank(2);
  pushed.require_rank(2);
  const std::size_t m = config.stack_vector_dim, D = config.action_dim();
  const std::size_t Q = config.num_states, G = config.num_symbols, QG = Q * G,
                    K = config.actions_per_target();
  if (lanes == 0 || log_actions.rows() % lanes != 0) {
    throw DimensionError("vpda_readings: rows not divisible by lane count");
  }
  const std::size_t n = log_actions.rows() / lanes;
  if (log_actions.cols() != D || pushed.rows() != lanes * n || pushed.cols() != m ||
      r0.size() != m) {
    throw DimensionError("vpda_readings: inconsistent shapes " + shape_str(log_actions.shape()) +
                         ", " + shape_str(pushed.shape()) + ", " + shape_str(r0.shape()));
  }
  const std::size_t R = config.reading_dim();
  using LV = detail::LaneVec<T>;
  using LR = detail::LaneRef<T>;
  using LC = detail::LaneCRef<T>;
  constexpr std::size_t W = detail::kLaneWidth<T>;
  using Buf = detail::LaneBuffer<T>;

  // B sequences live in the first `lanes` of L internal lanes.
  const std::size_t B = lanes;
  auto chart = std::make_shared<detail::LangChart<T>>(config, n, B);
  const std::size_t L = chart->lanes();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 1; t <= n; ++t)
      chart->set_delta(t, b, log_actions.data().subspan((b * n + t - 1) * D, D));
  for (std::size_t t = 1; t <= n; ++t) chart->compute_column(t);

  // v_{i1}[d] for lane l at ((i1 * m + d) * L + l); i1 = 0 is r0.
  Buf vecs((n + 1) * m * L, T(0));
  for (std::size_t l = 0; l < B; ++l) {
    for (std::size_t d = 0; d < m; ++d) vecs[d * L + l] = r0[d];
    for (std::size_t t = 1; t <= n; ++t)
      for (std::size_t d = 0; d < m; ++d)
        vecs[(t * m + d) * L + l] = pushed[(l * n + t - 1) * m + d];
  }

  // log Z_t per lane, with log-zero replaced by +inf.
  Buf log_z_safe((n + 1) * L);
  std::vector<T> out(B * n * R, T(0));
  {
    Buf acc(R * L);
    for (std::size_t t = 1; t <= n; ++t) {
      T* lz = log_z_safe.data() + t * L;
      chart->ensure_buffer(QG);
      for (std::size_t ry = 0; ry < QG; ++ry)
        chart->copy_term(ry, &chart->alpha()[chart->a_index(t + 1, ry)]);
      chart->finish(QG, lz);
      for (std::size_t c = 0; c < L; c += W) LR(lz + c) = detail::safe_shift<T>(LC(lz + c));
      const auto& bt = chart->top_origin(t);
      std::fill(acc.begin(), acc.end(), T(0));
      for (std::size_t i1 = 0; i1 <= t; ++i1) {
        for (std::size_t ry = 0; ry < QG; ++ry) {
          for (std::size_t c = 0; c < L; c += W) {
            const LV p = detail::masked_exp<T>(LC(&bt[chart->b_index(i1, ry) + c]) - LC(lz + c));
            if (!(p != T(0)).any()) continue;
            for (std::size_t d = 0; d < m; ++d)
              LR(&acc[(ry * m + d) * L + c]) += p * LC(&vecs[(i1 * m + d) * L + c]);
          }
        }
      }
      for (std::size_t l = 0; l < B; ++l) {
        T* row = out.data() + (l * n + t - 1) * R;
        for (std::size_t j = 0; j < R; ++j) row[j] = acc[j * L + l];
      }
    }
  }

  const bool needs = detail::any_requires_grad<T>({&log_actions, &pushed, &r0});
  return detail::make_result<T>({B * n, R}, std::move(out), needs, [&] {
    auto an = log_actions.node(), pn = pushed.node(), rn = r0.node();
    return [an, pn, rn, chart, vecs = std::move(vecs), log_z_safe = std::move(log_z_safe), n, B,
            L, m, D, Q, G, QG, K, R](detail::Node<T>& self) {
      const auto& gamma = chart->gamma();
      const auto& alpha = chart->alpha();
      const auto& delta = chart->delta();
      Buf g_gamma(gamma.size(), T(0));
      Buf g_alpha(alpha.size(), T(0));
      Buf g_delta(delta.size(), T(0));
      Buf g_vecs(vecs.size(), T(0));
      Buf g_b;
      Buf g_gp;
      Buf grad_t(R * L, T(0));
      auto didx = [&](std::size_t t, std::size_t qx, std::size_t r, std::size_t k) {
        return chart->d_index(t, (qx * Q + r) * K + k);
      };
      // For out = LSE(... x ...), visits each chunk c that carries gradient
      // with the adjoint gv and the safe log-value of out.
      auto for_chunks = [&](const T* g, const T* val, auto&& fn) {
        for (std::size_t c = 0; c < L; c += W) {
          const LV gv = LC(g + c);
          if (!(gv != T(0)).any()) continue;
          fn(c, gv, detail::safe_shift<T>(LC(val + c)));
        }
      };
      // Routes gv * exp(a + b - out) into ga and gb.
      auto route2 = [](const T* a, const T* b, T* ga, T* gb, const LV& gv, const LV& safe) {
        const LV w = gv * detail::masked_exp<T>(LC(a) + LC(b) - safe);
        LR(ga) += w;
        LR(gb) += w;
      };
      auto route1 = [](const T* a, T* ga, const LV& gv, const LV& safe) {
        LR(ga) += gv * detail::masked_exp<T>(LC(a) - safe);
      };

      for (std::size_t t = n; t >= 1; --t) {
        const auto& bt = chart->top_origin(t);
        const auto& gp = chart->gamma_pop(t);
        g_b.assign(bt.size(), T(0));
        g_gp.assign(gp.size(), T(0));

        // Reading: R(r,y) = sum_i P(i; r,y) v_i with P = exp(B - log Z).
        for (std::size_t l = 0; l < B; ++l)
          for (std::size_t j = 0; j < R; ++j)
            grad_t[j * L + l] = self.grad[(l * n + t - 1) * R + j];
        for (std::size_t c = 0; c < L; c += W) {
          const LV lz = LC(&log_z_safe[t * L + c]);
          LV s = LV::Zero();
          for (std::size_t i1 = 0; i1 <= t; ++i1) {
            for (std::size_t ry = 0; ry < QG; ++ry) {
              const std::size_t bi = chart->b_index(i1, ry) + c;
              const LV p = detail::masked_exp<T>(LC(&bt[bi]) - lz);
              LV dp = LV::Zero();
              for (std::size_t d = 0; d < m; ++d) {
                const LC gr(&grad_t[(ry * m + d) * L + c]);
                const std::size_t vi = (i1 * m + d) * L + c;
                dp += gr * LC(&vecs[vi]);
                LR(&g_vecs[vi]) += p * gr;
              }
              LR gb(&g_b[bi]);
              gb = p * dp;
              s += p * dp;
            }
          }
          for (std::size_t i1 = 0; i1 <= t; ++i1) {
            for (std::size_t ry = 0; ry < QG; ++ry) {
              const std::size_t bi = chart->b_index(i1, ry) + c;
              LR(&g_b[bi]) -= detail::masked_exp<T>(LC(&bt[bi]) - lz) * s;
            }
          }
        }

        // alpha[t](r,y) = LSE_i B(i; r,y).
        for (std::size_t ry = 0; ry < QG; ++ry) {
          const std::size_t ai = chart->a_index(t + 1, ry);
          for_chunks(&g_alpha[ai], &alpha[ai], [&](std::size_t c, const LV& gv, const LV& safe) {
            for (std::size_t i1 = 0; i1 <= t; ++i1) {
              const std::size_t bi = chart->b_index(i1, ry) + c;
              route1(&bt[bi], &g_b[bi], gv, safe);
            }
          });
        }

        // B(i; r,y) = LSE_{q,x} alpha[i](q,x) + gamma[i][t](q,x -> r,y).
        for (std::size_t i1 = 0; i1 <= t; ++i1) {
          for (std::size_t ry = 0; ry < QG; ++ry) {
            const std::size_t bi = chart->b_index(i1, ry);
            for_chunks(&g_b[bi], &bt[bi], [&](std::size_t c, const LV& gv, const LV& safe) {
              for (std::size_t qx = 0; qx < QG; ++qx) {
                const std::size_t ai = chart->a_index(i1, qx) + c;
                const std::size_t gi = chart->g_index(i1, t, qx, ry) + c;
                route2(&alpha[ai], &gamma[gi], &g_alpha[ai], &g_gamma[gi], gv, safe);
              }
            });
          }
        }

        // gamma[i][t] = push | replace + pop terms.
        for (std::size_t i1 = 0; i1 <= t; ++i1) {
          for (std::size_t qx = 0; qx < QG; ++qx) {
            for (std::size_t r = 0; r < Q; ++r) {
              for (std::size_t y = 0; y < G; ++y) {
                const std::size_t gi0 = chart->g_index(i1, t, qx, r * G + y);
                for_chunks(&g_gamma[gi0], &gamma[gi0],
                           [&](std::size_t c, const LV& gv, const LV& safe) {
                  if (i1 == t) {
                    const std::size_t di = didx(t, qx, r, y) + c;
                    route1(&delta[di], &g_delta[di], gv, safe);
                    return;
                  }
                  for (std::size_t sz = 0; sz < QG; ++sz) {
                    const std::size_t src = chart->g_index(i1, t - 1, qx, sz) + c;
                    const std::size_t di = didx(t, sz, r, G + y) + c;
                    route2(&gamma[src], &delta[di], &g_gamma[src], &g_delta[di], gv, safe);
                  }
                  for (std::size_t k = i1; k + 2 <= t; ++k) {
                    for (std::size_t u = 0; u < Q; ++u) {
                      const std::size_t src = chart->g_index(i1, k, qx, u * G + y) + c;
                      const std::size_t pi = chart->gp_index(k, u * G + y, r) + c;
                      route2(&gamma[src], &gp[pi], &g_gamma[src], &g_gp[pi], gv, safe);
                    }
                  }
                });
              }
            }
          }
        }

        // gamma'[k](u,y -> r) = LSE_{s,z} gamma[k][t-1](u,y -> s,z) + pop_t(s,z,r).
        for (std::size_t k = 0; k + 2 <= t; ++k) {
          for (std::size_t uy = 0; uy < QG; ++uy) {
            for (std::size_t r = 0; r < Q; ++r) {
              const std::size_t pi = chart->gp_index(k, uy, r);
              for_chunks(&g_gp[pi], &gp[pi], [&](std::size_t c, const LV& gv, const LV& safe) {
                for (std::size_t sz = 0; sz < QG; ++sz) {
                  const std::size_t src = chart->g_index(k + 1, t - 1, uy, sz) + c;
                  const std::size_t di = didx(t, sz, r, 2 * G) + c;
                  route2(&gamma[src], &delta[di], &g_gamma[src], &g_delta[di], gv, safe);
                }
              });
            }
          }
        }
      }

      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t l = 0; l < B; ++l)
          for (std::size_t t = 1; t <= n; ++t)
            for (std::size_t j = 0; j < D; ++j)
              g[(l * n + t - 1) * D + j] += g_delta[chart->d_index(t, j) + l];
      }
      if (pn->requires_grad) {
        T* g = pn->grad_buffer();
        for (std::size_t l = 0; l < B; ++l)
          for (std::size_t t = 1; t <= n; ++t)
            for (std::size_t d = 0; d < m; ++d)
              g[(l * n + t - 1) * m + d] += g_vecs[(t * m + d) * L + l];
      }
      if (rn->requires_grad) {
        T* g = rn->grad_buffer();
        for (std::size_t l = 0; l < B; ++l)
          for (std::size_t d = 0; d < m; ++d) g[d] += g_vecs[d * L + l];
      }
    };
  });
}

}  // namespace stackattn
