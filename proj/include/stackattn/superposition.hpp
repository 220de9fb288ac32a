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

#include <cmath>
#include <span>
#include <vector>

#include "stackattn/errors.hpp"
#include "stackattn/tensor.hpp"

namespace stackattn {

/// Probabilities of push, no-op and pop for one timestep.
template <typename T>
struct ActionTriple {
  T push = 0;
  T noop = 0;
  T pop = 0;

  void validate(double tol = 1e-6) const {
    if (push < 0 || noop < 0 || pop < 0 ||
        std::abs(static_cast<double>(push + noop + pop) - 1.0) > tol) {
      throw ParameterError("action triple must be a probability distribution");
    }
  }
};

/// Superposition stack contents: `depth()` rows of m-vectors, row 0 on top.
template <typename T>
class SuperpositionState {
 public:
  explicit SuperpositionState(std::size_t m) : m_(m), elements_(m, T(0)) {}

  std::size_t vector_dim() const { return m_; }
  std::size_t timestep() const { return t_; }
  std::size_t depth() const { return elements_.size() / m_; }
  std::span<const T> row(std::size_t i) const { return {elements_.data() + i * m_, m_}; }
  std::span<const T> elements() const { return elements_; }

 private:
  template <typename U>
  friend SuperpositionState<U> sup_update(const SuperpositionState<U>&, const ActionTriple<U>&,
                                          std::span<const U>);
  std::size_t m_;
  std::size_t t_ = 0;
  std::vector<T> elements_;
};

namespace detail {

// One superposition step. `prev` holds max(t-1, 1) rows (the empty stack is
// one zero row); `next` receives t rows.
template <typename T>
void superposition_step(std::span<const T> prev, std::size_t t, std::size_t m, T push, T noop,
                        T pop, std::span<const T> pushed, std::span<T> next) {
  for (std::size_t i = 0; i < t; ++i) {
    T* out = next.data() + i * m;
    for (std::size_t d = 0; d < m; ++d) {
      const T above = i == 0 ? pushed[d] : prev[(i - 1) * m + d];
      const T at = i + 1 < t ? prev[i * m + d] : T(0);
      const T below = i + 2 < t ? prev[(i + 1) * m + d] : T(0);
      out[d] = push * above + noop * at + pop * below;
    }
  }
}

}  // namespace detail

template <typename T>
SuperpositionState<T> sup_update(const SuperpositionState<T>& state, const ActionTriple<T>& actions,
                                 std::span<const T> pushed) {
  if (pushed.size() != state.m_) {
    throw DimensionError("sup_update: pushed vector has dimension " +
                         std::to_string(pushed.size()) + ", stack holds " +
                         std::to_string(state.m_));
  }
  actions.validate();
  SuperpositionState<T> next(state.m_);
  next.t_ = state.t_ + 1;
  next.elements_.assign(next.t_ * state.m_, T(0));
  detail::superposition_step<T>(state.elements_, next.t_, state.m_, actions.push, actions.noop,
                                actions.pop, pushed, next.elements_);
  return next;
}

template <typename T>
std::vector<T> sup_reading(const SuperpositionState<T>& state) {
  auto top = state.row(0);
  return {top.begin(), top.end()};
}

/// Differentiable readings of a superposition stack over a whole sequence.
/// actions[n, 3] are (push, noop, pop) rows, pushed[n, m] the pushed vectors;
/// returns readings[n, m] where row t is the top after step t+1.
template <typename T>
Tensor<T> superposition_readings(const Tensor<T>& actions, const Tensor<T>& pushed) {
  actions.require_rank(2);
  pushed.require_rank(2);
  const std::size_t n = actions.rows(), m = pushed.cols();
  if (actions.cols() != 3 || pushed.rows() != n) {
    throw DimensionError("superposition_readings: actions " + shape_str(actions.shape()) +
                         " vs pushed " + shape_str(pushed.shape()));
  }
  // stacks[t] holds V_t with max(t, 1) rows.
  std::vector<std::vector<T>> stacks(n + 1);
  stacks[0].assign(m, T(0));
  std::vector<T> out(n * m);
  for (std::size_t t = 1; t <= n; ++t) {
    stacks[t].assign(t * m, T(0));
    const T* a = actions.data().data() + (t - 1) * 3;
    detail::superposition_step<T>(stacks[t - 1], t, m, a[0], a[1], a[2],
                                  pushed.data().subspan((t - 1) * m, m), stacks[t]);
    std::copy_n(stacks[t].begin(), m, out.begin() + (t - 1) * m);
  }
  const bool needs = detail::any_requires_grad<T>({&actions, &pushed});
  return detail::make_result<T>({n, m}, std::move(out), needs, [&] {
    auto an = actions.node(), pn = pushed.node();
    return [an, pn, n, m, stacks = std::move(stacks)](detail::Node<T>& self) {
      std::vector<T> ga(n * 3, T(0)), gp(n * m, T(0));
      // Adjoint of V_t, rebuilt going backwards.
      std::vector<T> g_cur(n * m, T(0)), g_prev(n * m, T(0));
      for (std::size_t t = n; t >= 1; --t) {
        for (std::size_t d = 0; d < m; ++d) g_cur[d] += self.grad[(t - 1) * m + d];
        const T* a = an->value.data() + (t - 1) * 3;
        const std::vector<T>& prev = stacks[t - 1];
        std::fill(g_prev.begin(), g_prev.begin() + std::max<std::size_t>(t - 1, 1) * m, T(0));
        T d_push = 0, d_noop = 0, d_pop = 0;
        for (std::size_t i = 0; i < t; ++i) {
          const T* g = g_cur.data() + i * m;
          for (std::size_t d = 0; d < m; ++d) {
            if (i == 0) {
              d_push += g[d] * pn->value[(t - 1) * m + d];
              gp[(t - 1) * m + d] += a[0] * g[d];
            } else {
              d_push += g[d] * prev[(i - 1) * m + d];
              g_prev[(i - 1) * m + d] += a[0] * g[d];
            }
            if (i + 1 < t) {
              d_noop += g[d] * prev[i * m + d];
              g_prev[i * m + d] += a[1] * g[d];
            }
            if (i + 2 < t) {
              d_pop += g[d] * prev[(i + 1) * m + d];
              g_prev[(i + 1) * m + d] += a[2] * g[d];
            }
          }
        }
        ga[(t - 1) * 3 + 0] = d_push;
        ga[(t - 1) * 3 + 1] = d_noop;
        ga[(t - 1) * 3 + 2] = d_pop;
        std::swap(g_cur, g_prev);
        std::fill(g_prev.begin(), g_prev.end(), T(0));
      }
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) g[i] += ga[i];
      }
      if (pn->requires_grad) {
        T* g = pn->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) g[i] += gp[i];
      }
    };
  });
}

}  // namespace stackattn
