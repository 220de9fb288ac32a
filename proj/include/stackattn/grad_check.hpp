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
#include <random>
#include <type_traits>
#include <vector>

#include "stackattn/ops.hpp"
#include "stackattn/tensor.hpp"

namespace stackattn {

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

namespace detail {

// Fixed pseudo-random contraction weights used to turn tensor-valued
// functions into scalars.
inline std::vector<double> contraction_weights(std::size_t n) {
  std::mt19937_64 rng(0x5eedULL + n);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> w(n);
  for (auto& v : w) v = u(rng);
  return w;
}

template <typename U, typename F>
double scalarized(F& f, const Tensor<U>& x) {
  Tensor<U> y = f(x);
  if (y.size() == 1) return static_cast<double>(y.item());
  const auto w = contraction_weights(y.size());
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * static_cast<double>(y[i]);
  return s;
}

}  // namespace detail

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// The analytic gradient is computed at precision T. When `f` also accepts a
/// Tensor<double> the finite differences are taken at 64-bit, so a 32-bit
/// gradient is judged against a higher-precision reference. Non-scalar
/// outputs are contracted with fixed weights. The per-coordinate error is
/// |a - n| / max(|a|, |n|, floor), with floor = 1e-2 * max|n|.
///
/// `corrupt`, when set, is added to the analytic gradient before comparison
/// (negative-control hook for tests).
template <typename T, typename F>
GradCheckReport grad_check(F&& f, const Tensor<T>& x, double eps = 1e-6, double tol = 1e-6,
                           const std::vector<double>* corrupt = nullptr) {
  GradCheckReport report;
  const std::size_t n = x.size();

  // Analytic.
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> xp = Tensor<T>::parameter(x.shape(), x.values());
    Tensor<T> y = f(xp);
    Tensor<T> loss = y;
    if (y.size() != 1) {
      const auto w = detail::contraction_weights(y.size());
      std::vector<T> wt(w.begin(), w.end());
      loss = sum(mul(y, Tensor<T>(y.shape(), std::move(wt))));
    }
    tape.backward(loss);
    report.analytic.assign(n, 0.0);
    if (xp.has_grad()) {
      for (std::size_t i = 0; i < n; ++i) report.analytic[i] = static_cast<double>(xp.grad()[i]);
    }
  }
  if (corrupt) {
    for (std::size_t i = 0; i < n && i < corrupt->size(); ++i) report.analytic[i] += (*corrupt)[i];
  }

  // Numeric.
  report.numeric.assign(n, 0.0);
  using U = std::conditional_t<std::is_invocable_v<F&, const Tensor<double>&>, double, T>;
  std::vector<U> base(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<U> plus = base, minus = base;
    plus[i] += static_cast<U>(eps);
    minus[i] -= static_cast<U>(eps);
    const double fp = detail::scalarized<U>(f, Tensor<U>(x.shape(), std::move(plus)));
    const double fm = detail::scalarized<U>(f, Tensor<U>(x.shape(), std::move(minus)));
    report.numeric[i] = (fp - fm) / (2 * eps);
  }

  double scale = 0;
  for (double v : report.numeric) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-2 * scale, 1e-12);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = report.analytic[i], m = report.numeric[i];
    const double err = std::abs(a - m) / std::max({std::abs(a), std::abs(m), floor});
    if (err > report.max_rel_error || i == 0) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (err >= report.max_rel_error) report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace stackattn
