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
#include <limits>
#include <span>

// Log-space arithmetic. -inf is the log of zero and is handled explicitly:
// adding -inf to anything finite gives -inf, and -inf terms carry no mass in a
// log-sum-exp. +inf is never a valid log weight.

namespace stackattn {

template <typename T>
constexpr T log_zero() {
  return -std::numeric_limits<T>::infinity();
}

template <typename T>
constexpr bool is_log_zero(T x) {
  return x == log_zero<T>();
}

/// a + b with -inf absorbing.
template <typename T>
constexpr T log_mul(T a, T b) {
  if (is_log_zero(a) || is_log_zero(b)) return log_zero<T>();
  return a + b;
}

/// log(exp(a) + exp(b)).
template <typename T>
T log_add(T a, T b) {
  if (is_log_zero(a)) return b;
  if (is_log_zero(b)) return a;
  const T hi = std::max(a, b);
  const T lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

/// log(sum(exp(xs))). Empty or all -inf input gives -inf.
template <typename T>
T log_sum_exp(std::span<const T> xs) {
  T hi = log_zero<T>();
  for (T x : xs) hi = std::max(hi, x);
  if (is_log_zero(hi)) return hi;
  T s = 0;
  for (T x : xs) s += std::exp(x - hi);
  return hi + std::log(s);
}

/// Real number stored as log|value| plus a sign. Zero is (-inf, +1).
template <typename T>
struct SignedLog {
  T log_abs = log_zero<T>();
  int sign = 1;

  static SignedLog from_value(T v) {
    if (v == T(0)) return {};
    return {std::log(std::abs(v)), v < 0 ? -1 : 1};
  }
  T value() const {
    return is_log_zero(log_abs) ? T(0) : T(sign) * std::exp(log_abs);
  }
};

/// Accumulates signed terms given in log space and resolves the sum once.
/// Positive and negative parts are kept in separate log-sums so that the
/// cancellation happens exactly once at the end.
template <typename T>
class SignedLogAccumulator {
 public:
  void add(T log_abs, int sign) {
    if (is_log_zero(log_abs)) return;
    if (sign >= 0)
      pos_ = log_add(pos_, log_abs);
    else
      neg_ = log_add(neg_, log_abs);
  }
  void add(SignedLog<T> x, T log_scale) {
    add(log_mul(x.log_abs, log_scale), x.sign);
  }

  SignedLog<T> result() const {
    if (pos_ > neg_) {
      if (is_log_zero(neg_)) return {pos_, 1};
      return {pos_ + std::log1p(-std::exp(neg_ - pos_)), 1};
    }
    if (neg_ > pos_) {
      if (is_log_zero(pos_)) return {neg_, -1};
      return {neg_ + std::log1p(-std::exp(pos_ - neg_)), -1};
    }
    return {};
  }

 private:
  T pos_ = log_zero<T>();
  T neg_ = log_zero<T>();
};

}  // namespace stackattn
