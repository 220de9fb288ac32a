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
#include <string>
#include <vector>

#include "stackattn/errors.hpp"
#include "stackattn/ops.hpp"
#include "stackattn/superposition.hpp"
#include "stackattn/tensor.hpp"
#include "stackattn/vpda.hpp"

// Attention sublayers. Inputs are row-stacked batches: `lanes` sequences of
// equal length n laid out as [lanes * n, d_model], sequence-major. Every
// attention variant here mixes information only within a sequence and only
// from earlier positions.

namespace stackattn {

struct SdpaConfig {
  std::size_t d_model = 32;
  std::size_t num_heads = 4;
  bool causal = true;
  double dropout_p = 0.0;

  void validate() const {
    if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
      throw ParameterError("d_model " + std::to_string(d_model) + " not divisible by " +
                           std::to_string(num_heads) + " heads");
    }
  }
  std::size_t head_dim() const { return d_model / num_heads; }
};

/// Fused q/k/v input projection [d, 3d] + bias, output projection [d, d] + bias.
template <typename T>
struct SdpaParams {
  Tensor<T> in_weight, in_bias, out_weight, out_bias;
};

enum class StackVariant { kSuperposition, kNondeterministic };

struct StackAttentionConfig {
  StackVariant variant = StackVariant::kSuperposition;
  std::size_t stack_vector_dim = 32;
  std::size_t num_states = 2;   // nondeterministic only
  std::size_t num_symbols = 3;  // nondeterministic only

  VpdaConfig vpda() const { return {num_states, num_symbols, stack_vector_dim}; }
  std::size_t action_dim() const {
    return variant == StackVariant::kSuperposition ? 3 : vpda().action_dim();
  }
  std::size_t reading_dim() const {
    return variant == StackVariant::kSuperposition ? stack_vector_dim : vpda().reading_dim();
  }
};

/// W_a [d, d_a], W_v [d, m], W_y [d_r, d], all without bias; w_v [m] only for
/// the nondeterministic stack.
template <typename T>
struct StackAttentionParams {
  Tensor<T> action_weight, push_weight, output_weight, initial_vector;
};

namespace detail {

template <typename T>
void require_lanes(const Tensor<T>& x, std::size_t lanes, const char* op) {
  x.require_rank(2);
  if (lanes == 0 || x.rows() % lanes != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) +
                         " rows do not split into " + std::to_string(lanes) + " sequences");
  }
}

}  // namespace detail

/// Multi-head scaled dot-product attention.
template <typename T, typename Rng>
Tensor<T> sdpa_multihead(const Tensor<T>& x, const SdpaConfig& config, const SdpaParams<T>& p,
                         Mode mode, Rng& rng, std::size_t lanes = 1) {
  config.validate();
  detail::require_lanes(x, lanes, "sdpa_multihead");
  const std::size_t d = config.d_model, dk = config.head_dim(), n = x.rows() / lanes;
  if (x.cols() != d) throw DimensionError("sdpa_multihead: input width " + std::to_string(x.cols()));
  const T scale_factor = T(1) / std::sqrt(T(dk));
  Tensor<T> qkv = add_rowwise(matmul(x, p.in_weight), p.in_bias);
  std::vector<Tensor<T>> seqs;
  seqs.reserve(lanes);
  for (std::size_t l = 0; l < lanes; ++l) {
    Tensor<T> s = lanes == 1 ? qkv : slice_rows(qkv, l * n, n);
    std::vector<Tensor<T>> heads;
    heads.reserve(config.num_heads);
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      Tensor<T> q = slice_cols(s, h * dk, dk);
      Tensor<T> k = slice_cols(s, d + h * dk, dk);
      Tensor<T> v = slice_cols(s, 2 * d + h * dk, dk);
      Tensor<T> scores = scale(matmul(q, transpose(k)), scale_factor);
      Tensor<T> z = config.causal ? causal_softmax(scores) : softmax(scores);
      z = dropout(z, config.dropout_p, mode, rng);
      heads.push_back(matmul(z, v));
    }
    seqs.push_back(concat_cols(heads));
  }
  Tensor<T> joined = lanes == 1 ? seqs[0] : concat_rows(seqs);
  return add_rowwise(matmul(joined, p.out_weight), p.out_bias);
}

/// Pre-norm residual wrapper: h + Dropout(f(LayerNorm(h))).
template <typename T, typename F, typename Rng>
Tensor<T> sublayer_apply(F&& f, const Tensor<T>& h, const Tensor<T>& norm_gain,
                         const Tensor<T>& norm_bias, double dropout_p, Mode mode, Rng& rng) {
  Tensor<T> x = layer_norm(h, norm_gain, norm_bias);
  Tensor<T> y = f(x);
  if (y.shape() != h.shape()) {
    throw ContractError("sublayer function returned " + shape_str(y.shape()) + " for input " +
                        shape_str(h.shape()));
  }
  return add(h, dropout(y, dropout_p, mode, rng));
}

/// Superposition stack attention: a_t = softmax(W_a x_t), v_t = logistic(W_v x_t),
/// y_t = W_y r_t.
template <typename T>
Tensor<T> superposition_attention(const Tensor<T>& x, const StackAttentionParams<T>& p,
                                  std::size_t lanes = 1) {
  detail::require_lanes(x, lanes, "superposition_attention");
  const std::size_t n = x.rows() / lanes;
  Tensor<T> actions = softmax(matmul(x, p.action_weight));
  Tensor<T> pushed = logistic(matmul(x, p.push_weight));
  std::vector<Tensor<T>> readings;
  readings.reserve(lanes);
  for (std::size_t l = 0; l < lanes; ++l) {
    if (lanes == 1) {
      readings.push_back(superposition_readings(actions, pushed));
    } else {
      readings.push_back(
          superposition_readings(slice_rows(actions, l * n, n), slice_rows(pushed, l * n, n)));
    }
  }
  Tensor<T> r = lanes == 1 ? readings[0] : concat_rows(readings);
  return matmul(r, p.output_weight);
}

/// Nondeterministic stack attention: W_a x_t are the log transition weights,
/// v_t = logistic(W_v x_t), r_0 = logistic(w_v), y_t = W_y r_t.
template <typename T>
Tensor<T> nondeterministic_attention(const Tensor<T>& x, const StackAttentionConfig& config,
                                     const StackAttentionParams<T>& p, std::size_t lanes = 1) {
  detail::require_lanes(x, lanes, "nondeterministic_attention");
  Tensor<T> log_actions = matmul(x, p.action_weight);
  Tensor<T> pushed = logistic(matmul(x, p.push_weight));
  Tensor<T> r0 = logistic(p.initial_vector);
  Tensor<T> r = vpda_readings(log_actions, pushed, r0, config.vpda(), lanes);
  return matmul(r, p.output_weight);
}

template <typename T>
Tensor<T> stack_attention(const Tensor<T>& x, const StackAttentionConfig& config,
                          const StackAttentionParams<T>& p, std::size_t lanes = 1) {
  if (config.variant == StackVariant::kSuperposition) return superposition_attention(x, p, lanes);
  return nondeterministic_attention(x, config, p, lanes);
}

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t n, std::size_t d_model) {
  if (d_model % 2 != 0) {
    throw ParameterError("sinusoidal encoding needs an even d_model, got " +
                         std::to_string(d_model));
  }
  std::vector<T> pe(n * d_model);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle =
          double(pos) / std::pow(10000.0, double(2 * i) / double(d_model));
      pe[pos * d_model + 2 * i] = T(std::sin(angle));
      pe[pos * d_model + 2 * i + 1] = T(std::cos(angle));
    }
  }
  return Tensor<T>({n, d_model}, std::move(pe));
}

}  // namespace stackattn
