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
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stackattn/attention.hpp"
#include "stackattn/errors.hpp"
#include "stackattn/ops.hpp"
#include "stackattn/tensor.hpp"

// Causal transformer language model with one swappable attention layer.
//
// Token convention: symbols of the alphabet are 0..|S|-1. Inputs get BOS = |S|
// prepended; outputs are the symbols followed by EOS = |S|. So the input
// embedding has |S|+1 rows and the output head |S|+1 columns.

namespace stackattn {

enum class AttentionVariant { kSdpa, kSuperposition, kNondeterministic };

inline std::string variant_name(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kSdpa:
      return "sdpa";
    case AttentionVariant::kSuperposition:
      return "superposition";
    case AttentionVariant::kNondeterministic:
      return "nondeterministic";
  }
  return "?";
}

inline AttentionVariant parse_variant(const std::string& s) {
  if (s == "sdpa" || s == "tf") return AttentionVariant::kSdpa;
  if (s == "superposition" || s == "sup") return AttentionVariant::kSuperposition;
  if (s == "nondeterministic" || s == "nd") return AttentionVariant::kNondeterministic;
  throw ParameterError("unknown attention variant '" + s + "'");
}

struct ModelConfig {
  std::size_t num_layers = 5;
  std::size_t stack_layer_index = 3;  // 1-based
  AttentionVariant variant = AttentionVariant::kSdpa;
  std::size_t d_model = 32;
  std::size_t ffn_hidden = 64;
  std::size_t num_heads = 4;
  std::size_t stack_vector_dim = 32;
  std::size_t num_states = 2;
  std::size_t num_symbols = 3;
  double dropout = 0.1;
  std::vector<std::string> alphabet;

  void validate() const {
    if (num_layers < 1) throw ParameterError("num_layers must be >= 1");
    if (stack_layer_index < 1 || stack_layer_index > num_layers) {
      throw ParameterError("stack_layer_index must be in [1, num_layers]");
    }
    if (ffn_hidden < 1) throw ParameterError("ffn_hidden must be >= 1");
    if (d_model < 2 || d_model % 2 != 0) throw ParameterError("d_model must be even and >= 2");
    if (num_heads < 1 || d_model % num_heads != 0) {
      throw ParameterError("d_model must be divisible by num_heads");
    }
    if (alphabet.empty()) throw ParameterError("alphabet must not be empty");
    if (!(dropout >= 0 && dropout < 1)) throw ParameterError("dropout must be in [0, 1)");
    if (variant != AttentionVariant::kSdpa && stack_vector_dim < 1) {
      throw ParameterError("stack_vector_dim must be >= 1");
    }
    if (variant == AttentionVariant::kNondeterministic && (num_states < 1 || num_symbols < 1)) {
      throw ParameterError("nondeterministic stack needs |Q| >= 1 and |G| >= 1");
    }
  }

  std::size_t vocab_in() const { return alphabet.size() + 1; }
  std::size_t vocab_out() const { return alphabet.size() + 1; }
  int bos() const { return static_cast<int>(alphabet.size()); }
  int eos() const { return static_cast<int>(alphabet.size()); }

  SdpaConfig sdpa() const { return {d_model, num_heads, true, dropout}; }
  StackAttentionConfig stack() const {
    return {variant == AttentionVariant::kNondeterministic ? StackVariant::kNondeterministic
                                                           : StackVariant::kSuperposition,
            stack_vector_dim, num_states, num_symbols};
  }
  bool is_stack_layer(std::size_t layer) const {
    return variant != AttentionVariant::kSdpa && layer + 1 == stack_layer_index;
  }
};

/// How a parameter is initialized.
enum class ParamInit { kXavier, kNormGain, kNormBias, kUniform };

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  ParamInit init;
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm_gain, attn_norm_bias;
  SdpaParams<T> sdpa;
  StackAttentionParams<T> stack;
  Tensor<T> ffn_norm_gain, ffn_norm_bias;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <typename T>
struct Model {
  ModelConfig config;
  Tensor<T> embedding;
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm_gain, final_norm_bias;
  Tensor<T> head_weight, head_bias;
  std::vector<NamedParameter<T>> parameters;  // registration order

  const Tensor<T>& parameter(const std::string& name) const {
    for (const auto& p : parameters)
      if (p.name == name) return p.tensor;
    throw InputError("no parameter named '" + name + "'");
  }
};

template <typename T, typename Rng>
void init_parameters(Model<T>& model, Rng& rng);

namespace detail {

template <typename T>
Tensor<T> add_param(Model<T>& m, std::string name, Shape shape, ParamInit init) {
  Tensor<T> t = Tensor<T>::parameter(shape, std::vector<T>(shape_size(shape), T(0)));
  m.parameters.push_back({std::move(name), t, init});
  return t;
}

}  // namespace detail

/// Allocates every parameter of the configured architecture and initializes
/// them from `rng`.
template <typename T, typename Rng>
Model<T> build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  Model<T> m;
  m.config = config;
  const std::size_t d = config.d_model, h = config.ffn_hidden;
  m.embedding = detail::add_param(m, "embedding", {config.vocab_in(), d}, ParamInit::kUniform);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerParams<T> lp;
    lp.attn_norm_gain = detail::add_param(m, pre + "attn_norm.gain", {d}, ParamInit::kNormGain);
    lp.attn_norm_bias = detail::add_param(m, pre + "attn_norm.bias", {d}, ParamInit::kNormBias);
    if (config.is_stack_layer(l)) {
      const auto sc = config.stack();
      const std::size_t mm = sc.stack_vector_dim;
      lp.stack.action_weight =
          detail::add_param(m, pre + "stack.action_weight", {d, sc.action_dim()}, ParamInit::kXavier);
      lp.stack.push_weight =
          detail::add_param(m, pre + "stack.push_weight", {d, mm}, ParamInit::kXavier);
      lp.stack.output_weight = detail::add_param(m, pre + "stack.output_weight",
                                                 {sc.reading_dim(), d}, ParamInit::kXavier);
      if (sc.variant == StackVariant::kNondeterministic) {
        lp.stack.initial_vector =
            detail::add_param(m, pre + "stack.initial_vector", {mm}, ParamInit::kUniform);
      }
    } else {
      lp.sdpa.in_weight = detail::add_param(m, pre + "sdpa.in_weight", {d, 3 * d}, ParamInit::kUniform);
      lp.sdpa.in_bias = detail::add_param(m, pre + "sdpa.in_bias", {3 * d}, ParamInit::kUniform);
      lp.sdpa.out_weight = detail::add_param(m, pre + "sdpa.out_weight", {d, d}, ParamInit::kUniform);
      lp.sdpa.out_bias = detail::add_param(m, pre + "sdpa.out_bias", {d}, ParamInit::kUniform);
    }
    lp.ffn_norm_gain = detail::add_param(m, pre + "ffn_norm.gain", {d}, ParamInit::kNormGain);
    lp.ffn_norm_bias = detail::add_param(m, pre + "ffn_norm.bias", {d}, ParamInit::kNormBias);
    lp.ffn_w1 = detail::add_param(m, pre + "ffn.w1", {d, h}, ParamInit::kXavier);
    lp.ffn_b1 = detail::add_param(m, pre + "ffn.b1", {h}, ParamInit::kUniform);
    lp.ffn_w2 = detail::add_param(m, pre + "ffn.w2", {h, d}, ParamInit::kXavier);
    lp.ffn_b2 = detail::add_param(m, pre + "ffn.b2", {d}, ParamInit::kUniform);
    m.layers.push_back(std::move(lp));
  }
  m.final_norm_gain = detail::add_param(m, "final_norm.gain", {d}, ParamInit::kNormGain);
  m.final_norm_bias = detail::add_param(m, "final_norm.bias", {d}, ParamInit::kNormBias);
  m.head_weight = detail::add_param(m, "head.weight", {d, config.vocab_out()}, ParamInit::kXavier);
  m.head_bias = detail::add_param(m, "head.bias", {config.vocab_out()}, ParamInit::kUniform);
  init_parameters(m, rng);
  return m;
}

/// Number of learnable scalars.
template <typename T>
std::size_t count_parameters(const Model<T>& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters) n += p.tensor.size();
  return n;
}

/// Subtotals keyed by module: "embedding", "layers.<i>.<sublayer>",
/// "final_norm", "head".
template <typename T>
std::vector<std::pair<std::string, std::size_t>> parameter_breakdown(const Model<T>& model) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& p : model.parameters) {
    std::string key = p.name;
    const auto dot = key.rfind('.');
    if (dot != std::string::npos) key = key.substr(0, dot);
    if (key.rfind("layers.", 0) == 0) {
      // layers.<i>.<sublayer>
      const auto second = key.find('.', 7);
      const auto third = key.find('.', second + 1);
      key = key.substr(0, third);
    }
    if (!out.empty() && out.back().first == key)
      out.back().second += p.tensor.size();
    else
      out.emplace_back(key, p.tensor.size());
  }
  return out;
}

namespace detail {

template <typename T, typename Rng>
Tensor<T> feedforward(const Tensor<T>& x, const LayerParams<T>& lp, double p, Mode mode, Rng& rng) {
  Tensor<T> hidden = relu(add_rowwise(matmul(x, lp.ffn_w1), lp.ffn_b1));
  hidden = dropout(hidden, p, mode, rng);
  return add_rowwise(matmul(hidden, lp.ffn_w2), lp.ffn_b2);
}

}  // namespace detail

namespace detail {

/// Embedded inputs: sqrt(d) * E[ids] + PE, then dropout.
template <typename T, typename Rng>
Tensor<T> embed_batch(const Model<T>& model, const std::vector<std::vector<int>>& batch, Mode mode,
                      Rng& rng) {
  const ModelConfig& c = model.config;
  if (batch.empty()) throw InputError("forward_logits: empty batch");
  const std::size_t len = batch[0].size(), n = len + 1, lanes = batch.size();
  std::vector<int> ids;
  ids.reserve(lanes * n);
  for (const auto& seq : batch) {
    if (seq.size() != len) throw InputError("forward_logits: sequences in a batch must share a length");
    ids.push_back(c.bos());
    for (int tok : seq) {
      if (tok < 0 || tok >= c.bos()) {
        throw InputError("token " + std::to_string(tok) + " outside alphabet of size " +
                         std::to_string(c.alphabet.size()));
      }
      ids.push_back(tok);
    }
  }
  const std::size_t d = c.d_model;
  Tensor<T> pe = sinusoidal_encoding<T>(n, d);
  std::vector<T> pe_rows(lanes * n * d);
  for (std::size_t l = 0; l < lanes; ++l)
    std::copy(pe.values().begin(), pe.values().end(), pe_rows.begin() + l * n * d);
  Tensor<T> h = add(scale(embedding(model.embedding, ids), T(std::sqrt(double(d)))),
                    Tensor<T>({lanes * n, d}, std::move(pe_rows)));
  return dropout(h, c.dropout, mode, rng);
}

/// Applies layers [0, end) to the residual stream.
template <typename T, typename Rng>
Tensor<T> run_layers(const Model<T>& model, Tensor<T> h, std::size_t lanes, std::size_t end,
                     Mode mode, Rng& rng) {
  const ModelConfig& c = model.config;
  const SdpaConfig sdpa_cfg = c.sdpa();
  const StackAttentionConfig stack_cfg = c.stack();
  for (std::size_t l = 0; l < end; ++l) {
    const LayerParams<T>& lp = model.layers[l];
    if (c.is_stack_layer(l)) {
      h = sublayer_apply(
          [&](const Tensor<T>& x) { return stack_attention(x, stack_cfg, lp.stack, lanes); }, h,
          lp.attn_norm_gain, lp.attn_norm_bias, c.dropout, mode, rng);
    } else {
      h = sublayer_apply(
          [&](const Tensor<T>& x) { return sdpa_multihead(x, sdpa_cfg, lp.sdpa, mode, rng, lanes); },
          h, lp.attn_norm_gain, lp.attn_norm_bias, c.dropout, mode, rng);
    }
    h = sublayer_apply(
        [&](const Tensor<T>& x) { return detail::feedforward(x, lp, c.dropout, mode, rng); }, h,
        lp.ffn_norm_gain, lp.ffn_norm_bias, c.dropout, mode, rng);
  }
  return h;
}

}  // namespace detail

/// Logits for a batch of equal-length sequences: rows are sequence-major,
/// (|x| + 1) per sequence, columns are the output vocabulary.
template <typename T, typename Rng>
Tensor<T> forward_logits(const Model<T>& model, const std::vector<std::vector<int>>& batch,
                         Mode mode, Rng& rng) {
  Tensor<T> h = detail::embed_batch(model, batch, mode, rng);
  h = detail::run_layers(model, h, batch.size(), model.config.num_layers, mode, rng);
  h = layer_norm(h, model.final_norm_gain, model.final_norm_bias);
  return add_rowwise(matmul(h, model.head_weight), model.head_bias);
}

/// Stack actions of one sequence in eval mode, one row per input position
/// (BOS first). Superposition rows are (push, pop, no-op) probabilities;
/// nondeterministic rows are the raw log transition weights.
template <typename T>
Tensor<T> stack_actions(const Model<T>& model, const std::vector<int>& tokens) {
  const ModelConfig& c = model.config;
  if (c.variant == AttentionVariant::kSdpa) {
    throw ParameterError("model has no stack attention layer");
  }
  std::mt19937_64 unused(0);
  const std::vector<std::vector<int>> batch{tokens};
  const std::size_t layer = c.stack_layer_index - 1;
  Tensor<T> h = detail::embed_batch(model, batch, Mode::kEval, unused);
  h = detail::run_layers(model, h, 1, layer, Mode::kEval, unused);
  const LayerParams<T>& lp = model.layers[layer];
  Tensor<T> logits = matmul(layer_norm(h, lp.attn_norm_gain, lp.attn_norm_bias), lp.stack.action_weight);
  return c.variant == AttentionVariant::kSuperposition ? softmax(logits) : logits;
}

template <typename T, typename Rng>
Tensor<T> forward_logits(const Model<T>& model, const std::vector<int>& tokens, Mode mode,
                         Rng& rng) {
  return forward_logits(model, std::vector<std::vector<int>>{tokens}, mode, rng);
}

/// Next-token targets for a batch: the symbols followed by EOS.
inline std::vector<int> next_token_targets(const std::vector<std::vector<int>>& batch, int eos) {
  std::vector<int> out;
  for (const auto& seq : batch) {
    out.insert(out.end(), seq.begin(), seq.end());
    out.push_back(eos);
  }
  return out;
}

/// Summed log-likelihood of a batch (a differentiable scalar).
template <typename T, typename Rng>
Tensor<T> batch_logprob(const Model<T>& model, const std::vector<std::vector<int>>& batch,
                        Mode mode, Rng& rng) {
  return target_log_likelihood(forward_logits(model, batch, mode, rng),
                               next_token_targets(batch, model.config.eos()));
}

/// log p(x) including the final EOS, evaluated without dropout.
template <typename T>
double sequence_logprob(const Model<T>& model, const std::vector<int>& tokens) {
  std::mt19937_64 unused(0);
  return static_cast<double>(
      batch_logprob(model, std::vector<std::vector<int>>{tokens}, Mode::kEval, unused).item());
}

/// Maps a string over the alphabet to token indices. Symbols are single
/// characters when every alphabet entry has length 1.
inline std::vector<int> tokenize(const ModelConfig& c, const std::string& text) {
  std::vector<int> out;
  for (char ch : text) {
    int found = -1;
    for (std::size_t i = 0; i < c.alphabet.size(); ++i)
      if (c.alphabet[i].size() == 1 && c.alphabet[i][0] == ch) found = static_cast<int>(i);
    if (found < 0) throw InputError(std::string("symbol '") + ch + "' not in the alphabet");
    out.push_back(found);
  }
  return out;
}

}  // namespace stackattn

#include "stackattn/init.hpp"
