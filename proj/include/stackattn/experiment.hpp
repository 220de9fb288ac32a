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

#include <string>

#include <nlohmann/json.hpp>

#include "stackattn/checkpoint.hpp"
#include "stackattn/model.hpp"
#include "stackattn/tasks.hpp"
#include "stackattn/train.hpp"

namespace stackattn {

/// Reference architecture for a task: d_model 32 (28 with the
/// nondeterministic stack), ffn 2*d_model, 4 heads, stack in layer 3 of 5,
/// m = 32 for superposition, m = 5 and |G| = 3 for the nondeterministic
/// stack with |Q| = 3 on hardest-cfl and 2 elsewhere.
inline ModelConfig default_model_config(const TaskSpec& task, AttentionVariant variant) {
  ModelConfig c;
  c.variant = variant;
  c.alphabet = task.alphabet();
  if (variant == AttentionVariant::kNondeterministic) {
    c.d_model = 28;
    c.stack_vector_dim = 5;
    c.num_states = task.name == "hardest-cfl" ? 3 : 2;
    c.num_symbols = 3;
  } else {
    c.d_model = 32;
    c.stack_vector_dim = 32;
  }
  c.ffn_hidden = 2 * c.d_model;
  return c;
}

/// Human-readable name of column `k` of a nondeterministic action row.
inline std::string transition_label(const VpdaConfig& c, std::size_t k) {
  const std::size_t K = c.actions_per_target();
  const std::size_t a = k % K, r = (k / K) % c.num_states, x = (k / K / c.num_states) % c.num_symbols,
                    q = k / K / c.num_states / c.num_symbols;
  std::string s = std::to_string(q) + "," + std::to_string(x) + "->" + std::to_string(r) + ",";
  if (a < c.num_symbols) return s + "push" + std::to_string(a);
  if (a < 2 * c.num_symbols) return s + "repl" + std::to_string(a - c.num_symbols);
  return s + "pop";
}

/// Column labels of a superposition action row.
inline const char* const kSuperpositionActions[3] = {"push", "noop", "pop"};

}  // namespace stackattn
