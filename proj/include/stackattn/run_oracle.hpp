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
#include "stackattn/logspace.hpp"
#include "stackattn/vpda.hpp"

// Brute-force dVPDA semantics: every run is enumerated explicitly. Exponential
// in the sequence length; meant for checking the dynamic program on tiny
// inputs.

namespace stackattn {

struct RunElement {
  std::size_t symbol = 0;
  std::vector<double> vector;
};

struct Run {
  double weight = 1;  // product of transition weights
  std::size_t state = VpdaConfig::kStartState;
  std::vector<RunElement> stack;  // bottom first
};

/// All runs of length deltas.size() with nonzero weight. The bottom element
/// can be replaced but never popped. Throws ResourceError past `max_runs`.
inline std::vector<Run> enumerate_runs(const VpdaConfig& config, std::span<const double> r0,
                                       const std::vector<TransitionWeights<double>>& deltas,
                                       const std::vector<std::vector<double>>& pushed,
                                       std::size_t max_runs = 1000000) {
  config.validate();
  const std::size_t Q = config.num_states, G = config.num_symbols;
  if (r0.size() != config.stack_vector_dim) throw DimensionError("enumerate_runs: r0 dimension");
  if (pushed.size() != deltas.size()) throw DimensionError("enumerate_runs: one vector per step");
  Run start;
  start.stack.push_back({VpdaConfig::kBottomSymbol, {r0.begin(), r0.end()}});
  std::vector<Run> runs{start};
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    if (pushed[t].size() != config.stack_vector_dim) {
      throw DimensionError("enumerate_runs: pushed vector dimension");
    }
    std::vector<Run> next;
    auto emit = [&](Run&& run) {
      if (next.size() >= max_runs) throw ResourceError("enumerate_runs: too many runs");
      next.push_back(std::move(run));
    };
    for (const Run& run : runs) {
      const std::size_t q = run.state, x = run.stack.back().symbol;
      for (std::size_t r = 0; r < Q; ++r) {
        for (std::size_t y = 0; y < G; ++y) {
          const double wp = std::exp(deltas[t].push(q, x, r, y));
          if (wp > 0) {
            Run nr = run;
            nr.weight *= wp;
            nr.state = r;
            nr.stack.push_back({y, pushed[t]});
            emit(std::move(nr));
          }
          const double wr = std::exp(deltas[t].replace(q, x, r, y));
          if (wr > 0) {
            Run nr = run;
            nr.weight *= wr;
            nr.state = r;
            nr.stack.back().symbol = y;
            emit(std::move(nr));
          }
        }
        const double wo = std::exp(deltas[t].pop(q, x, r));
        if (wo > 0 && run.stack.size() > 1) {
          Run nr = run;
          nr.weight *= wo;
          nr.state = r;
          nr.stack.pop_back();
          emit(std::move(nr));
        }
      }
    }
    runs = std::move(next);
  }
  return runs;
}

/// Weighted mean of the top vector over runs, split by (state, top symbol)
/// and normalized by the total weight of all runs. Layout [r][y][d]; zero
/// when no run has positive weight.
inline std::vector<double> oracle_reading(const VpdaConfig& config, const std::vector<Run>& runs) {
  const std::size_t m = config.stack_vector_dim, G = config.num_symbols;
  std::vector<double> out(config.reading_dim(), 0.0);
  double total = 0;
  for (const Run& run : runs) total += run.weight;
  if (!(total > 0)) return out;
  for (const Run& run : runs) {
    const auto& top = run.stack.back();
    double* row = out.data() + (run.state * G + top.symbol) * m;
    for (std::size_t d = 0; d < m; ++d) row[d] += run.weight / total * top.vector[d];
  }
  return out;
}

}  // namespace stackattn
