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
#include <random>

#include "stackattn/model.hpp"

namespace stackattn {

/// Xavier bound sqrt(6 / (fan_in + fan_out)).
inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / double(fan_in + fan_out));
}

/// Fully connected weights outside SDPA get Xavier uniform, layer norms get
/// gain 1 and bias 0, everything else (embeddings, SDPA projections, biases,
/// the initial stack vector) is uniform in [-0.1, 0.1]. Parameters are drawn
/// in registration order.
template <typename T, typename Rng>
void init_parameters(Model<T>& model, Rng& rng) {
  for (auto& p : model.parameters) {
    auto data = p.tensor.mutable_data();
    switch (p.init) {
      case ParamInit::kNormGain:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case ParamInit::kNormBias:
        std::fill(data.begin(), data.end(), T(0));
        break;
      case ParamInit::kXavier: {
        const double b = xavier_bound(p.tensor.dim(0), p.tensor.dim(1));
        std::uniform_real_distribution<double> u(-b, b);
        for (auto& v : data) v = T(u(rng));
        break;
      }
      case ParamInit::kUniform: {
        std::uniform_real_distribution<double> u(-0.1, 0.1);
        for (auto& v : data) v = T(u(rng));
        break;
      }
    }
    p.tensor.zero_grad();
  }
}

}  // namespace stackattn
