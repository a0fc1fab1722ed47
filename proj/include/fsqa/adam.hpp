/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef FSQA_ADAM_HPP
#define FSQA_ADAM_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsqa/autodiff.hpp"
#include "fsqa/errors.hpp"

namespace fsqa {

// Optimizer state. The moment arrays are allocated on the first step and
// must stay congruent with the parameter list afterwards. The learning rate
// is constant; there is no schedule.
struct AdamState {
  std::uint64_t step_count = 0;
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One bias-corrected Adam update over `params`, then clears their gradients.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) +
                          " has no gradient");
    }
  }
  if (state.first_moment.empty() && state.step_count == 0) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state holds " +
                        std::to_string(state.first_moment.size()) +
                        " moment arrays for " + std::to_string(params.size()) +
                        " parameters");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].values();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != values.size() || v.size() != values.size()) {
      throw ContractError("adam_step: moment size mismatch for parameter " +
                          std::to_string(i));
    }
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] = static_cast<T>(
          values[j] - state.learning_rate * m_hat /
                          (std::sqrt(v_hat) + state.epsilon));
    }
    params[i].zero_grad();
  }
}

}  // namespace fsqa

#endif  // FSQA_ADAM_HPP
