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

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fsqa/adam.hpp"
#include "fsqa/autodiff.hpp"

namespace fsqa {
namespace {

using TensorD = Tensor<double>;

// Plain scalar Adam, written out from the update equations.
struct ScalarAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0, v = 0;
  int t = 0;
  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return x - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

TensorD param(double x) { return TensorD::from_values({1}, {x}, true); }

void set_grad(TensorD& p, double g) {
  auto loss = scale(p, g);
  backward(sum(loss));
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  for (double g : {3.0, -0.25, 1e-3}) {
    auto p = param(1.0);
    std::vector<TensorD> params{p};
    AdamState state;
    state.learning_rate = 0.01;
    set_grad(p, g);
    adam_step(std::span(params), state);
    const double sign = g > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(p.item(), 1.0 - 0.01 * sign, 1e-6) << "g=" << g;
  }
}

TEST(Adam, ZeroGradientLeavesParametersButCountsStep) {
  auto p = TensorD::from_values({2}, {0.5, -2.0}, true);
  std::vector<TensorD> params{p};
  AdamState state;
  backward(sum(scale(p, 0.0)));
  adam_step(std::span(params), state);
  EXPECT_EQ(p.values()[0], 0.5);
  EXPECT_EQ(p.values()[1], -2.0);
  EXPECT_EQ(state.step_count, 1u);
}

TEST(Adam, ThreeStepTrajectoryMatchesScalarOracle) {
  auto p = param(0.7);
  std::vector<TensorD> params{p};
  AdamState state;
  state.learning_rate = 0.05;
  ScalarAdam oracle{0.05};
  double x = 0.7;
  // f(x) = x^3, gradient 3x^2, recomputed at each new point
  for (int step = 0; step < 3; ++step) {
    backward(sum(mul(mul(p, p), p)));
    const double g = 3 * x * x;
    EXPECT_NEAR(p.grad()[0], g, 1e-12);
    adam_step(std::span(params), state);
    x = oracle.step(x, g);
    EXPECT_NEAR(p.item(), x, 1e-10) << "step " << step + 1;
  }
  EXPECT_EQ(state.step_count, 3u);
}

TEST(Adam, DefaultsMatchConstantSchedule) {
  AdamState state;
  EXPECT_DOUBLE_EQ(state.learning_rate, 2e-5);
  EXPECT_DOUBLE_EQ(state.beta1, 0.9);
  EXPECT_DOUBLE_EQ(state.beta2, 0.999);
  EXPECT_DOUBLE_EQ(state.epsilon, 1e-8);
  EXPECT_EQ(state.step_count, 0u);
}

TEST(Adam, GradientsClearedAfterStep) {
  auto p = param(1.0);
  std::vector<TensorD> params{p};
  AdamState state;
  set_grad(p, 2.0);
  adam_step(std::span(params), state);
  EXPECT_EQ(p.grad()[0], 0.0);
}

TEST(Adam, MomentsCongruentWithParameters) {
  auto a = TensorD::zeros({2, 3}, true);
  auto b = TensorD::zeros({4}, true);
  std::vector<TensorD> params{a, b};
  AdamState state;
  backward(add(sum(a), sum(b)));
  adam_step(std::span(params), state);
  ASSERT_EQ(state.first_moment.size(), 2u);
  EXPECT_EQ(state.first_moment[0].size(), 6u);
  EXPECT_EQ(state.second_moment[1].size(), 4u);
}

TEST(Adam, MissingGradientIsContractError) {
  auto p = TensorD::from_values({1}, {1.0}, false);
  std::vector<TensorD> params{p};
  AdamState state;
  EXPECT_THROW(adam_step(std::span(params), state), ContractError);
}

TEST(Adam, StepCountStrictlyIncreases) {
  auto p = param(1.0);
  std::vector<TensorD> params{p};
  AdamState state;
  for (int i = 1; i <= 5; ++i) {
    set_grad(p, 1.0);
    adam_step(std::span(params), state);
    EXPECT_EQ(state.step_count, static_cast<std::uint64_t>(i));
  }
}

}  // namespace
}  // namespace fsqa
