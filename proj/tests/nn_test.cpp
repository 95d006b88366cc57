// Copyright 2026 The Lightsphere Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lightsphere/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <random>
#include <vector>

namespace nls {
namespace {

Matrix<double> random_matrix(int rows, int cols, std::mt19937_64& g) {
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix<double> m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = u(g);
  return m;
}

// Plain loops over the documented parameter layout.
Matrix<double> naive_mlp(const MLPConfig& cfg, const std::vector<double>& p, const Matrix<double>& x) {
  Matrix<double> a = x;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const int in = cfg.layer_in(l), out = cfg.layer_out(l);
    const std::size_t off = cfg.layer_offset(l);
    Matrix<double> y(out, a.cols());
    for (int b = 0; b < a.cols(); ++b)
      for (int o = 0; o < out; ++o) {
        double s = p[off + static_cast<std::size_t>(out) * in + o];
        for (int i = 0; i < in; ++i) s += p[off + static_cast<std::size_t>(i) * out + o] * a(i, b);
        const bool last = l == cfg.num_layers - 1;
        y(o, b) = (!last && cfg.activation == Activation::kRelu) ? std::max(s, 0.0) : s;
      }
    a = y;
  }
  if (cfg.output_tanh_scale > 0)
    for (int i = 0; i < a.size(); ++i) a.data()[i] = cfg.output_tanh_scale * std::tanh(a.data()[i]);
  return a;
}

TEST(ParamStore, StorageIsPacketAligned) {
  ParamStore<float> s;
  for (std::size_t n : {1, 3, 17, 1000}) s.add("b" + std::to_string(n), n);
  auto grads = make_grad_buffers(s);
  AdamState<float> adam(s, {});
  auto aligned = [](const void* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; };
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_TRUE(aligned(s[i].value.data()));
    EXPECT_TRUE(aligned(s[i].grad.data()));
    EXPECT_TRUE(aligned(grads[i].data()));
    EXPECT_TRUE(aligned(adam.m[i].data()));
    EXPECT_TRUE(aligned(adam.v[i].data()));
  }
}

TEST(MlpForward, ZeroParamsGiveZero) {
  const MLPConfig cfg{4, 3, 8, 3, Activation::kRelu, 0.0};
  std::vector<double> p(cfg.param_count(), 0.0);
  std::mt19937_64 g(1);
  const auto out = mlp_forward<double>(cfg, p, random_matrix(4, 5, g));
  EXPECT_EQ(out.norm(), 0.0);
}

TEST(MlpForward, IdentityLinearLayer) {
  const MLPConfig cfg{3, 3, 3, 1, Activation::kNone, 0.0};
  std::vector<double> p(cfg.param_count(), 0.0);
  for (int i = 0; i < 3; ++i) p[i * 3 + i] = 1.0;
  std::mt19937_64 g(2);
  const auto x = random_matrix(3, 4, g);
  EXPECT_EQ(mlp_forward<double>(cfg, p, x), x);
}

TEST(MlpForward, MatchesNaiveOracle) {
  std::mt19937_64 g(3);
  for (double tanh_scale : {0.0, 0.2}) {
    const MLPConfig cfg{5, 3, 7, 2, Activation::kRelu, tanh_scale};
    std::vector<double> p(cfg.param_count());
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : p) v = u(g);
    const auto x = random_matrix(5, 9, g);
    const auto got = mlp_forward<double>(cfg, p, x);
    const auto expected = naive_mlp(cfg, p, x);
    EXPECT_LE((got - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MlpForward, WidthMismatchThrows) {
  const MLPConfig cfg{4, 3, 8, 3, Activation::kRelu, 0.0};
  std::vector<double> p(cfg.param_count(), 0.0);
  EXPECT_THROW(mlp_forward<double>(cfg, p, Matrix<double>::Zero(5, 2)), DimensionError);
}

TEST(MlpBackward, EmptyTapeThrows) {
  const MLPConfig cfg{2, 1, 4, 2, Activation::kRelu, 0.0};
  std::vector<double> p(cfg.param_count(), 0.0), grad(cfg.param_count(), 0.0);
  MlpTape<double> tape;
  EXPECT_THROW(mlp_backward<double>(cfg, p, tape, Matrix<double>::Zero(1, 1), grad), TapeError);
}

TEST(MlpBackward, ScalarChain) {
  // y = a x, L = y: dL/da = x.
  const MLPConfig cfg{1, 1, 1, 1, Activation::kNone, 0.0};
  std::vector<double> p{2.5, 0.0}, grad(2, 0.0);
  Matrix<double> x(1, 1);
  x(0, 0) = 1.75;
  MlpTape<double> tape;
  mlp_forward<double>(cfg, p, x, &tape);
  mlp_backward<double>(cfg, p, tape, Matrix<double>::Ones(1, 1), grad);
  EXPECT_DOUBLE_EQ(grad[0], 1.75);
  EXPECT_DOUBLE_EQ(grad[1], 1.0);
}

TEST(MlpBackward, MatchesFiniteDifferences) {
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double tanh_scale : {0.0, 0.2}) {
    const MLPConfig cfg{6, 4, 16, 4, Activation::kRelu, tanh_scale};
    std::vector<double> p(cfg.param_count());
    for (auto& v : p) v = u(g);
    const auto x = random_matrix(6, 8, g);
    const auto w = random_matrix(4, 8, g);
    auto loss = [&](const std::vector<double>& pp, const Matrix<double>& xx) {
      return mlp_forward<double>(cfg, pp, xx).cwiseProduct(w).sum();
    };
    MlpTape<double> tape;
    mlp_forward<double>(cfg, p, x, &tape);
    std::vector<double> grad(p.size(), 0.0);
    const auto dx = mlp_backward<double>(cfg, p, tape, w, grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      const double fd = (loss(pp, x) - loss(pm, x)) / (2 * h);
      EXPECT_NEAR(grad[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
    for (int i = 0; i < x.size(); ++i) {
      Matrix<double> xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      EXPECT_NEAR(dx.data()[i], (loss(p, xp) - loss(p, xm)) / (2 * h), 1e-6);
    }
  }
}

TEST(MlpInit, ZeroFinalLayer) {
  const MLPConfig cfg{4, 3, 8, 3, Activation::kRelu, 0.2};
  std::vector<double> p(cfg.param_count(), 1.0);
  RandomSource rng(5);
  mlp_init<double>(cfg, p, rng, FinalLayerInit::kZero);
  for (std::size_t i = cfg.layer_offset(2); i < p.size(); ++i) EXPECT_EQ(p[i], 0.0);
  double hidden_norm = 0;
  for (std::size_t i = 0; i < cfg.layer_offset(2); ++i) hidden_norm += std::abs(p[i]);
  EXPECT_GT(hidden_norm, 0.0);
}

ParamStore<double> scalar_store(double w) {
  ParamStore<double> s;
  s.add("w", 1);
  s[0].value[0] = w;
  return s;
}

TEST(Adam, ZeroGradientZeroDecayIsIdentity) {
  ParamStore<double> s;
  s.add("a", 4);
  s[0].value = {0.1, -0.2, 0.3, 0.4};
  AdamConfig c;
  c.weight_decay = 0;
  AdamState<double> st(s, c);
  const auto before = s[0].value;
  for (int i = 0; i < 5; ++i) adam_step(st, s);
  EXPECT_EQ(s[0].value, before);
}

TEST(Adam, FirstStepHandComputed) {
  auto s = scalar_store(0.0);
  s[0].grad[0] = 1.0;
  AdamConfig c;
  c.weight_decay = 0;
  AdamState<double> st(s, c);
  adam_step(st, s);
  EXPECT_NEAR(s[0].value[0], -1e-3 / (1 + 1e-9), 1e-15);
}

TEST(Adam, MatchesScalarReference) {
  auto s = scalar_store(0.5);
  AdamConfig c;  // paper defaults, decoupled decay
  AdamState<double> st(s, c);
  double w = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = 0.3;
    s[0].grad[0] = g;
    adam_step(st, s);
    w *= 1 - c.lr * c.weight_decay;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    w -= c.lr * mh / (std::sqrt(vh) + c.eps);
    EXPECT_NEAR(s[0].value[0], w, 1e-15);
  }
}

TEST(Adam, FrozenBlocksAreUntouched) {
  ParamStore<float> s;
  s.add("a", 3);
  s.add("b", 3);
  s[0].value = {1, 2, 3};
  s[1].value = {4, 5, 6};
  s[1].trainable = false;
  AdamState<float> st(s, AdamConfig{});
  const auto frozen = s[1].value;
  for (int i = 0; i < 10; ++i) {
    for (auto& b : s) std::fill(b.grad.begin(), b.grad.end(), 0.5f);
    adam_step(st, s);
  }
  EXPECT_EQ(s[1].value, frozen);
  EXPECT_NE(s[0].value[0], 1.0f);
}

TEST(Adam, PostStepHookRuns) {
  auto s = scalar_store(0.0);
  AdamState<double> st(s, AdamConfig{});
  int calls = 0;
  adam_step<double>(st, s, [&](ParamStore<double>&) { ++calls; });
  EXPECT_EQ(calls, 1);
}

}  // namespace
}  // namespace nls
