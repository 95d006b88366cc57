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

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lightsphere/random.hpp"

namespace nls {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Parameter storage is aligned to Eigen's maximum packet size so that the
// vectorized kernels take the same path on every allocation; plain heap
// vectors make results depend on addresses.
template <typename T>
using ParamVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct ParamBlock {
  std::string name;
  ParamVector<T> value;
  ParamVector<T> grad;
  bool trainable = true;
};

// Named parameter blocks with matching gradient storage.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, std::size_t size) {
    for (const auto& b : blocks_)
      if (b.name == name) throw std::invalid_argument("duplicate parameter block: " + name);
    blocks_.push_back({std::move(name), ParamVector<T>(size, T(0)), ParamVector<T>(size, T(0)), true});
    return blocks_.size() - 1;
  }

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (blocks_[i].name == name) return i;
    throw std::out_of_range("no parameter block named " + name);
  }

  ParamBlock<T>& operator[](std::size_t i) { return blocks_[i]; }
  const ParamBlock<T>& operator[](std::size_t i) const { return blocks_[i]; }
  ParamBlock<T>& operator[](const std::string& name) { return blocks_[index(name)]; }
  const ParamBlock<T>& operator[](const std::string& name) const { return blocks_[index(name)]; }

  std::size_t size() const { return blocks_.size(); }
  auto begin() { return blocks_.begin(); }
  auto end() { return blocks_.end(); }
  auto begin() const { return blocks_.begin(); }
  auto end() const { return blocks_.end(); }

  void zero_grad() {
    for (auto& b : blocks_) std::fill(b.grad.begin(), b.grad.end(), T(0));
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& b : blocks_) {
      const std::size_t i = out.add(b.name, b.value.size());
      for (std::size_t k = 0; k < b.value.size(); ++k) out[i].value[k] = static_cast<U>(b.value[k]);
      out[i].trainable = b.trainable;
    }
    return out;
  }

 private:
  std::vector<ParamBlock<T>> blocks_;
};

// Gradient buffers shaped like a ParamStore, owned by one worker.
template <typename T>
using GradBuffers = std::vector<ParamVector<T>>;

template <typename T>
GradBuffers<T> make_grad_buffers(const ParamStore<T>& store) {
  GradBuffers<T> out;
  out.reserve(store.size());
  for (const auto& b : store) out.emplace_back(b.value.size(), T(0));
  return out;
}

enum class Activation { kRelu, kNone };

struct MLPConfig {
  int in_dim = 1;
  int out_dim = 1;
  int hidden_dim = 128;
  int num_layers = 5;  // affine layers, activation between consecutive ones
  Activation activation = Activation::kRelu;
  double output_tanh_scale = 0.0;  // > 0: output = scale * tanh(linear)

  void validate() const {
    if (in_dim < 1 || out_dim < 1 || hidden_dim < 1 || num_layers < 1)
      throw DimensionError("MLP dims must be >= 1");
  }

  int layer_in(int l) const { return l == 0 ? in_dim : hidden_dim; }
  int layer_out(int l) const { return l == num_layers - 1 ? out_dim : hidden_dim; }

  std::size_t layer_offset(int l) const {
    std::size_t off = 0;
    for (int i = 0; i < l; ++i) off += static_cast<std::size_t>(layer_in(i) + 1) * layer_out(i);
    return off;
  }

  std::size_t param_count() const { return layer_offset(num_layers); }
};

// Saved activations of one batched forward pass.
template <typename T>
struct MlpTape {
  std::vector<Matrix<T>> inputs;  // input of each layer (post-activation of the previous)
  Matrix<T> output;               // final output (after tanh head, if any)
  bool recorded = false;
};

namespace detail {

template <typename T>
auto weight_map(const MLPConfig& cfg, std::span<const T> params, int l) {
  return Eigen::Map<const Matrix<T>>(params.data() + cfg.layer_offset(l), cfg.layer_out(l), cfg.layer_in(l));
}

template <typename T>
auto bias_map(const MLPConfig& cfg, std::span<const T> params, int l) {
  const std::size_t off = cfg.layer_offset(l) + static_cast<std::size_t>(cfg.layer_out(l)) * cfg.layer_in(l);
  return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(params.data() + off, cfg.layer_out(l));
}

}  // namespace detail

// input: in_dim x B (one column per sample).
template <typename T>
Matrix<T> mlp_forward(const MLPConfig& cfg, std::span<const T> params, const Matrix<T>& input,
                      MlpTape<T>* tape = nullptr) {
  if (input.rows() != cfg.in_dim)
    throw DimensionError("mlp_forward: input width " + std::to_string(input.rows()) + " != in_dim " +
                         std::to_string(cfg.in_dim));
  if (params.size() != cfg.param_count()) throw DimensionError("mlp_forward: parameter block size mismatch");
  if (tape) {
    tape->inputs.resize(cfg.num_layers);
    tape->recorded = false;
  }
  Matrix<T> x = input;
  for (int l = 0; l < cfg.num_layers; ++l) {
    Matrix<T> y = detail::weight_map(cfg, params, l) * x;
    y.colwise() += detail::bias_map(cfg, params, l);
    const bool last = l == cfg.num_layers - 1;
    if (!last && cfg.activation == Activation::kRelu) y = y.cwiseMax(T(0));
    if (tape) tape->inputs[l] = std::move(x);
    x = std::move(y);
  }
  if (cfg.output_tanh_scale > 0.0) {
    const T s = static_cast<T>(cfg.output_tanh_scale);
    x = x.unaryExpr([s](T v) { return s * std::tanh(v); });
  }
  if (tape) {
    tape->output = x;
    tape->recorded = true;
  }
  return x;
}

// Accumulates parameter gradients into `grad` (if non-empty) and returns
// dL/dinput when `want_input_grad`.
template <typename T>
Matrix<T> mlp_backward(const MLPConfig& cfg, std::span<const T> params, const MlpTape<T>& tape,
                       const Matrix<T>& dout, std::span<T> grad, bool want_input_grad = true) {
  if (!tape.recorded) throw TapeError("mlp_backward called before a recorded forward pass");
  if (dout.rows() != cfg.out_dim || dout.cols() != tape.output.cols())
    throw DimensionError("mlp_backward: upstream gradient shape mismatch");
  Matrix<T> g = dout;
  if (cfg.output_tanh_scale > 0.0) {
    const T s = static_cast<T>(cfg.output_tanh_scale);
    // d(s tanh z)/dz = s (1 - tanh^2) = s - y^2 / s
    g = g.cwiseProduct(tape.output.unaryExpr([s](T y) { return s - y * y / s; }));
  }
  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const Matrix<T>& x = tape.inputs[l];
    if (!grad.empty()) {
      const std::size_t off = cfg.layer_offset(l);
      Eigen::Map<Matrix<T>> dW(grad.data() + off, cfg.layer_out(l), cfg.layer_in(l));
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(
          grad.data() + off + static_cast<std::size_t>(cfg.layer_out(l)) * cfg.layer_in(l), cfg.layer_out(l));
      dW.noalias() += g * x.transpose();
      db += g.rowwise().sum();
    }
    if (l == 0 && !want_input_grad) return {};
    Matrix<T> gx = detail::weight_map(cfg, params, l).transpose() * g;
    if (l > 0 && cfg.activation == Activation::kRelu) {
      // x is the post-ReLU output of layer l-1; its mask is x > 0.
      gx = gx.cwiseProduct((x.array() > T(0)).template cast<T>().matrix());
    }
    g = std::move(gx);
  }
  return g;
}

enum class FinalLayerInit { kScaled, kZero };

// Kaiming-uniform fan-in init for ReLU layers, 1/sqrt(fan_in) bound for the
// linear output layer (or zeros), biases zero.
template <typename T>
void mlp_init(const MLPConfig& cfg, std::span<T> params, RandomSource& rng,
              FinalLayerInit final_init = FinalLayerInit::kScaled) {
  for (int l = 0; l < cfg.num_layers; ++l) {
    const bool last = l == cfg.num_layers - 1;
    const double fan_in = cfg.layer_in(l);
    const double bound = last ? 1.0 / std::sqrt(fan_in)
                              : std::sqrt((cfg.activation == Activation::kRelu ? 6.0 : 3.0) / fan_in);
    const std::size_t off = cfg.layer_offset(l);
    const std::size_t nw = static_cast<std::size_t>(cfg.layer_out(l)) * cfg.layer_in(l);
    for (std::size_t i = 0; i < nw; ++i)
      params[off + i] = (last && final_init == FinalLayerInit::kZero)
                            ? T(0)
                            : static_cast<T>(rng.uniform(-bound, bound));
    for (int i = 0; i < cfg.layer_out(l); ++i) params[off + nw + i] = T(0);
  }
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-9;
  double weight_decay = 1e-5;
};

template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::vector<ParamVector<T>> m;
  std::vector<ParamVector<T>> v;
  long long step = 0;

  AdamState() = default;
  AdamState(const ParamStore<T>& store, AdamConfig c) : cfg(c) {
    for (const auto& b : store) {
      m.emplace_back(b.value.size(), T(0));
      v.emplace_back(b.value.size(), T(0));
    }
  }
};

// Bias-corrected Adam with decoupled weight decay. Frozen blocks are not
// touched. `post_step` runs after the update (pose clamp hook).
template <typename T>
void adam_step(AdamState<T>& state, ParamStore<T>& params,
               const std::function<void(ParamStore<T>&)>& post_step = {}) {
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameter store");
  ++state.step;
  const AdamConfig& c = state.cfg;
  const T lr = static_cast<T>(c.lr);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T one_b1 = static_cast<T>(1.0 - c.beta1), one_b2 = static_cast<T>(1.0 - c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(state.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(state.step)));
  const T decay = static_cast<T>(1.0 - c.lr * c.weight_decay);
  const T eps = static_cast<T>(c.eps);
  const T step_size = lr / bc1;
  const T inv_sqrt_bc2 = T(1) / std::sqrt(bc2);
  for (std::size_t bi = 0; bi < params.size(); ++bi) {
    auto& block = params[bi];
    if (!block.trainable) continue;
    T* p = block.value.data();
    const T* g = block.grad.data();
    T* m = state.m[bi].data();
    T* v = state.v[bi].data();
    const std::size_t n = block.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + one_b1 * g[i];
      v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
      if (c.weight_decay != 0.0) p[i] *= decay;
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
  if (post_step) post_step(params);
}

}  // namespace nls
