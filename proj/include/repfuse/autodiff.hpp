// Copyright 2026 The RepFuse Authors. All Rights Reserved.
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

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "repfuse/tensor.hpp"

namespace repfuse {

enum class Mode { Train, Eval };

/// A named learnable tensor. `rank` is the logical rank used by checkpoints
/// (a bias vector is stored as Shape{C} but has rank 1).
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  int rank = 4;
  // Set when a backward pass reached this parameter since the last zero_grad().
  bool touched = false;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<T> init, int logical_rank)
      : name(std::move(param_name)),
        value(std::move(init)),
        grad(value.shape()),
        rank(logical_rank) {}

  void zero_grad() {
    grad.fill(T(0));
    touched = false;
  }
};

/// Batch-norm layer state: learnable affine plus running statistics.
template <typename T>
struct BatchNorm {
  static constexpr double kDefaultEps = 1e-5;
  static constexpr double kDefaultMomentum = 0.1;

  Parameter<T> gamma;
  Parameter<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double eps = kDefaultEps;
  double momentum = kDefaultMomentum;
  // >= 0 while a calibration pass is running: statistics become a cumulative
  // average over the calibration batches instead of an exponential one.
  std::int64_t calibration_batches = -1;

  BatchNorm() = default;
  BatchNorm(const std::string& prefix, std::int64_t channels)
      : gamma(prefix + ".gamma", Tensor<T>(Shape(channels), T(1)), 1),
        beta(prefix + ".beta", Tensor<T>(Shape(channels), T(0)), 1),
        running_mean(Shape(channels), T(0)),
        running_var(Shape(channels), T(1)) {}

  std::int64_t channels() const { return gamma.value.numel(); }
};

template <typename T>
class Tape;

/// A value flowing through the tape. `node < 0` means no gradient is needed.
template <typename T>
struct Var {
  Tensor<T> value;
  Tape<T>* tape = nullptr;
  int node = -1;

  Var() = default;
  explicit Var(Tensor<T> v) : value(std::move(v)) {}

  bool requires_grad() const { return node >= 0; }
  const Shape& shape() const { return value.shape(); }
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
/// insertion order is already a topological order; backward() walks it in
/// reverse. Confined to a single thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_output)>;

  /// Appends a node whose gradient has `shape`.
  int record(const Shape& shape, BackwardFn fn);

  /// Zero-initialized on first use; accumulate into it.
  Tensor<T>& grad(int node);
  bool has_grad(int node) const;

  void backward(const Var<T>& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    Tensor<T> grad;
    bool has_grad = false;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace ad {

template <typename T>
Var<T> constant(Tensor<T> value);

/// Leaf bound to a parameter; backward accumulates into p.grad.
template <typename T>
Var<T> param(Tape<T>* tape, Parameter<T>& p);

/// bias may be null. Padding is zero padding on each side.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias, std::int64_t stride,
              std::int64_t pad_h, std::int64_t pad_w);

/// Spatial zero padding on all four sides.
template <typename T>
Var<T> pad2d(const Var<T>& x, std::int64_t pad);

/// Centered h x w window of a (C_out, C_in, K, K) kernel.
template <typename T>
Var<T> crop_kernel(const Var<T>& kernel, std::int64_t h, std::int64_t w);

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::int64_t k, std::int64_t stride, std::int64_t pad);

template <typename T>
Var<T> batch_norm(const Var<T>& x, BatchNorm<T>& bn, Mode mode, std::type_identity_t<Tape<T>>* tape);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> add_n(std::span<const Var<T>> xs);

/// t * s for a single-element s; d/ds is <upstream, t>.
template <typename T>
Var<T> scale(const Var<T>& t, const Var<T>& s);

template <typename T>
Var<T> scale(const Var<T>& t, T s);

/// sigmoid((alpha + zeta) / lambda) for a single-element alpha.
template <typename T>
Var<T> logistic_gate(const Var<T>& alpha, double zeta, double lambda);

/// Straight-through gate: forward multiplies by the hard value z_hard; the
/// architecture gradient <upstream, O> * z_soft * (1 - z_soft) / lambda is
/// added to *alpha_grad during backward.
template <typename T>
Var<T> straight_through_gate(const Var<T>& branch_output, double z_hard, double z_soft,
                             double lambda, double* alpha_grad);

template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

/// x is flattened per sample; weight is (out, in), bias (out). Output (N, out, 1, 1).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Mean cross-entropy over the batch; logits (N, K, 1, 1).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

/// sum(x * w) with a constant weight tensor.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w);

}  // namespace ad
}  // namespace repfuse
