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

// Structural re-parameterization: every linear branch of a RepBlock is folded
// into a single K x K convolution with bias. All arithmetic here is double
// precision; results are cast to the block's precision at the very end.

#include <optional>
#include <span>
#include <vector>

#include "repfuse/rep_block.hpp"

namespace repfuse {

/// A convolution's kernel and optional bias (stride and padding carried by the caller).
template <typename T>
struct ConvParams {
  Tensor<T> kernel;  // (C_out, C_in, kh, kw)
  std::optional<Tensor<T>> bias;
  std::int64_t stride = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;
};

/// Eval-mode BN as an affine map: gamma * (x - mean) / std + beta.
template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> mean;
  Tensor<T> std;  // sqrt(running_var + eps), strictly positive
};

/// Snapshot of a BN layer's eval statistics, promoted to double.
template <typename T>
BatchNormParams<double> bn_params(const BatchNorm<T>& bn);

/// Kernel plus bias, both in double.
struct FoldedConv {
  Tensor<double> kernel;
  Tensor<double> bias;  // length C_out
};

FoldedConv fuse_conv_bn(const ConvParams<double>& conv, const BatchNormParams<double>& bn);

/// Elementwise sum of equally-shaped kernels and biases.
FoldedConv merge_parallel(std::span<const FoldedConv> branches);

/// Collapses a 1x1 conv (D_mid, D_in) followed by a K x K conv (C_out, D_mid)
/// into one K x K conv (C_out, D_in). Valid when the input was zero-padded
/// before the 1x1 stage and the K x K stage adds no padding.
FoldedConv merge_sequential(const FoldedConv& first, const FoldedConv& second);

/// K x K average pooling as a conv: 1/k^2 on the channel diagonal.
Tensor<double> avgpool_to_conv(std::int64_t k, std::int64_t channels);

/// Embeds an h x w kernel (h, w odd, <= K) at the center of a K x K kernel.
Tensor<double> pad_kernel_center(const Tensor<double>& kernel, std::int64_t K);

/// 1x1 identity kernel (delta over channels).
Tensor<double> identity_to_conv(std::int64_t channels);

/// A plain conv with bias and padding K/2.
template <typename T>
struct FusedConv {
  Tensor<T> kernel;  // (C_out, C_in, K, K)
  Tensor<T> bias;    // (C_out)
  std::int64_t stride = 1;
  std::int64_t padding = 1;
  std::vector<BranchKind> provenance;

  /// Conv only (no activation).
  Tensor<T> forward(const Tensor<T>& x) const;
};

/// Folds the branches with gate 1 into one conv. Uses the BN running
/// statistics. Throws std::invalid_argument when the protected branch is
/// gated off or the gate count is wrong.
template <typename T>
FusedConv<T> fuse_block(const RepBlock<T>& block, std::span<const int> gates);

/// Folded (kernel, bias) of one branch, padded to K x K, in double.
template <typename T>
FoldedConv fold_branch(const RepBlock<T>& block, int j);

}  // namespace repfuse
