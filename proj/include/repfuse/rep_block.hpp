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

#include <array>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "repfuse/autodiff.hpp"

namespace repfuse {

enum class BranchKind : int {
  Conv1x1 = 0,
  ConvKxK,
  Seq1x1KxK,
  Seq1x1Avg,
  Conv1xK,
  ConvKx1,
  SkipConnect,
};

inline constexpr std::array<BranchKind, 7> kAllBranchKinds{
    BranchKind::Conv1x1,   BranchKind::ConvKxK, BranchKind::Seq1x1KxK,  BranchKind::Seq1x1Avg,
    BranchKind::Conv1xK,   BranchKind::ConvKx1, BranchKind::SkipConnect};

std::string_view branch_kind_name(BranchKind kind);
/// Inverse of branch_kind_name; throws FormatError on unknown names.
BranchKind parse_branch_kind(std::string_view name);

/// True for kinds whose conv kernel is a center crop of the main K x K kernel.
bool shares_main_kernel(BranchKind kind);

/// Spatial extent (h, w) of the shared-kernel crop a kind uses.
std::pair<std::int64_t, std::int64_t> shared_crop_extent(BranchKind kind, std::int64_t K);

/// Centered h x w window of a (C_out, C_in, K, K) kernel, as a copy. Inside a
/// tape use ad::crop_kernel, whose backward scatters into the main kernel.
template <typename T>
Tensor<T> crop_shared_kernel(const Tensor<T>& main_kernel, std::int64_t h, std::int64_t w);

template <typename T>
struct BranchSpec {
  BranchKind kind = BranchKind::ConvKxK;
  bool shares_main_kernel = true;
  int gate_index = 0;
  // Leading 1x1 conv and its BN; sequential kinds only.
  std::unique_ptr<Parameter<T>> pre_kernel;
  std::unique_ptr<BatchNorm<T>> pre_bn;
  BatchNorm<T> bn;
};

/// One searchable block: up to seven parallel branches sharing a K x K kernel,
/// summed and passed through relu.
template <typename T>
struct RepBlock {
  std::string name;
  std::int64_t c_in = 0;
  std::int64_t c_out = 0;
  std::int64_t stride = 1;
  std::int64_t K = 3;
  Parameter<T> main_kernel;
  std::vector<BranchSpec<T>> branches;
  int protected_branch = 0;

  std::vector<BranchKind> kinds() const;
  int index_of(BranchKind kind) const;
  std::vector<Parameter<T>*> parameters();
  std::vector<BatchNorm<T>*> batch_norms();
};

/// Builds a block with the requested branch kinds (canonical order). The skip
/// branch is dropped with a logged notice when c_in != c_out or stride != 1.
/// Throws std::invalid_argument when ConvKxK is missing or a kind repeats.
template <typename T>
RepBlock<T> build_block(std::int64_t c_in, std::int64_t c_out, std::int64_t stride,
                        std::int64_t K, std::span<const BranchKind> kinds, std::mt19937_64& rng,
                        const std::string& name = "block");

/// Kinds build_block would keep for the given geometry.
std::vector<BranchKind> effective_branch_kinds(std::int64_t c_in, std::int64_t c_out,
                                               std::int64_t stride,
                                               std::span<const BranchKind> kinds);

/// Per-branch gate. z multiplies the branch output in forward and z == 0
/// skips the branch outright. When alpha_grad is set, the gate is
/// straight-through and backward adds the architecture gradient there.
struct BranchGate {
  double z = 1.0;
  double z_soft = 0.5;
  double lambda = 1.0;
  double* alpha_grad = nullptr;
};

/// Forward of branch j. `main_kernel` must be the tape leaf of
/// block.main_kernel so every sharing branch feeds the same node.
template <typename T>
Var<T> branch_forward(RepBlock<T>& block, int j, const Var<T>& x, const Var<T>& main_kernel,
                      Mode mode, Tape<T>* tape);

template <typename T>
Var<T> branch_forward(RepBlock<T>& block, int j, const Var<T>& x, Mode mode, Tape<T>* tape);

/// Gated branch sum before the nonlinearity.
template <typename T>
Var<T> block_preactivation(RepBlock<T>& block, const Var<T>& x, std::span<const BranchGate> gates,
                           Mode mode, Tape<T>* tape);

/// relu(sum_j z_j * branch_j(x)).
template <typename T>
Var<T> block_forward(RepBlock<T>& block, const Var<T>& x, std::span<const BranchGate> gates,
                     Mode mode, Tape<T>* tape);

template <typename T>
Var<T> block_forward(RepBlock<T>& block, const Var<T>& x, std::span<const double> gates,
                     Mode mode, Tape<T>* tape);

std::vector<BranchGate> constant_gates(std::span<const double> z);
std::vector<BranchGate> constant_gates(std::span<const int> z);

}  // namespace repfuse
