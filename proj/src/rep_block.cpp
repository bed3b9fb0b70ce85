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

#include "repfuse/rep_block.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <stdexcept>

namespace repfuse {

namespace {

constexpr std::array<std::string_view, 7> kKindNames{
    "conv1x1", "convKxK", "seq1x1_KxK", "seq1x1_avg", "conv1xK", "convKx1", "skip"};

template <typename T>
Tensor<T> kaiming_normal(const Shape& shape, std::int64_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

std::string_view branch_kind_name(BranchKind kind) {
  return kKindNames.at(static_cast<std::size_t>(kind));
}

BranchKind parse_branch_kind(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == name) return static_cast<BranchKind>(i);
  }
  throw FormatError("unknown branch kind '" + std::string(name) + "'");
}

bool shares_main_kernel(BranchKind kind) {
  return kind != BranchKind::Seq1x1Avg && kind != BranchKind::SkipConnect;
}

std::pair<std::int64_t, std::int64_t> shared_crop_extent(BranchKind kind, std::int64_t K) {
  switch (kind) {
    case BranchKind::Conv1x1:
      return {1, 1};
    case BranchKind::Conv1xK:
      return {1, K};
    case BranchKind::ConvKx1:
      return {K, 1};
    case BranchKind::ConvKxK:
    case BranchKind::Seq1x1KxK:
      return {K, K};
    default:
      throw std::invalid_argument(std::string(branch_kind_name(kind)) +
                                  " does not use the shared kernel");
  }
}

template <typename T>
Tensor<T> crop_shared_kernel(const Tensor<T>& main_kernel, std::int64_t h, std::int64_t w) {
  return ad::crop_kernel(ad::constant(main_kernel), h, w).value;
}

template <typename T>
std::vector<BranchKind> RepBlock<T>::kinds() const {
  std::vector<BranchKind> out;
  for (const auto& b : branches) out.push_back(b.kind);
  return out;
}

template <typename T>
int RepBlock<T>::index_of(BranchKind kind) const {
  for (std::size_t j = 0; j < branches.size(); ++j) {
    if (branches[j].kind == kind) return static_cast<int>(j);
  }
  return -1;
}

template <typename T>
std::vector<Parameter<T>*> RepBlock<T>::parameters() {
  std::vector<Parameter<T>*> out{&main_kernel};
  for (auto& b : branches) {
    if (b.pre_kernel) out.push_back(b.pre_kernel.get());
    if (b.pre_bn) {
      out.push_back(&b.pre_bn->gamma);
      out.push_back(&b.pre_bn->beta);
    }
    out.push_back(&b.bn.gamma);
    out.push_back(&b.bn.beta);
  }
  return out;
}

template <typename T>
std::vector<BatchNorm<T>*> RepBlock<T>::batch_norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto& b : branches) {
    if (b.pre_bn) out.push_back(b.pre_bn.get());
    out.push_back(&b.bn);
  }
  return out;
}

std::vector<BranchKind> effective_branch_kinds(std::int64_t c_in, std::int64_t c_out,
                                               std::int64_t stride,
                                               std::span<const BranchKind> kinds) {
  std::vector<BranchKind> out;
  for (BranchKind k : kAllBranchKinds) {
    int count = 0;
    for (BranchKind q : kinds) count += q == k ? 1 : 0;
    if (count > 1) {
      throw std::invalid_argument("branch kind " + std::string(branch_kind_name(k)) +
                                  " appears more than once");
    }
    if (count == 0) continue;
    if (k == BranchKind::SkipConnect && (c_in != c_out || stride != 1)) continue;
    out.push_back(k);
  }
  bool has_main = false;
  for (BranchKind k : out) has_main = has_main || k == BranchKind::ConvKxK;
  if (!has_main) throw std::invalid_argument("a block needs the convKxK branch");
  return out;
}

template <typename T>
RepBlock<T> build_block(std::int64_t c_in, std::int64_t c_out, std::int64_t stride,
                        std::int64_t K, std::span<const BranchKind> kinds, std::mt19937_64& rng,
                        const std::string& name) {
  if (c_in < 1 || c_out < 1) throw std::invalid_argument("block channels must be positive");
  if (stride < 1) throw std::invalid_argument("block stride must be positive");
  if (K < 1 || K % 2 == 0) throw std::invalid_argument("block kernel size K must be odd");
  const auto effective = effective_branch_kinds(c_in, c_out, stride, kinds);
  if (effective.size() < kinds.size()) {
    spdlog::info("{}: skip branch dropped (c_in={}, c_out={}, stride={})", name, c_in, c_out,
                 stride);
  }

  RepBlock<T> block;
  block.name = name;
  block.c_in = c_in;
  block.c_out = c_out;
  block.stride = stride;
  block.K = K;
  block.main_kernel = Parameter<T>(name + ".main_kernel",
                                   kaiming_normal<T>(Shape(c_out, c_in, K, K), c_in * K * K, rng), 4);
  for (BranchKind kind : effective) {
    BranchSpec<T> spec;
    spec.kind = kind;
    spec.shares_main_kernel = shares_main_kernel(kind);
    spec.gate_index = static_cast<int>(block.branches.size());
    const std::string prefix = name + "." + std::string(branch_kind_name(kind));
    if (kind == BranchKind::Seq1x1KxK) {
      Tensor<T> eye(Shape(c_in, c_in, 1, 1));
      for (std::int64_t c = 0; c < c_in; ++c) eye.at(c, c, 0, 0) = T(1);
      spec.pre_kernel = std::make_unique<Parameter<T>>(prefix + ".pre_kernel", eye, 4);
      spec.pre_bn = std::make_unique<BatchNorm<T>>(prefix + ".pre_bn", c_in);
    } else if (kind == BranchKind::Seq1x1Avg) {
      spec.pre_kernel = std::make_unique<Parameter<T>>(
          prefix + ".pre_kernel", kaiming_normal<T>(Shape(c_out, c_in, 1, 1), c_in, rng), 4);
      spec.pre_bn = std::make_unique<BatchNorm<T>>(prefix + ".pre_bn", c_out);
    }
    spec.bn = BatchNorm<T>(prefix + ".bn", c_out);
    if (kind == BranchKind::ConvKxK) block.protected_branch = spec.gate_index;
    block.branches.push_back(std::move(spec));
  }
  return block;
}

template <typename T>
Var<T> branch_forward(RepBlock<T>& block, int j, const Var<T>& x, const Var<T>& main_kernel,
                      Mode mode, Tape<T>* tape) {
  if (x.shape().c() != block.c_in) {
    throw DimensionError(block.name + ": channel axis mismatch, input has " +
                         std::to_string(x.shape().c()) + " channels, block expects " +
                         std::to_string(block.c_in));
  }
  BranchSpec<T>& b = block.branches.at(static_cast<std::size_t>(j));
  const std::int64_t K = block.K;
  const std::int64_t s = block.stride;
  const std::int64_t half = K / 2;
  const Var<T>* no_bias = nullptr;
  switch (b.kind) {
    case BranchKind::ConvKxK:
      return ad::batch_norm(ad::conv2d(x, main_kernel, no_bias, s, half, half), b.bn, mode, tape);
    case BranchKind::Conv1x1:
    case BranchKind::Conv1xK:
    case BranchKind::ConvKx1: {
      const auto [h, w] = shared_crop_extent(b.kind, K);
      Var<T> kernel = ad::crop_kernel(main_kernel, h, w);
      return ad::batch_norm(ad::conv2d(x, kernel, no_bias, s, h / 2, w / 2), b.bn, mode, tape);
    }
    case BranchKind::Seq1x1KxK: {
      // Pad first: the 1x1 stage then sees the zero border, and its BN output
      // there is the folded bias, which the sequential merge reproduces exactly.
      Var<T> y = ad::conv2d(ad::pad2d(x, half), ad::param(tape, *b.pre_kernel), no_bias, 1, 0, 0);
      y = ad::batch_norm(y, *b.pre_bn, mode, tape);
      return ad::batch_norm(ad::conv2d(y, main_kernel, no_bias, s, 0, 0), b.bn, mode, tape);
    }
    case BranchKind::Seq1x1Avg: {
      Var<T> y = ad::conv2d(ad::pad2d(x, half), ad::param(tape, *b.pre_kernel), no_bias, 1, 0, 0);
      y = ad::batch_norm(y, *b.pre_bn, mode, tape);
      return ad::batch_norm(ad::avg_pool2d(y, K, s, 0), b.bn, mode, tape);
    }
    case BranchKind::SkipConnect:
      return ad::batch_norm(x, b.bn, mode, tape);
  }
  throw std::logic_error("unhandled branch kind");
}

template <typename T>
Var<T> branch_forward(RepBlock<T>& block, int j, const Var<T>& x, Mode mode, Tape<T>* tape) {
  return branch_forward(block, j, x, ad::param(tape, block.main_kernel), mode, tape);
}

template <typename T>
Var<T> block_preactivation(RepBlock<T>& block, const Var<T>& x, std::span<const BranchGate> gates,
                           Mode mode, Tape<T>* tape) {
  if (gates.size() != block.branches.size()) {
    throw std::invalid_argument(block.name + ": expected " +
                                std::to_string(block.branches.size()) + " gates, got " +
                                std::to_string(gates.size()));
  }
  Var<T> main = ad::param(tape, block.main_kernel);
  std::vector<Var<T>> outputs;
  for (std::size_t j = 0; j < gates.size(); ++j) {
    const BranchGate& g = gates[j];
    if (g.z == 0.0) continue;
    Var<T> o = branch_forward(block, static_cast<int>(j), x, main, mode, tape);
    if (g.alpha_grad != nullptr) {
      o = ad::straight_through_gate(o, g.z, g.z_soft, g.lambda, g.alpha_grad);
    } else if (g.z != 1.0) {
      o = ad::scale(o, static_cast<T>(g.z));
    }
    outputs.push_back(std::move(o));
  }
  if (outputs.empty()) throw std::invalid_argument(block.name + ": every branch is gated off");
  if (outputs.size() == 1) return outputs.front();
  return ad::add_n<T>(outputs);
}

template <typename T>
Var<T> block_forward(RepBlock<T>& block, const Var<T>& x, std::span<const BranchGate> gates,
                     Mode mode, Tape<T>* tape) {
  return ad::relu(block_preactivation(block, x, gates, mode, tape));
}

template <typename T>
Var<T> block_forward(RepBlock<T>& block, const Var<T>& x, std::span<const double> gates,
                     Mode mode, Tape<T>* tape) {
  const auto g = constant_gates(gates);
  return block_forward<T>(block, x, g, mode, tape);
}

std::vector<BranchGate> constant_gates(std::span<const double> z) {
  std::vector<BranchGate> out(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) out[j].z = z[j];
  return out;
}

std::vector<BranchGate> constant_gates(std::span<const int> z) {
  std::vector<BranchGate> out(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) out[j].z = static_cast<double>(z[j]);
  return out;
}

#define REPFUSE_INSTANTIATE_BLOCK(T)                                                            \
  template Tensor<T> crop_shared_kernel<T>(const Tensor<T>&, std::int64_t, std::int64_t);       \
  template struct RepBlock<T>;                                                                  \
  template RepBlock<T> build_block<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t,   \
                                      std::span<const BranchKind>, std::mt19937_64&,            \
                                      const std::string&);                                      \
  template Var<T> branch_forward<T>(RepBlock<T>&, int, const Var<T>&, const Var<T>&, Mode,      \
                                    Tape<T>*);                                                  \
  template Var<T> branch_forward<T>(RepBlock<T>&, int, const Var<T>&, Mode, Tape<T>*);          \
  template Var<T> block_preactivation<T>(RepBlock<T>&, const Var<T>&,                           \
                                         std::span<const BranchGate>, Mode, Tape<T>*);          \
  template Var<T> block_forward<T>(RepBlock<T>&, const Var<T>&, std::span<const BranchGate>,    \
                                   Mode, Tape<T>*);                                             \
  template Var<T> block_forward<T>(RepBlock<T>&, const Var<T>&, std::span<const double>, Mode,  \
                                   Tape<T>*);

REPFUSE_INSTANTIATE_BLOCK(float)
REPFUSE_INSTANTIATE_BLOCK(double)

}  // namespace repfuse
