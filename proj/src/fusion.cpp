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

#include "repfuse/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace repfuse {

template <typename T>
BatchNormParams<double> bn_params(const BatchNorm<T>& bn) {
  const std::int64_t C = bn.channels();
  BatchNormParams<double> p{bn.gamma.value.template cast<double>(),
                            bn.beta.value.template cast<double>(),
                            bn.running_mean.template cast<double>(), Tensor<double>(Shape(C))};
  for (std::int64_t c = 0; c < C; ++c) {
    p.std[c] = std::sqrt(static_cast<double>(bn.running_var[c]) + bn.eps);
  }
  return p;
}

FoldedConv fuse_conv_bn(const ConvParams<double>& conv, const BatchNormParams<double>& bn) {
  const std::int64_t C = conv.kernel.shape().n();
  if (bn.gamma.numel() != C || bn.beta.numel() != C || bn.mean.numel() != C ||
      bn.std.numel() != C) {
    throw std::invalid_argument("fuse_conv_bn: kernel has " + std::to_string(C) +
                                " output channels but BN has " +
                                std::to_string(bn.gamma.numel()));
  }
  if (conv.bias && conv.bias->numel() != C) {
    throw std::invalid_argument("fuse_conv_bn: conv bias length mismatch");
  }
  FoldedConv out{conv.kernel.clone(), Tensor<double>(Shape(C))};
  const std::int64_t per_out = conv.kernel.numel() / std::max<std::int64_t>(C, 1);
  for (std::int64_t j = 0; j < C; ++j) {
    if (!(bn.std[j] > 0)) throw std::invalid_argument("fuse_conv_bn: non-positive BN std");
    const double t = bn.gamma[j] / bn.std[j];
    double* row = out.kernel.ptr() + j * per_out;
    for (std::int64_t i = 0; i < per_out; ++i) row[i] *= t;
    out.bias[j] = bn.beta[j] - bn.mean[j] * t + (conv.bias ? t * (*conv.bias)[j] : 0.0);
  }
  return out;
}

FoldedConv merge_parallel(std::span<const FoldedConv> branches) {
  if (branches.empty()) throw std::invalid_argument("merge_parallel: no branches");
  FoldedConv out{branches[0].kernel.clone(), branches[0].bias.clone()};
  for (std::size_t n = 1; n < branches.size(); ++n) {
    require_same_shape(out.kernel.shape(), branches[n].kernel.shape(), "merge_parallel kernel");
    require_same_shape(out.bias.shape(), branches[n].bias.shape(), "merge_parallel bias");
    for (std::int64_t i = 0; i < out.kernel.numel(); ++i) out.kernel[i] += branches[n].kernel[i];
    for (std::int64_t i = 0; i < out.bias.numel(); ++i) out.bias[i] += branches[n].bias[i];
  }
  return out;
}

FoldedConv merge_sequential(const FoldedConv& first, const FoldedConv& second) {
  const Shape& f1 = first.kernel.shape();
  const Shape& f2 = second.kernel.shape();
  if (f1.h() != 1 || f1.w() != 1) {
    throw std::invalid_argument(
        "merge_sequential: unsupported sequence, the leading conv must be 1x1");
  }
  if (f1.n() != f2.c()) {
    throw DimensionError("merge_sequential: channel axis mismatch, first produces " +
                         std::to_string(f1.n()) + " channels, second consumes " +
                         std::to_string(f2.c()));
  }
  const std::int64_t C_out = f2.n(), D = f2.c(), C_in = f1.c(), K_h = f2.h(), K_w = f2.w();
  FoldedConv out{Tensor<double>(Shape(C_out, C_in, K_h, K_w)), second.bias.clone()};
  for (std::int64_t j = 0; j < C_out; ++j) {
    double bias = 0;
    for (std::int64_t d = 0; d < D; ++d) {
      for (std::int64_t u = 0; u < K_h; ++u) {
        for (std::int64_t v = 0; v < K_w; ++v) {
          const double w2 = second.kernel.at(j, d, u, v);
          bias += first.bias[d] * w2;
          for (std::int64_t c = 0; c < C_in; ++c) {
            out.kernel.at(j, c, u, v) += w2 * first.kernel.at(d, c, 0, 0);
          }
        }
      }
    }
    out.bias[j] += bias;
  }
  return out;
}

Tensor<double> avgpool_to_conv(std::int64_t k, std::int64_t channels) {
  if (k < 1 || channels < 1) throw std::invalid_argument("avgpool_to_conv: invalid size");
  Tensor<double> out(Shape(channels, channels, k, k));
  const double v = 1.0 / static_cast<double>(k * k);
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t u = 0; u < k; ++u)
      for (std::int64_t w = 0; w < k; ++w) out.at(c, c, u, w) = v;
  return out;
}

Tensor<double> pad_kernel_center(const Tensor<double>& kernel, std::int64_t K) {
  const Shape& s = kernel.shape();
  if (s.h() > K || s.w() > K || s.h() % 2 == 0 || s.w() % 2 == 0) {
    throw std::invalid_argument("pad_kernel_center: kernel " + std::to_string(s.h()) + "x" +
                                std::to_string(s.w()) + " cannot be centered in " +
                                std::to_string(K) + "x" + std::to_string(K));
  }
  if (s.h() == K && s.w() == K) return kernel.clone();
  Tensor<double> out(Shape(s.n(), s.c(), K, K));
  const std::int64_t oh = (K - s.h()) / 2, ow = (K - s.w()) / 2;
  for (std::int64_t o = 0; o < s.n(); ++o)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t u = 0; u < s.h(); ++u)
        for (std::int64_t v = 0; v < s.w(); ++v) out.at(o, c, u + oh, v + ow) = kernel.at(o, c, u, v);
  return out;
}

Tensor<double> identity_to_conv(std::int64_t channels) {
  Tensor<double> out(Shape(channels, channels, 1, 1));
  for (std::int64_t c = 0; c < channels; ++c) out.at(c, c, 0, 0) = 1.0;
  return out;
}

template <typename T>
Tensor<T> FusedConv<T>::forward(const Tensor<T>& x) const {
  Var<T> b(bias);
  return ad::conv2d(ad::constant(x), ad::constant(kernel), &b, stride, padding, padding).value;
}

template <typename T>
FoldedConv fold_branch(const RepBlock<T>& block, int j) {
  const BranchSpec<T>& b = block.branches.at(static_cast<std::size_t>(j));
  const std::int64_t K = block.K;
  const Tensor<double> main = block.main_kernel.value.template cast<double>();
  const BatchNormParams<double> bn = bn_params(b.bn);
  switch (b.kind) {
    case BranchKind::ConvKxK:
      return fuse_conv_bn({main, std::nullopt}, bn);
    case BranchKind::Conv1x1:
    case BranchKind::Conv1xK:
    case BranchKind::ConvKx1: {
      const auto [h, w] = shared_crop_extent(b.kind, K);
      FoldedConv f = fuse_conv_bn({crop_shared_kernel(main, h, w), std::nullopt}, bn);
      return {pad_kernel_center(f.kernel, K), f.bias};
    }
    case BranchKind::Seq1x1KxK:
    case BranchKind::Seq1x1Avg: {
      const FoldedConv first =
          fuse_conv_bn({b.pre_kernel->value.template cast<double>(), std::nullopt}, bn_params(*b.pre_bn));
      const std::int64_t mid = first.kernel.shape().n();
      const FoldedConv second{b.kind == BranchKind::Seq1x1KxK ? main : avgpool_to_conv(K, mid),
                              Tensor<double>(Shape(block.c_out))};
      const FoldedConv merged = merge_sequential(first, second);
      return fuse_conv_bn({merged.kernel, merged.bias}, bn);
    }
    case BranchKind::SkipConnect: {
      FoldedConv f = fuse_conv_bn({identity_to_conv(block.c_in), std::nullopt}, bn);
      return {pad_kernel_center(f.kernel, K), f.bias};
    }
  }
  throw std::logic_error("unhandled branch kind");
}

template <typename T>
FusedConv<T> fuse_block(const RepBlock<T>& block, std::span<const int> gates) {
  if (gates.size() != block.branches.size()) {
    throw std::invalid_argument(block.name + ": expected " +
                                std::to_string(block.branches.size()) + " gates, got " +
                                std::to_string(gates.size()));
  }
  if (gates[static_cast<std::size_t>(block.protected_branch)] == 0) {
    throw std::invalid_argument(block.name + ": gates exclude the protected convKxK branch");
  }
  std::vector<FoldedConv> folded;
  FusedConv<T> out;
  for (std::size_t j = 0; j < gates.size(); ++j) {
    if (gates[j] == 0) continue;
    folded.push_back(fold_branch(block, static_cast<int>(j)));
    out.provenance.push_back(block.branches[j].kind);
  }
  const FoldedConv merged = merge_parallel(folded);
  out.kernel = merged.kernel.template cast<T>();
  out.bias = merged.bias.template cast<T>();
  out.stride = block.stride;
  out.padding = block.K / 2;
  return out;
}

template BatchNormParams<double> bn_params<float>(const BatchNorm<float>&);
template BatchNormParams<double> bn_params<double>(const BatchNorm<double>&);
template struct FusedConv<float>;
template struct FusedConv<double>;
template FoldedConv fold_branch<float>(const RepBlock<float>&, int);
template FoldedConv fold_branch<double>(const RepBlock<double>&, int);
template FusedConv<float> fuse_block<float>(const RepBlock<float>&, std::span<const int>);
template FusedConv<double> fuse_block<double>(const RepBlock<double>&, std::span<const int>);

}  // namespace repfuse
