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

// Serial, loop-for-loop reference kernels. They exist as test oracles and as
// the baseline in bench_kernels; nothing on the training path calls them.

#include "repfuse/kernels.hpp"
#include "repfuse/tensor.hpp"

namespace repfuse::reference {

/// Direct cross-correlation with zero padding. bias may be empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t pad_h, std::int64_t pad_w) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.c() != ws.c()) throw DimensionError("reference conv2d: channel mismatch");
  const std::int64_t oh = (is.h() + 2 * pad_h - ws.h()) / stride + 1;
  const std::int64_t ow = (is.w() + 2 * pad_w - ws.w()) / stride + 1;
  Tensor<T> out(Shape(is.n(), ws.n(), oh, ow));
  for (std::int64_t n = 0; n < is.n(); ++n) {
    for (std::int64_t o = 0; o < ws.n(); ++o) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t x = 0; x < ow; ++x) {
          T acc = bias.empty() ? T(0) : bias[o];
          for (std::int64_t c = 0; c < is.c(); ++c) {
            for (std::int64_t u = 0; u < ws.h(); ++u) {
              for (std::int64_t v = 0; v < ws.w(); ++v) {
                const std::int64_t iy = y * stride - pad_h + u;
                const std::int64_t ix = x * stride - pad_w + v;
                if (iy < 0 || iy >= is.h() || ix < 0 || ix >= is.w()) continue;
                acc += input.at(n, c, iy, ix) * weight.at(o, c, u, v);
              }
            }
          }
          out.at(n, o, y, x) = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::int64_t k, std::int64_t stride,
                     std::int64_t pad) {
  const Shape& is = input.shape();
  const std::int64_t oh = (is.h() + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (is.w() + 2 * pad - k) / stride + 1;
  Tensor<T> out(Shape(is.n(), is.c(), oh, ow));
  for (std::int64_t n = 0; n < is.n(); ++n)
    for (std::int64_t c = 0; c < is.c(); ++c)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          T s = 0;
          for (std::int64_t u = 0; u < k; ++u)
            for (std::int64_t v = 0; v < k; ++v) {
              const std::int64_t iy = y * stride - pad + u;
              const std::int64_t ix = x * stride - pad + v;
              if (iy >= 0 && iy < is.h() && ix >= 0 && ix < is.w()) s += input.at(n, c, iy, ix);
            }
          out.at(n, c, y, x) = s / static_cast<T>(k * k);
        }
  return out;
}

/// Eval-mode batch norm from (gamma, beta, mean, std) vectors.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& mean, const Tensor<T>& std) {
  const Shape& s = input.shape();
  Tensor<T> out(s);
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t y = 0; y < s.h(); ++y)
        for (std::int64_t x = 0; x < s.w(); ++x)
          out.at(n, c, y, x) = gamma[c] * (input.at(n, c, y, x) - mean[c]) / std[c] + beta[c];
  return out;
}

}  // namespace repfuse::reference
