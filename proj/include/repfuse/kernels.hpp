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

// OpenMP-parallel compute kernels. Every kernel partitions over batch samples
// or channels; cross-thread reductions are combined in thread-index order so
// results are reproducible for a fixed thread count.

#include <cstdint>

namespace repfuse::kernels {

struct ConvGeometry {
  std::int64_t batch = 1;
  std::int64_t in_channels = 1;
  std::int64_t in_h = 1;
  std::int64_t in_w = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t pad_h = 0;
  std::int64_t pad_w = 0;

  std::int64_t out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride + 1; }
  std::int64_t patch_size() const { return in_channels * kernel_h * kernel_w; }
  bool is_pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad_h == 0 && pad_w == 0;
  }
};

struct PoolGeometry {
  std::int64_t batch = 1;
  std::int64_t channels = 1;
  std::int64_t in_h = 1;
  std::int64_t in_w = 1;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  std::int64_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

/// Number of worker threads the kernels will use.
int max_threads();
/// Sets the OpenMP worker count (1 pins everything to the calling thread).
void set_num_threads(int n);

/// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* columns);

/// Accumulates columns back into image (image is not cleared).
template <typename T>
void col2im(const ConvGeometry& g, const T* columns, T* image);

// bias may be null.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias,
                    T* output);

/// Overwrites grad_input.
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* grad_output, const T* weight,
                           T* grad_input);

/// Overwrites grad_weight and (if non-null) grad_bias.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_output,
                            T* grad_weight, T* grad_bias);

// Zero padding is counted in the divisor (window sum / k^2).
template <typename T>
void avg_pool2d_forward(const PoolGeometry& g, const T* input, T* output);
template <typename T>
void avg_pool2d_backward(const PoolGeometry& g, const T* grad_output, T* grad_input);

/// Per-channel biased mean and variance over (N, H, W).
template <typename T>
void channel_moments(std::int64_t batch, std::int64_t channels, std::int64_t spatial,
                     const T* input, T* mean, T* var);

/// y = scale[c] * x + shift[c]
template <typename T>
void channel_affine(std::int64_t batch, std::int64_t channels, std::int64_t spatial,
                    const T* input, const T* scale, const T* shift, T* output);

}  // namespace repfuse::kernels
