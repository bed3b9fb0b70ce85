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

#include "repfuse/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace repfuse::kernels {

namespace {

// The kernels parallelize over samples themselves; BLAS stays single-threaded
// so the two thread pools never nest.
struct BlasThreadsPinned {
  BlasThreadsPinned() { openblas_set_num_threads(1); }
};
const BlasThreadsPinned kPinBlas;

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }

template <>
void gemm<float>(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
                 float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                  double alpha, const double* a, std::int64_t lda, const double* b,
                  std::int64_t ldb, double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* columns) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.in_h * g.in_w;
    for (std::int64_t u = 0; u < g.kernel_h; ++u) {
      for (std::int64_t v = 0; v < g.kernel_w; ++v) {
        T* row = columns + ((c * g.kernel_h + u) * g.kernel_w + v) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * g.stride - g.pad_h + u;
          T* out = row + y * ow;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = plane + iy * g.in_w;
          for (std::int64_t x = 0; x < ow; ++x) {
            const std::int64_t ix = x * g.stride - g.pad_w + v;
            out[x] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* columns, T* image) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  for (std::int64_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.in_h * g.in_w;
    for (std::int64_t u = 0; u < g.kernel_h; ++u) {
      for (std::int64_t v = 0; v < g.kernel_w; ++v) {
        const T* row = columns + ((c * g.kernel_h + u) * g.kernel_w + v) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * g.stride - g.pad_h + u;
          if (iy < 0 || iy >= g.in_h) continue;
          T* dst = plane + iy * g.in_w;
          const T* src = row + y * ow;
          for (std::int64_t x = 0; x < ow; ++x) {
            const std::int64_t ix = x * g.stride - g.pad_w + v;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* weight, const T* bias,
                    T* output) {
  const std::int64_t spatial = g.out_h() * g.out_w();
  const std::int64_t patch = g.patch_size();
  const std::int64_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::int64_t out_size = g.out_channels * spatial;
  const bool pointwise = g.is_pointwise();
#pragma omp parallel
  {
    std::vector<T> columns(pointwise ? 0 : static_cast<std::size_t>(patch * spatial));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const T* src = input + n * in_size;
      if (!pointwise) {
        im2col(g, src, columns.data());
        src = columns.data();
      }
      T* dst = output + n * out_size;
      gemm<T>(false, false, g.out_channels, spatial, patch, T(1), weight, patch, src, spatial,
              T(0), dst, spatial);
      if (bias != nullptr) {
        for (std::int64_t o = 0; o < g.out_channels; ++o) {
          T* row = dst + o * spatial;
          const T b = bias[o];
          for (std::int64_t i = 0; i < spatial; ++i) row[i] += b;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* grad_output, const T* weight,
                           T* grad_input) {
  const std::int64_t spatial = g.out_h() * g.out_w();
  const std::int64_t patch = g.patch_size();
  const std::int64_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::int64_t out_size = g.out_channels * spatial;
  const bool pointwise = g.is_pointwise();
#pragma omp parallel
  {
    std::vector<T> columns(pointwise ? 0 : static_cast<std::size_t>(patch * spatial));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      T* dst = grad_input + n * in_size;
      const T* dy = grad_output + n * out_size;
      if (pointwise) {
        gemm<T>(true, false, patch, spatial, g.out_channels, T(1), weight, patch, dy, spatial,
                T(0), dst, spatial);
      } else {
        gemm<T>(true, false, patch, spatial, g.out_channels, T(1), weight, patch, dy, spatial,
                T(0), columns.data(), spatial);
        std::fill(dst, dst + in_size, T(0));
        col2im(g, columns.data(), dst);
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* input, const T* grad_output,
                            T* grad_weight, T* grad_bias) {
  const std::int64_t spatial = g.out_h() * g.out_w();
  const std::int64_t patch = g.patch_size();
  const std::int64_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::int64_t out_size = g.out_channels * spatial;
  const std::int64_t w_size = g.out_channels * patch;
  const bool pointwise = g.is_pointwise();
  const int threads = std::max<int>(1, std::min<std::int64_t>(omp_get_max_threads(), g.batch));
  std::vector<std::vector<T>> partial_w(threads, std::vector<T>(w_size, T(0)));
  std::vector<std::vector<T>> partial_b(threads, std::vector<T>(g.out_channels, T(0)));
#pragma omp parallel num_threads(threads)
  {
    const int tid = omp_get_thread_num();
    std::vector<T> columns(pointwise ? 0 : static_cast<std::size_t>(patch * spatial));
    T* acc_w = partial_w[tid].data();
    T* acc_b = partial_b[tid].data();
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const T* src = input + n * in_size;
      if (!pointwise) {
        im2col(g, src, columns.data());
        src = columns.data();
      }
      const T* dy = grad_output + n * out_size;
      gemm<T>(false, true, g.out_channels, patch, spatial, T(1), dy, spatial, src, spatial, T(1),
              acc_w, patch);
      if (grad_bias != nullptr) {
        for (std::int64_t o = 0; o < g.out_channels; ++o) {
          const T* row = dy + o * spatial;
          T s = 0;
          for (std::int64_t i = 0; i < spatial; ++i) s += row[i];
          acc_b[o] += s;
        }
      }
    }
  }
  std::copy(partial_w[0].begin(), partial_w[0].end(), grad_weight);
  for (int t = 1; t < threads; ++t) {
    for (std::int64_t i = 0; i < w_size; ++i) grad_weight[i] += partial_w[t][i];
  }
  if (grad_bias != nullptr) {
    std::copy(partial_b[0].begin(), partial_b[0].end(), grad_bias);
    for (int t = 1; t < threads; ++t) {
      for (std::int64_t o = 0; o < g.out_channels; ++o) grad_bias[o] += partial_b[t][o];
    }
  }
}

template <typename T>
void avg_pool2d_forward(const PoolGeometry& g, const T* input, T* output) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const T inv = T(1) / static_cast<T>(g.kernel * g.kernel);
  const std::int64_t planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = input + p * g.in_h * g.in_w;
    T* dst = output + p * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        T s = 0;
        for (std::int64_t u = 0; u < g.kernel; ++u) {
          const std::int64_t iy = y * g.stride - g.pad + u;
          if (iy < 0 || iy >= g.in_h) continue;
          for (std::int64_t v = 0; v < g.kernel; ++v) {
            const std::int64_t ix = x * g.stride - g.pad + v;
            if (ix >= 0 && ix < g.in_w) s += src[iy * g.in_w + ix];
          }
        }
        dst[y * ow + x] = s * inv;
      }
    }
  }
}

template <typename T>
void avg_pool2d_backward(const PoolGeometry& g, const T* grad_output, T* grad_input) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const T inv = T(1) / static_cast<T>(g.kernel * g.kernel);
  const std::int64_t planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    T* dst = grad_input + p * g.in_h * g.in_w;
    const T* dy = grad_output + p * oh * ow;
    std::fill(dst, dst + g.in_h * g.in_w, T(0));
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        const T d = dy[y * ow + x] * inv;
        for (std::int64_t u = 0; u < g.kernel; ++u) {
          const std::int64_t iy = y * g.stride - g.pad + u;
          if (iy < 0 || iy >= g.in_h) continue;
          for (std::int64_t v = 0; v < g.kernel; ++v) {
            const std::int64_t ix = x * g.stride - g.pad + v;
            if (ix >= 0 && ix < g.in_w) dst[iy * g.in_w + ix] += d;
          }
        }
      }
    }
  }
}

template <typename T>
void channel_moments(std::int64_t batch, std::int64_t channels, std::int64_t spatial,
                     const T* input, T* mean, T* var) {
  const double count = static_cast<double>(batch * spatial);
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < channels; ++c) {
    // Accumulate in double: single-precision sums over large batches drift.
    double s = 0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* row = input + (n * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) s += row[i];
    }
    const double m = s / count;
    double q = 0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* row = input + (n * channels + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double d = row[i] - m;
        q += d * d;
      }
    }
    mean[c] = static_cast<T>(m);
    var[c] = static_cast<T>(q / count);
  }
}

template <typename T>
void channel_affine(std::int64_t batch, std::int64_t channels, std::int64_t spatial,
                    const T* input, const T* scale, const T* shift, T* output) {
  const std::int64_t planes = batch * channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t c = p % channels;
    const T a = scale[c], b = shift[c];
    const T* src = input + p * spatial;
    T* dst = output + p * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) dst[i] = a * src[i] + b;
  }
}

#define REPFUSE_INSTANTIATE_KERNELS(T)                                                         \
  template void im2col<T>(const ConvGeometry&, const T*, T*);                                  \
  template void col2im<T>(const ConvGeometry&, const T*, T*);                                  \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);      \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);         \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);    \
  template void avg_pool2d_forward<T>(const PoolGeometry&, const T*, T*);                      \
  template void avg_pool2d_backward<T>(const PoolGeometry&, const T*, T*);                     \
  template void channel_moments<T>(std::int64_t, std::int64_t, std::int64_t, const T*, T*, T*); \
  template void channel_affine<T>(std::int64_t, std::int64_t, std::int64_t, const T*, const T*, \
                                  const T*, T*);

REPFUSE_INSTANTIATE_KERNELS(float)
REPFUSE_INSTANTIATE_KERNELS(double)

}  // namespace repfuse::kernels
