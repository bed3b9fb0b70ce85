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

#include "repfuse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "repfuse/kernels.hpp"

namespace repfuse {

std::string Shape::to_string() const {
  return "(" + std::to_string(dims[0]) + ", " + std::to_string(dims[1]) + ", " +
         std::to_string(dims[2]) + ", " + std::to_string(dims[3]) + ")";
}

void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a == b) return;
  for (std::size_t axis = 0; axis < 4; ++axis) {
    if (a[axis] != b[axis]) {
      static const char* names[] = {"batch", "channel", "height", "width"};
      throw DimensionError(what + ": " + names[axis] + " axis mismatch, " + a.to_string() +
                           " vs " + b.to_string());
    }
  }
}

template <typename T>
int Tape<T>::record(const Shape& shape, BackwardFn fn) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  nodes_.push_back(Node{shape, Tensor<T>(), false, std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
Tensor<T>& Tape<T>::grad(int node) {
  Node& n = nodes_.at(static_cast<std::size_t>(node));
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.shape, T(0));
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
bool Tape<T>::has_grad(int node) const {
  return nodes_.at(static_cast<std::size_t>(node)).has_grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw std::logic_error("backward() called twice on one tape");
  if (loss.tape != this || loss.node < 0) {
    throw std::invalid_argument("backward: loss is not recorded on this tape");
  }
  if (loss.value.numel() != 1) throw DimensionError("backward: loss must be a scalar");
  consumed_ = true;
  grad(loss.node).fill(T(1));
  for (int i = loss.node; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.has_grad && n.fn) {
      Tensor<T> g = std::move(n.grad);
      auto fn = std::move(n.fn);
      n.has_grad = false;
      fn(g);
    }
    n.fn = nullptr;
    n.grad = Tensor<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ad {
namespace {

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Var<T>*> vars) {
  for (const Var<T>* v : vars) {
    if (v != nullptr && v->requires_grad()) return v->tape;
  }
  return nullptr;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

template <typename T>
Var<T> wrap(Tensor<T> value, Tape<T>* tape, typename Tape<T>::BackwardFn fn) {
  Var<T> out(std::move(value));
  if (tape != nullptr) {
    out.tape = tape;
    out.node = tape->record(out.value.shape(), std::move(fn));
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value));
}

template <typename T>
Var<T> param(Tape<T>* tape, Parameter<T>& p) {
  Var<T> out(p.value);
  if (tape == nullptr) return out;
  Parameter<T>* target = &p;
  out.tape = tape;
  out.node = tape->record(p.value.shape(), [target](const Tensor<T>& g) {
    add_into(target->grad, g);
    target->touched = true;
  });
  return out;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::type_identity_t<Var<T>>* bias, std::int64_t stride,
              std::int64_t pad_h, std::int64_t pad_w) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.c() != ws.c()) {
    throw DimensionError("conv2d: channel axis mismatch, input has " + std::to_string(xs.c()) +
                         " channels but kernel expects " + std::to_string(ws.c()));
  }
  if (stride < 1 || pad_h < 0 || pad_w < 0) {
    throw DimensionError("conv2d: stride must be positive and padding non-negative");
  }
  if (xs.h() + 2 * pad_h < ws.h() || xs.w() + 2 * pad_w < ws.w()) {
    throw DimensionError("conv2d: height/width axis smaller than kernel, input " +
                         xs.to_string() + " kernel " + ws.to_string());
  }
  if (bias != nullptr && bias->value.numel() != ws.n()) {
    throw DimensionError("conv2d: bias length does not match output channels");
  }
  kernels::ConvGeometry g{xs.n(), xs.c(), xs.h(), xs.w(), ws.n(), ws.h(), ws.w(),
                          stride,  pad_h,  pad_w};
  Tensor<T> out(Shape(xs.n(), ws.n(), g.out_h(), g.out_w()));
  kernels::conv2d_forward(g, x.value.ptr(), weight.value.ptr(),
                          bias != nullptr ? bias->value.ptr() : nullptr, out.ptr());
  Tape<T>* tape = tape_of<T>({&x, &weight, bias});
  if (tape == nullptr) return Var<T>(std::move(out));
  Var<T> b = bias != nullptr ? *bias : Var<T>();
  return wrap<T>(std::move(out), tape, [x, weight, b, g, tape](const Tensor<T>& gy) {
    if (x.requires_grad()) {
      Tensor<T> gx(x.shape());
      kernels::conv2d_backward_input(g, gy.ptr(), weight.value.ptr(), gx.ptr());
      add_into(tape->grad(x.node), gx);
    }
    if (weight.requires_grad() || b.requires_grad()) {
      Tensor<T> gw(weight.shape());
      Tensor<T> gb(Shape(weight.shape().n()));
      kernels::conv2d_backward_weight(g, x.value.ptr(), gy.ptr(), gw.ptr(),
                                      b.requires_grad() ? gb.ptr() : nullptr);
      if (weight.requires_grad()) add_into(tape->grad(weight.node), gw);
      if (b.requires_grad()) add_into(tape->grad(b.node), gb);
    }
  });
}

template <typename T>
Var<T> pad2d(const Var<T>& x, std::int64_t pad) {
  if (pad < 0) throw DimensionError("pad2d: negative padding");
  const Shape& s = x.shape();
  const std::int64_t oh = s.h() + 2 * pad, ow = s.w() + 2 * pad;
  Tensor<T> out(Shape(s.n(), s.c(), oh, ow));
  const std::int64_t planes = s.n() * s.c();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.value.ptr() + p * s.h() * s.w();
    T* dst = out.ptr() + p * oh * ow;
    for (std::int64_t y = 0; y < s.h(); ++y) {
      std::copy(src + y * s.w(), src + (y + 1) * s.w(), dst + (y + pad) * ow + pad);
    }
  }
  Tape<T>* tape = tape_of<T>({&x});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, pad, tape](const Tensor<T>& gy) {
    const Shape& s = x.shape();
    const std::int64_t oh = s.h() + 2 * pad, ow = s.w() + 2 * pad;
    Tensor<T>& gx = tape->grad(x.node);
    const std::int64_t planes = s.n() * s.c();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = gy.ptr() + p * oh * ow;
      T* dst = gx.ptr() + p * s.h() * s.w();
      for (std::int64_t y = 0; y < s.h(); ++y)
        for (std::int64_t xx = 0; xx < s.w(); ++xx) dst[y * s.w() + xx] += src[(y + pad) * ow + xx + pad];
    }
  });
}

template <typename T>
Var<T> crop_kernel(const Var<T>& kernel, std::int64_t h, std::int64_t w) {
  const Shape& ks = kernel.shape();
  if (h < 1 || w < 1 || h > ks.h() || w > ks.w()) {
    throw std::invalid_argument("crop_kernel: crop " + std::to_string(h) + "x" +
                                std::to_string(w) + " outside kernel " + ks.to_string());
  }
  if (h % 2 == 0 || w % 2 == 0) {
    throw std::invalid_argument("crop_kernel: even crop size has no center");
  }
  const std::int64_t off_h = ks.h() / 2 - h / 2;
  const std::int64_t off_w = ks.w() / 2 - w / 2;
  Tensor<T> out(Shape(ks.n(), ks.c(), h, w));
  for (std::int64_t o = 0; o < ks.n(); ++o)
    for (std::int64_t c = 0; c < ks.c(); ++c)
      for (std::int64_t u = 0; u < h; ++u)
        for (std::int64_t v = 0; v < w; ++v)
          out.at(o, c, u, v) = kernel.value.at(o, c, u + off_h, v + off_w);
  Tape<T>* tape = tape_of<T>({&kernel});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [kernel, h, w, off_h, off_w, tape](const Tensor<T>& gy) {
    Tensor<T>& gk = tape->grad(kernel.node);
    const Shape& ks = kernel.shape();
    for (std::int64_t o = 0; o < ks.n(); ++o)
      for (std::int64_t c = 0; c < ks.c(); ++c)
        for (std::int64_t u = 0; u < h; ++u)
          for (std::int64_t v = 0; v < w; ++v) gk.at(o, c, u + off_h, v + off_w) += gy.at(o, c, u, v);
  });
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  const Shape& s = x.shape();
  if (k < 1 || stride < 1 || pad < 0) throw DimensionError("avg_pool2d: invalid window");
  if (s.h() + 2 * pad < k || s.w() + 2 * pad < k) {
    throw DimensionError("avg_pool2d: window " + std::to_string(k) +
                         " exceeds padded height/width axis of " + s.to_string());
  }
  kernels::PoolGeometry g{s.n(), s.c(), s.h(), s.w(), k, stride, pad};
  Tensor<T> out(Shape(s.n(), s.c(), g.out_h(), g.out_w()));
  kernels::avg_pool2d_forward(g, x.value.ptr(), out.ptr());
  Tape<T>* tape = tape_of<T>({&x});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, g, tape](const Tensor<T>& gy) {
    Tensor<T> gx(x.shape());
    kernels::avg_pool2d_backward(g, gy.ptr(), gx.ptr());
    add_into(tape->grad(x.node), gx);
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, BatchNorm<T>& bn, Mode mode, std::type_identity_t<Tape<T>>* tape) {
  const Shape& s = x.shape();
  const std::int64_t C = s.c();
  if (bn.channels() != C) {
    throw DimensionError("batch_norm: channel axis mismatch, input has " + std::to_string(C) +
                         " channels, parameters have " + std::to_string(bn.channels()));
  }
  const std::int64_t spatial = s.h() * s.w();
  const std::int64_t count = s.n() * spatial;
  Var<T> gamma = param(tape, bn.gamma);
  Var<T> beta = param(tape, bn.beta);

  Tensor<T> mean{Shape(C)}, var{Shape(C)};
  if (mode == Mode::Train) {
    kernels::channel_moments(s.n(), C, spatial, x.value.ptr(), mean.ptr(), var.ptr());
    const double m = bn.momentum;
    const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double rv_sample = var[c] * unbias;
      if (bn.calibration_batches >= 0) {
        const double k = static_cast<double>(bn.calibration_batches);
        bn.running_mean[c] = static_cast<T>((bn.running_mean[c] * k + mean[c]) / (k + 1));
        bn.running_var[c] = static_cast<T>((bn.running_var[c] * k + rv_sample) / (k + 1));
      } else {
        bn.running_mean[c] = static_cast<T>((1 - m) * bn.running_mean[c] + m * mean[c]);
        bn.running_var[c] = static_cast<T>((1 - m) * bn.running_var[c] + m * rv_sample);
      }
    }
    if (bn.calibration_batches >= 0) ++bn.calibration_batches;
  } else {
    mean = bn.running_mean.clone();
    var = bn.running_var.clone();
  }

  Tensor<T> inv_std{Shape(C)}, scale{Shape(C)}, shift{Shape(C)};
  for (std::int64_t c = 0; c < C; ++c) {
    const double v = static_cast<double>(var[c]) + bn.eps;
    if (!(v > 0) || !std::isfinite(v)) {
      throw NumericError("batch_norm: non-positive or non-finite variance in channel " +
                               std::to_string(c) + " (NaN propagation upstream?)");
    }
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(v));
    scale[c] = gamma.value[c] * inv_std[c];
    shift[c] = beta.value[c] - mean[c] * scale[c];
  }
  Tensor<T> out(s);
  kernels::channel_affine(s.n(), C, spatial, x.value.ptr(), scale.ptr(), shift.ptr(), out.ptr());

  Tape<T>* rec = tape_of<T>({&x, &gamma, &beta});
  if (rec == nullptr) return Var<T>(std::move(out));
  const bool train = mode == Mode::Train;
  return wrap<T>(std::move(out), rec,
                 [x, gamma, beta, mean, inv_std, scale, train, rec](const Tensor<T>& gy) {
    const Shape& s = x.shape();
    const std::int64_t C = s.c();
    const std::int64_t spatial = s.h() * s.w();
    const double M = static_cast<double>(s.n() * spatial);
    std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
    for (std::int64_t n = 0; n < s.n(); ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* xr = x.value.ptr() + (n * C + c) * spatial;
        const T* gr = gy.ptr() + (n * C + c) * spatial;
        double a = 0, b = 0;
        for (std::int64_t i = 0; i < spatial; ++i) {
          a += gr[i];
          b += gr[i] * (xr[i] - mean[c]) * inv_std[c];
        }
        sum_dy[c] += a;
        sum_dy_xhat[c] += b;
      }
    if (gamma.requires_grad()) {
      Tensor<T>& gg = rec->grad(gamma.node);
      for (std::int64_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
    }
    if (beta.requires_grad()) {
      Tensor<T>& gb = rec->grad(beta.node);
      for (std::int64_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
    }
    if (x.requires_grad()) {
      Tensor<T>& gx = rec->grad(x.node);
      for (std::int64_t n = 0; n < s.n(); ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* xr = x.value.ptr() + (n * C + c) * spatial;
          const T* gr = gy.ptr() + (n * C + c) * spatial;
          T* dst = gx.ptr() + (n * C + c) * spatial;
          if (train) {
            const double k = static_cast<double>(scale[c]) / M;
            for (std::int64_t i = 0; i < spatial; ++i) {
              const double xhat = (xr[i] - mean[c]) * inv_std[c];
              dst[i] += static_cast<T>(k * (M * gr[i] - sum_dy[c] - xhat * sum_dy_xhat[c]));
            }
          } else {
            for (std::int64_t i = 0; i < spatial; ++i) dst[i] += scale[c] * gr[i];
          }
        }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* src = x.value.ptr();
  T* dst = out.ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  Tape<T>* tape = tape_of<T>({&x});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, tape](const Tensor<T>& gy) {
    Tensor<T>& gx = tape->grad(x.node);
    const T* src = x.value.ptr();
    for (std::int64_t i = 0; i < gx.numel(); ++i) {
      if (src[i] > T(0)) gx[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> add_n(std::span<const Var<T>> xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: no inputs");
  Tensor<T> out = xs[0].value.clone();
  Tape<T>* tape = nullptr;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_same_shape(xs[0].shape(), xs[i].shape(), "add_n");
    if (i > 0) add_into(out, xs[i].value);
    if (xs[i].requires_grad()) tape = xs[i].tape;
  }
  if (tape == nullptr) return Var<T>(std::move(out));
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return wrap<T>(std::move(out), tape, [inputs, tape](const Tensor<T>& gy) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) add_into(tape->grad(in.node), gy);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& t, const Var<T>& s) {
  if (s.value.numel() != 1) throw DimensionError("scale: factor must have one element");
  const T k = s.value[0];
  Tensor<T> out(t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = k * t.value[i];
  Tape<T>* tape = tape_of<T>({&t, &s});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [t, s, k, tape](const Tensor<T>& gy) {
    if (t.requires_grad()) {
      Tensor<T>& gt = tape->grad(t.node);
      for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] += k * gy[i];
    }
    if (s.requires_grad()) {
      double dot = 0;
      for (std::int64_t i = 0; i < gy.numel(); ++i) dot += static_cast<double>(gy[i]) * t.value[i];
      tape->grad(s.node)[0] += static_cast<T>(dot);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& t, T s) {
  Tensor<T> out(t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = s * t.value[i];
  Tape<T>* tape = tape_of<T>({&t});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [t, s, tape](const Tensor<T>& gy) {
    Tensor<T>& gt = tape->grad(t.node);
    for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] += s * gy[i];
  });
}

template <typename T>
Var<T> logistic_gate(const Var<T>& alpha, double zeta, double lambda) {
  if (alpha.value.numel() != 1) throw DimensionError("logistic_gate: alpha must be a scalar");
  const double z = 1.0 / (1.0 + std::exp(-(static_cast<double>(alpha.value[0]) + zeta) / lambda));
  Tensor<T> out(Shape(1), static_cast<T>(z));
  Tape<T>* tape = tape_of<T>({&alpha});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [alpha, z, lambda, tape](const Tensor<T>& gy) {
    tape->grad(alpha.node)[0] += static_cast<T>(gy[0] * z * (1.0 - z) / lambda);
  });
}

template <typename T>
Var<T> straight_through_gate(const Var<T>& branch_output, double z_hard, double z_soft,
                             double lambda, double* alpha_grad) {
  const T k = static_cast<T>(z_hard);
  Tensor<T> out(branch_output.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = k * branch_output.value[i];
  Tape<T>* tape = tape_of<T>({&branch_output});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape,
                 [branch_output, k, z_soft, lambda, alpha_grad, tape](const Tensor<T>& gy) {
    Tensor<T>& go = tape->grad(branch_output.node);
    double dot = 0;
    for (std::int64_t i = 0; i < gy.numel(); ++i) {
      go[i] += k * gy[i];
      dot += static_cast<double>(gy[i]) * branch_output.value[i];
    }
    if (alpha_grad != nullptr) *alpha_grad += dot * z_soft * (1.0 - z_soft) / lambda;
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  const std::int64_t spatial = s.h() * s.w();
  Tensor<T> out(Shape(s.n(), s.c()));
  for (std::int64_t p = 0; p < s.n() * s.c(); ++p) {
    double acc = 0;
    const T* src = x.value.ptr() + p * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) acc += src[i];
    out[p] = static_cast<T>(acc / spatial);
  }
  Tape<T>* tape = tape_of<T>({&x});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, tape](const Tensor<T>& gy) {
    const Shape& s = x.shape();
    const std::int64_t spatial = s.h() * s.w();
    Tensor<T>& gx = tape->grad(x.node);
    for (std::int64_t p = 0; p < s.n() * s.c(); ++p) {
      const T d = gy[p] / static_cast<T>(spatial);
      T* dst = gx.ptr() + p * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) dst[i] += d;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::int64_t N = x.shape().n();
  const std::int64_t F = x.value.numel() / std::max<std::int64_t>(N, 1);
  const std::int64_t O = weight.shape().n();
  if (weight.value.numel() != O * F) {
    throw DimensionError("linear: feature axis mismatch, input has " + std::to_string(F) +
                         " features, weight is " + weight.shape().to_string());
  }
  if (bias.value.numel() != O) throw DimensionError("linear: bias length mismatch");
  Tensor<T> out(Shape(N, O));
  kernels::gemm<T>(false, true, N, O, F, T(1), x.value.ptr(), F, weight.value.ptr(), F, T(0),
                   out.ptr(), O);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o) out[n * O + o] += bias.value[o];
  Tape<T>* tape = tape_of<T>({&x, &weight, &bias});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, weight, bias, N, F, O, tape](const Tensor<T>& gy) {
    if (x.requires_grad()) {
      Tensor<T> gx(x.shape());
      kernels::gemm<T>(false, false, N, F, O, T(1), gy.ptr(), O, weight.value.ptr(), F, T(0),
                       gx.ptr(), F);
      add_into(tape->grad(x.node), gx);
    }
    if (weight.requires_grad()) {
      kernels::gemm<T>(true, false, O, F, N, T(1), gy.ptr(), O, x.value.ptr(), F, T(1),
                       tape->grad(weight.node).ptr(), F);
    }
    if (bias.requires_grad()) {
      Tensor<T>& gb = tape->grad(bias.node);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) gb[o] += gy[n * O + o];
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const std::int64_t N = logits.shape().n();
  const std::int64_t K = logits.value.numel() / std::max<std::int64_t>(N, 1);
  if (static_cast<std::int64_t>(labels.size()) != N) {
    throw DimensionError("softmax_cross_entropy: batch axis mismatch between logits and labels");
  }
  Tensor<T> probs(Shape(N, K));
  double total = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const T* z = logits.value.ptr() + n * K;
    double zmax = z[0];
    for (std::int64_t k = 1; k < K; ++k) zmax = std::max<double>(zmax, z[k]);
    double sum = 0;
    for (std::int64_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    for (std::int64_t k = 0; k < K; ++k) probs[n * K + k] = static_cast<T>(std::exp(z[k] - zmax) / sum);
    total += std::log(sum) + zmax - z[y];
  }
  Tensor<T> out(Shape(1), static_cast<T>(total / N));
  Tape<T>* tape = tape_of<T>({&logits});
  if (tape == nullptr) return Var<T>(std::move(out));
  std::vector<int> ys(labels.begin(), labels.end());
  return wrap<T>(std::move(out), tape, [logits, probs, ys, N, K, tape](const Tensor<T>& gy) {
    Tensor<T>& gz = tape->grad(logits.node);
    const T k0 = gy[0] / static_cast<T>(N);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t k = 0; k < K; ++k) {
        const T onehot = ys[static_cast<std::size_t>(n)] == k ? T(1) : T(0);
        gz[n * K + k] += k0 * (probs[n * K + k] - onehot);
      }
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w) {
  require_same_shape(x.shape(), w.shape(), "weighted_sum");
  double acc = 0;
  for (std::int64_t i = 0; i < w.numel(); ++i) acc += static_cast<double>(x.value[i]) * w[i];
  Tensor<T> out(Shape(1), static_cast<T>(acc));
  Tape<T>* tape = tape_of<T>({&x});
  if (tape == nullptr) return Var<T>(std::move(out));
  return wrap<T>(std::move(out), tape, [x, w, tape](const Tensor<T>& gy) {
    Tensor<T>& gx = tape->grad(x.node);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gy[0] * w[i];
  });
}

#define REPFUSE_INSTANTIATE_AD(T)                                                             \
  template Var<T> constant<T>(Tensor<T>);                                                     \
  template Var<T> param<T>(Tape<T>*, Parameter<T>&);                                          \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>*, std::int64_t,        \
                            std::int64_t, std::int64_t);                                      \
  template Var<T> pad2d<T>(const Var<T>&, std::int64_t);                                      \
  template Var<T> crop_kernel<T>(const Var<T>&, std::int64_t, std::int64_t);                  \
  template Var<T> avg_pool2d<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);     \
  template Var<T> batch_norm<T>(const Var<T>&, BatchNorm<T>&, Mode, Tape<T>*);                \
  template Var<T> relu<T>(const Var<T>&);                                                     \
  template Var<T> add_n<T>(std::span<const Var<T>>);                                          \
  template Var<T> scale<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> scale<T>(const Var<T>&, T);                                                 \
  template Var<T> logistic_gate<T>(const Var<T>&, double, double);                            \
  template Var<T> straight_through_gate<T>(const Var<T>&, double, double, double, double*);   \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                          \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);              \
  template Var<T> weighted_sum<T>(const Var<T>&, const Tensor<T>&);

REPFUSE_INSTANTIATE_AD(float)
REPFUSE_INSTANTIATE_AD(double)

}  // namespace ad
}  // namespace repfuse
