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

#include "repfuse/optim.hpp"

#include <cmath>

namespace repfuse {

template <typename T>
void Sgd<T>::step(std::span<Parameter<T>* const> params, double lr) {
  for (Parameter<T>* p : params) {
    if (!p->touched) continue;
    const std::int64_t n = p->value.numel();
    auto [it, fresh] = momentum_.try_emplace(p->name);
    std::vector<T>& buf = it->second;
    if (fresh) buf.assign(static_cast<std::size_t>(n), T(0));
    T* w = p->value.ptr();
    const T* g = p->grad.ptr();
    const T wd = static_cast<T>(config_.weight_decay);
    const T mom = static_cast<T>(config_.momentum);
    const T step = static_cast<T>(lr);
    for (std::int64_t i = 0; i < n; ++i) {
      const T d = g[i] + wd * w[i];
      // First update seeds the buffer with the raw gradient.
      buf[i] = fresh ? d : mom * buf[i] + d;
      w[i] -= step * buf[i];
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;

void Adam::ensure_size(std::size_t n) {
  if (m_.size() < n) {
    m_.resize(n, 0.0);
    v_.resize(n, 0.0);
    steps_.resize(n, 0);
  }
}

void Adam::step(std::span<double> values, std::span<const double> grads,
                std::span<const std::uint8_t> mask, double lr) {
  ensure_size(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && mask[i] == 0) continue;
    const double g = grads[i];
    const std::int64_t t = ++steps_[i];
    m_[i] = config_.beta1 * m_[i] + (1 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1 - config_.beta2) * g * g;
    const double m_hat = m_[i] / (1 - std::pow(config_.beta1, static_cast<double>(t)));
    const double v_hat = v_[i] / (1 - std::pow(config_.beta2, static_cast<double>(t)));
    values[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
  }
}

template <typename T>
void Adam::step(Parameter<T>& p, double lr) {
  if (!p.touched) return;
  std::vector<double> values(p.value.data().begin(), p.value.data().end());
  std::vector<double> grads(p.grad.data().begin(), p.grad.data().end());
  step(values, grads, {}, lr);
  for (std::size_t i = 0; i < values.size(); ++i) p.value[static_cast<std::int64_t>(i)] = static_cast<T>(values[i]);
}

template void Adam::step<float>(Parameter<float>&, double);
template void Adam::step<double>(Parameter<double>&, double);

}  // namespace repfuse
