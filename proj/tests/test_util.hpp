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

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "repfuse/autodiff.hpp"
#include "repfuse/rep_block.hpp"

namespace repfuse::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<T> t(s);
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct FdResult {
  double max_rel_error = 0;
  int checked = 0;
};

/// Central finite differences of `loss(tape)` with respect to `p` at `coords`
/// random coordinates. `loss` must read p through ad::param(tape, p).
inline FdResult fd_check(Parameter<double>& p,
                         const std::function<Var<double>(Tape<double>*)>& loss, std::mt19937_64& rng,
                         int coords = 20, double h = 1e-5) {
  p.zero_grad();
  {
    Tape<double> tape;
    Var<double> l = loss(&tape);
    tape.backward(l);
  }
  const Tensor<double> analytic = p.grad.clone();
  std::uniform_int_distribution<std::int64_t> pick(0, p.value.numel() - 1);
  FdResult r;
  for (int k = 0; k < coords; ++k) {
    const std::int64_t i = pick(rng);
    const double saved = p.value[i];
    p.value[i] = saved + h;
    const double up = loss(nullptr).value[0];
    p.value[i] = saved - h;
    const double down = loss(nullptr).value[0];
    p.value[i] = saved;
    r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[i], (up - down) / (2 * h)));
    ++r.checked;
  }
  return r;
}

/// Gives every BN in the block non-trivial eval statistics and affine terms.
template <typename T>
void randomize_batch_norms(RepBlock<T>& block, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.5, 1.5), any(-0.5, 0.5);
  for (auto* bn : block.batch_norms()) {
    for (std::int64_t c = 0; c < bn->channels(); ++c) {
      bn->gamma.value[c] = static_cast<T>(pos(rng));
      bn->beta.value[c] = static_cast<T>(any(rng));
      bn->running_mean[c] = static_cast<T>(any(rng));
      bn->running_var[c] = static_cast<T>(pos(rng));
    }
  }
}

/// Random BN statistics plus random leading 1x1 kernels, so no branch is trivial.
template <typename T>
void randomize_block(RepBlock<T>& block, std::mt19937_64& rng) {
  randomize_batch_norms(block, rng);
  std::normal_distribution<double> d(0.0, 0.5);
  for (auto& b : block.branches) {
    if (b.pre_kernel) {
      for (auto& v : b.pre_kernel->value.data()) v = static_cast<T>(d(rng));
    }
  }
}

template <typename T>
Tensor<T> eval_preactivation(RepBlock<T>& block, const Tensor<T>& x, std::span<const int> gates) {
  const auto g = constant_gates(gates);
  return block_preactivation<T>(block, ad::constant(x), g, Mode::Eval, nullptr).value;
}

inline std::vector<BranchKind> all_kinds() {
  return {kAllBranchKinds.begin(), kAllBranchKinds.end()};
}

}  // namespace repfuse::testing
