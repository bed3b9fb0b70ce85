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

#include "repfuse/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace repfuse {

ArchState ArchState::for_arch(const NetworkArch& arch) {
  ArchState s;
  for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
    const BlockArch& b = arch.blocks[i];
    s.block_sizes.push_back(b.branches.size());
    for (std::size_t j = 0; j < b.branches.size(); ++j) {
      s.refs.push_back({static_cast<int>(i), static_cast<int>(j)});
      s.is_protected.push_back(b.branches[j] == BranchKind::ConvKxK ? 1 : 0);
    }
  }
  const std::size_t n = s.refs.size();
  s.alpha.assign(n, 0.0);
  s.lambda.assign(n, 1.0);
  s.zeta.assign(n, 0.0);
  s.z_soft.assign(n, 0.5);
  s.z_hard.assign(n, 1);
  s.alpha_grad.assign(n, 0.0);
  s.keep_count.assign(n, 0);
  return s;
}

std::int64_t ArchState::num_protected() const {
  return std::count(is_protected.begin(), is_protected.end(), std::uint8_t{1});
}

Gates ArchState::to_gates(std::span<const int> flat) const {
  if (flat.size() != refs.size()) throw std::invalid_argument("gate vector has wrong length");
  Gates g;
  std::size_t k = 0;
  for (std::size_t sz : block_sizes) {
    g.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k),
                   flat.begin() + static_cast<std::ptrdiff_t>(k + sz));
    k += sz;
  }
  return g;
}

void ArchState::reset_keep_counts() {
  std::fill(keep_count.begin(), keep_count.end(), 0);
  samples = 0;
}

void SearchConfig::validate(const ArchState& state) const {
  if (budget < state.num_protected()) {
    throw ConfigError("budget C=" + std::to_string(budget) + " is below the " +
                      std::to_string(state.num_protected()) + " protected branches");
  }
  if (!(alpha_lr >= 0) || !(lambda > 0)) throw ConfigError("alpha_lr must be >= 0 and lambda > 0");
}

double logistic_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return std::log(u) - std::log1p(-u);
}

double sample_logistic_noise(std::mt19937_64& rng) {
  return logistic_from_uniform(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
}

double compute_importance(double alpha, double zeta, double lambda) {
  return 1.0 / (1.0 + std::exp(-(alpha + zeta) / lambda));
}

std::vector<int> rank_and_select(std::span<const double> R, std::int64_t C,
                                 std::span<const std::uint8_t> is_protected) {
  if (R.size() != is_protected.size()) throw std::invalid_argument("rank_and_select: size mismatch");
  const std::int64_t n_prot = std::count(is_protected.begin(), is_protected.end(), std::uint8_t{1});
  if (C < n_prot) {
    throw ConfigError("budget C=" + std::to_string(C) + " is below the " + std::to_string(n_prot) +
                      " protected branches");
  }
  std::vector<int> z(R.size(), 0);
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < R.size(); ++i) {
    if (is_protected[i]) {
      z[i] = 1;
    } else {
      free.push_back(i);
    }
  }
  std::stable_sort(free.begin(), free.end(), [&](std::size_t a, std::size_t b) { return R[a] > R[b]; });
  const std::size_t slots = std::min<std::size_t>(static_cast<std::size_t>(C - n_prot), free.size());
  for (std::size_t k = 0; k < slots; ++k) z[free[k]] = 1;
  return z;
}

void summarize_alpha(const ArchState& state, StepMetrics& m) {
  const bool any_free = static_cast<std::size_t>(state.num_protected()) < state.size();
  double sum = 0, lo = INFINITY, hi = -INFINITY;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (any_free && state.is_protected[i]) continue;
    sum += state.alpha[i];
    lo = std::min(lo, state.alpha[i]);
    hi = std::max(hi, state.alpha[i]);
    ++n;
  }
  m.mean_alpha = n > 0 ? sum / n : 0.0;
  m.min_alpha = n > 0 ? lo : 0.0;
  m.max_alpha = n > 0 ? hi : 0.0;
}

template <typename T>
Search<T>::Search(Supernet<T>& net, SearchConfig config, SgdConfig sgd)
    : net_(net),
      config_(config),
      state_(ArchState::for_arch(net.structure())),
      sgd_(sgd),
      adam_(AdamConfig{config.alpha_beta1, config.alpha_beta2, 1e-8}),
      rng_(config.seed) {
  config_.validate(state_);
}

template <typename T>
StepMetrics Search<T>::step(const Tensor<T>& x, std::span<const int> labels, double lr) {
  ArchState& s = state_;
  std::vector<double> R(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    s.lambda[k] = config_.lambda;
    s.zeta[k] = sample_logistic_noise(rng_);
    s.z_soft[k] = compute_importance(s.alpha[k], s.zeta[k], s.lambda[k]);
    R[k] = s.alpha[k] + s.zeta[k];
  }
  s.z_hard = rank_and_select(R, config_.budget, s.is_protected);
  std::fill(s.alpha_grad.begin(), s.alpha_grad.end(), 0.0);

  std::vector<std::vector<BranchGate>> gates(s.block_sizes.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    BranchGate g{static_cast<double>(s.z_hard[k]), s.z_soft[k], s.lambda[k], &s.alpha_grad[k]};
    gates[static_cast<std::size_t>(s.refs[k].block)].push_back(g);
  }

  net_.zero_grad();
  Tape<T> tape;
  Var<T> logits = net_.forward(ad::constant(x), gates, Mode::Train, &tape);
  Var<T> loss = ad::softmax_cross_entropy(logits, labels);
  tape.backward(loss);

  StepMetrics m;
  m.loss = static_cast<double>(loss.value[0]);
  if (std::isfinite(m.loss)) {
    auto params = net_.parameters();
    sgd_.step(params, lr);
    std::vector<std::uint8_t> mask(s.size(), 0);
    for (std::size_t k = 0; k < s.size(); ++k) mask[k] = (s.z_hard[k] && !s.is_protected[k]) ? 1 : 0;
    adam_.step(s.alpha, s.alpha_grad, mask, config_.alpha_lr);
  }

  const std::int64_t N = logits.shape().n(), classes = logits.shape().c();
  std::int64_t correct = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    const T* row = logits.value.ptr() + n * classes;
    correct += (std::max_element(row, row + classes) - row) == labels[static_cast<std::size_t>(n)];
  }
  m.top1 = N > 0 ? static_cast<double>(correct) / N : 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    s.keep_count[k] += s.z_hard[k];
    m.active_branches += s.z_hard[k];
  }
  ++s.samples;
  summarize_alpha(s, m);
  return m;
}

std::vector<int> finalize_architecture(const ArchState& state, std::int64_t C) {
  return rank_and_select(state.alpha, C, state.is_protected);
}

template <typename T>
NetworkArch finalized_arch(const Supernet<T>& net, const ArchState& state, std::int64_t C) {
  NetworkArch a = net.arch(state.to_gates(finalize_architecture(state, C)));
  for (std::size_t k = 0; k < state.size(); ++k) {
    BlockArch& b = a.blocks[static_cast<std::size_t>(state.refs[k].block)];
    b.alpha.resize(b.branches.size(), 0.0);
    b.alpha[static_cast<std::size_t>(state.refs[k].branch)] = state.alpha[k];
  }
  return a;
}

template class Search<float>;
template class Search<double>;
template NetworkArch finalized_arch<float>(const Supernet<float>&, const ArchState&, std::int64_t);
template NetworkArch finalized_arch<double>(const Supernet<double>&, const ArchState&, std::int64_t);

}  // namespace repfuse
