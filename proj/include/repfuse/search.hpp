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

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "repfuse/network.hpp"
#include "repfuse/optim.hpp"

namespace repfuse {

struct BranchRef {
  int block = 0;
  int branch = 0;
};

/// Per-branch architecture state, flattened in block-major order.
struct ArchState {
  std::vector<BranchRef> refs;
  std::vector<std::uint8_t> is_protected;
  std::vector<double> alpha;
  std::vector<double> lambda;
  std::vector<double> zeta;        // noise of the current iteration
  std::vector<double> z_soft;      // sigmoid((alpha + zeta) / lambda)
  std::vector<int> z_hard;         // selected gates
  std::vector<double> alpha_grad;  // filled by the straight-through gates
  std::vector<std::int64_t> keep_count;
  std::int64_t samples = 0;
  std::vector<std::size_t> block_sizes;

  static ArchState for_arch(const NetworkArch& arch);

  std::size_t size() const { return alpha.size(); }
  std::int64_t num_protected() const;
  Gates to_gates(std::span<const int> flat) const;
  Gates gates() const { return to_gates(z_hard); }
  void reset_keep_counts();
};

struct SearchConfig {
  std::int64_t budget = 0;  // C, protected branches included
  double alpha_lr = 1e-4;
  double alpha_beta1 = 0.5;
  double alpha_beta2 = 0.999;
  double lambda = 1.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError when C is below the number of protected branches.
  void validate(const ArchState& state) const;
};

/// Inverse logistic CDF with u clamped to [1e-12, 1 - 1e-12].
double logistic_from_uniform(double u);
double sample_logistic_noise(std::mt19937_64& rng);

/// sigmoid((alpha + zeta) / lambda).
double compute_importance(double alpha, double zeta, double lambda);

/// Protected entries are always 1; the remaining C - #protected slots go to
/// the largest R across the whole network, ties to the lower flat index.
std::vector<int> rank_and_select(std::span<const double> R, std::int64_t C,
                                 std::span<const std::uint8_t> is_protected);

struct StepMetrics {
  double loss = 0;
  double top1 = 0;
  std::int64_t active_branches = 0;
  double mean_alpha = 0;
  double min_alpha = 0;
  double max_alpha = 0;
};

/// Mean/min/max of alpha over prunable branches (all branches if none are prunable).
void summarize_alpha(const ArchState& state, StepMetrics& m);

/// Joint optimization of network weights (SGD) and architecture parameters (Adam).
template <typename T>
class Search {
 public:
  Search(Supernet<T>& net, SearchConfig config, SgdConfig sgd = {});

  /// One iteration: sample noise, select C branches, forward/backward over the
  /// selected branches only, update weights at `lr` and alpha at alpha_lr.
  StepMetrics step(const Tensor<T>& x, std::span<const int> labels, double lr);

  ArchState& state() { return state_; }
  const ArchState& state() const { return state_; }
  const SearchConfig& config() const { return config_; }
  Supernet<T>& net() { return net_; }

 private:
  Supernet<T>& net_;
  SearchConfig config_;
  ArchState state_;
  Sgd<T> sgd_;
  Adam adam_;
  std::mt19937_64 rng_;
};

/// Noise-free selection by alpha alone.
std::vector<int> finalize_architecture(const ArchState& state, std::int64_t C);

/// Final architecture JSON content: structure, finalized gates and alpha.
template <typename T>
NetworkArch finalized_arch(const Supernet<T>& net, const ArchState& state, std::int64_t C);

}  // namespace repfuse
