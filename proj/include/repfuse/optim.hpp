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
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "repfuse/autodiff.hpp"

namespace repfuse {

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   g = grad + wd * w;  buf = momentum * buf + g;  w -= lr * buf
/// Parameters whose `touched` flag is clear (no gradient reached them this
/// step, e.g. a pruned branch) are skipped entirely, momentum included.
/// State is keyed by parameter name.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig config = {}) : config_(config) {}

  void step(std::span<Parameter<T>* const> params, double lr);
  const SgdConfig& config() const { return config_; }

 private:
  SgdConfig config_;
  std::unordered_map<std::string, std::vector<T>> momentum_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments, applied per element over a flat array.
/// Elements with mask == 0 keep both their value and their moment state, and
/// their step counter does not advance.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::span<double> values, std::span<const double> grads,
            std::span<const std::uint8_t> mask, double lr);

  template <typename T>
  void step(Parameter<T>& p, double lr);

  const AdamConfig& config() const { return config_; }
  std::span<const std::int64_t> steps() const { return steps_; }

  // Moment state, exposed for checkpointing.
  std::vector<double>& first_moment() { return m_; }
  std::vector<double>& second_moment() { return v_; }

 private:
  void ensure_size(std::size_t n);

  AdamConfig config_;
  std::vector<double> m_, v_;
  std::vector<std::int64_t> steps_;
};

}  // namespace repfuse
