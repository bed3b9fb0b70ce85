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
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repfuse/network.hpp"

namespace repfuse {

inline constexpr int kMinTimedIters = 30;
inline constexpr int kMinWarmupIters = 5;

struct LatencyStats {
  double mean = 0;
  double p50 = 0;
  double p95 = 0;
  std::vector<double> samples;  // seconds
};

/// Times `fn` with a steady clock: `warmup` untimed calls, then `iters`
/// timed ones. Throws std::invalid_argument below the minimum counts.
LatencyStats time_calls(const std::function<void()>& fn, int warmup, int iters);

/// Nearest-rank percentile of an unsorted sample, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// A model loaded from disk: either a supernet checkpoint with its
/// architecture (gates included) or a fused single-path network.
struct LoadedModel {
  std::string id;
  std::string mode;  // "multi-branch" | "fused"
  NetworkArch arch;
  std::unique_ptr<Supernet<float>> supernet;
  std::optional<FusedNetwork<float>> fused;

  Tensor<float> forward(const Tensor<float>& x);
  std::int64_t image_size() const { return arch.image_size; }
  std::int64_t in_channels() const { return arch.in_channels; }
};

/// Fused models are recognised by a "<stem>.json" sidecar of format
/// "repfuse-fused". Supernet checkpoints take their architecture from
/// `arch_path`, else "<stem>.json", else "arch_final.json" next to the file.
LoadedModel load_model(const std::filesystem::path& path,
                       const std::optional<std::filesystem::path>& arch_path = std::nullopt);

struct BenchOptions {
  std::int64_t batch = 32;
  int warmup = 10;
  int iters = 30;
  bool parallel = false;
  std::uint64_t seed = 0;
};

struct BenchEntry {
  std::string model_id;
  std::string mode;
  LatencyStats stats;
};

struct BenchReport {
  std::int64_t batch = 0;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
  BenchEntry model;
  std::optional<BenchEntry> compare;
  /// multi-branch mean / fused mean, when both modes were measured.
  std::optional<double> speedup;

  nlohmann::json to_json() const;
};

/// Benchmarks `model` (and `compare`, interleaved) on one N(0,1) batch.
/// Single-threaded unless options.parallel.
BenchReport bench_models(LoadedModel& model, LoadedModel* compare, const BenchOptions& options);

}  // namespace repfuse
