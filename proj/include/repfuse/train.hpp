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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repfuse/data.hpp"
#include "repfuse/network.hpp"
#include "repfuse/search.hpp"

namespace repfuse {

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" | "cifar10"
  std::string dir;                 // cifar10 root; empty means $REPFUSE_DATA_DIR
  std::int64_t n_train = 1000;
  std::int64_t n_test = 500;
  std::int64_t classes = 10;
  std::int64_t image_size = 32;
  std::uint64_t seed = 1234;
};

/// Training/search configuration, read from JSON. Every field is optional.
///
///   {"epochs": 30, "batch_size": 128, "init_lr": 0.1, "weight_decay": 1e-4,
///    "momentum": 0.9, "lr_schedule": "cosine", "seed": 0,
///    "budget": 40 | "min" | "mid" | "total",
///    "arch_preset": "vgg-tiny", "widths": [...], "strides": [...], "K": 3,
///    "branches": ["conv1x1", ...], "subset_fraction": 0.2,
///    "alpha_lr": 1e-4, "alpha_betas": [0.5, 0.999], "calibration_batches": 10,
///    "augment": true, "eval_batch_size": 256,
///    "data": {"kind": "synthetic", "dir": "", "n_train": 1000, "n_test": 500,
///             "classes": 10, "image_size": 32, "seed": 1234}}
struct TrainConfig {
  std::int64_t epochs = 30;
  std::int64_t batch_size = 128;
  double init_lr = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::string lr_schedule = "cosine";
  std::uint64_t seed = 0;
  nlohmann::json budget = "total";
  std::string arch_preset = "vgg-tiny";
  std::vector<std::int64_t> widths;
  std::vector<std::int64_t> strides;
  std::int64_t K = 3;
  std::vector<BranchKind> branches{kAllBranchKinds.begin(), kAllBranchKinds.end()};
  double subset_fraction = 1.0;
  double alpha_lr = 1e-4;
  double alpha_beta1 = 0.5;
  double alpha_beta2 = 0.999;
  std::int64_t calibration_batches = 10;
  std::optional<bool> augment;  // default: on for cifar10, off for synthetic
  std::int64_t eval_batch_size = 256;
  DataConfig data;

  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static TrainConfig load(const std::filesystem::path& path);
  /// Throws ConfigError on out-of-range values.
  void validate() const;

  NetworkArch build_arch() const;
  /// Resolves "min" (protected count), "mid" (half the total, at least min),
  /// "total", or an explicit integer against the architecture.
  std::int64_t resolve_budget(const NetworkArch& arch) const;
};

std::int64_t resolve_budget(const nlohmann::json& budget, const NetworkArch& arch);

/// Half-cosine decay from init_lr at step 0 to 0 at total_steps.
double cosine_lr(double init_lr, std::int64_t step, std::int64_t total_steps);

/// Loads the configured dataset. Synthetic test data uses a different seed
/// than the training data.
DatasetSplits load_data(const DataConfig& cfg);

struct EvalResult {
  double top1 = 0;
  double loss = 0;
  std::int64_t n = 0;
  nlohmann::json to_json() const;
};

EvalResult evaluate(Supernet<float>& net, const Gates& gates, const Dataset& data,
                    std::int64_t batch_size = 256);
EvalResult evaluate(const FusedNetwork<float>& net, const Dataset& data,
                    std::int64_t batch_size = 256);

/// Re-estimates BN running statistics as a plain average over `batches`
/// training batches forwarded with the given gates (no augmentation).
void calibrate_batch_norm(Supernet<float>& net, const Gates& gates, const Dataset& data,
                          std::int64_t batches, std::int64_t batch_size, std::uint64_t seed);

struct TrainResult {
  NetworkArch final_arch;
  std::int64_t budget = 0;
  std::int64_t best_epoch = -1;
  double train_top1 = 0;  // mean over the last epoch's iterations
  double train_loss = 0;
  std::optional<EvalResult> test;
  nlohmann::json to_json() const;
};

/// Runs the search over `epochs` with cosine LR on the weights and a fixed
/// LR on alpha, keeps the weights and alpha of the epoch with the best mean
/// training accuracy, finalizes the architecture, calibrates BN with the
/// final gates, and writes into out_dir:
///   checkpoint.rpfz, arch_final.json, search_log.csv, train_report.json,
///   eval_report.json (test split).
/// Throws NumericError (with epoch, batch index and lr) on a non-finite
/// loss or BN variance.
TrainResult train_supernet(const TrainConfig& config, const std::filesystem::path& out_dir);

/// As above with data supplied by the caller.
TrainResult train_supernet(const TrainConfig& config, const DatasetSplits& data,
                           const std::filesystem::path& out_dir);

}  // namespace repfuse
