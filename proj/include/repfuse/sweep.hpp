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
#include <vector>

#include <nlohmann/json.hpp>

#include "repfuse/train.hpp"

namespace repfuse {

inline constexpr int kResultsSchemaVersion = 1;

struct SweepRow {
  std::int64_t C = 0;
  std::uint64_t seed = 0;
  double top1_supernet = 0;
  double top1_fused = 0;
  double train_top1 = 0;
  std::int64_t active_branches = 0;
  double max_logit_diff = 0;
};

/// Rows sorted by C, then seed.
nlohmann::json results_json(std::vector<SweepRow> rows);
void write_results(const std::vector<SweepRow>& rows, const std::filesystem::path& out_dir);

/// One search per (budget, seed) into out_dir/C<C>_seed<seed>, then fusion of
/// the final architecture and test-split evaluation of both models. Budgets
/// accept integers or "min"/"mid"/"total". Writes results.json and results.csv.
std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<nlohmann::json>& budgets,
                                const std::vector<std::uint64_t>& seeds,
                                const std::filesystem::path& out_dir);

}  // namespace repfuse
