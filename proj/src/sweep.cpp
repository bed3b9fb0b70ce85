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

#include "repfuse/sweep.hpp"

#include <algorithm>
#include <fstream>

namespace repfuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void sort_rows(std::vector<SweepRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.C != b.C ? a.C < b.C : a.seed < b.seed;
  });
}

}  // namespace

json results_json(std::vector<SweepRow> rows) {
  sort_rows(rows);
  json j;
  j["schema_version"] = kResultsSchemaVersion;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"C", r.C},
                         {"seed", r.seed},
                         {"top1_supernet", r.top1_supernet},
                         {"top1_fused", r.top1_fused},
                         {"train_top1", r.train_top1},
                         {"active_branches", r.active_branches},
                         {"max_logit_diff", r.max_logit_diff}});
  }
  return j;
}

void write_results(const std::vector<SweepRow>& rows, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "results.json") << results_json(rows).dump(2) << "\n";
  std::vector<SweepRow> sorted = rows;
  sort_rows(sorted);
  std::ofstream csv(out_dir / "results.csv");
  csv.precision(9);
  csv << "C,seed,top1_supernet,top1_fused,train_top1,active_branches,max_logit_diff\n";
  for (const auto& r : sorted) {
    csv << r.C << ',' << r.seed << ',' << r.top1_supernet << ',' << r.top1_fused << ','
        << r.train_top1 << ',' << r.active_branches << ',' << r.max_logit_diff << '\n';
  }
}

std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<json>& budgets,
                                const std::vector<std::uint64_t>& seeds, const fs::path& out_dir) {
  if (budgets.empty() || seeds.empty()) throw ConfigError("sweep needs at least one budget and one seed");
  base.validate();
  const DatasetSplits data = load_data(base.data);
  const NetworkArch arch = base.build_arch();
  std::vector<SweepRow> rows;
  for (const json& b : budgets) {
    const std::int64_t C = resolve_budget(b, arch);
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.budget = C;
      cfg.seed = seed;
      const fs::path run_dir = out_dir / ("C" + std::to_string(C) + "_seed" + std::to_string(seed));
      const TrainResult tr = train_supernet(cfg, data, run_dir);

      Supernet<float> net(tr.final_arch, 0);
      net.load_from(Checkpoint::load(run_dir / "checkpoint.rpfz"));
      const Gates gates = tr.final_arch.gates();
      const FusedNetwork<float> fused = fuse_network(net, gates);

      SweepRow row;
      row.C = C;
      row.seed = seed;
      row.train_top1 = tr.train_top1;
      row.active_branches = tr.final_arch.active_branches();
      row.top1_supernet = evaluate(net, gates, data.test, cfg.eval_batch_size).top1;
      row.top1_fused = evaluate(fused, data.test, cfg.eval_batch_size).top1;
      const std::int64_t n = std::min<std::int64_t>(data.test.size(), 64);
      std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
      const Tensor<float> x = gather_images<float>(data.test, idx);
      row.max_logit_diff = max_abs_diff(net.predict(x, gates), fused.forward(x));
      rows.push_back(row);
    }
  }
  write_results(rows, out_dir);
  sort_rows(rows);
  return rows;
}

}  // namespace repfuse
