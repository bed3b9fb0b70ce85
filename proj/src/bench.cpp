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

#include "repfuse/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "repfuse/kernels.hpp"

namespace repfuse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_counts(int warmup, int iters) {
  if (iters < kMinTimedIters) {
    throw std::invalid_argument("timed iterations must be >= " + std::to_string(kMinTimedIters) +
                                ", got " + std::to_string(iters));
  }
  if (warmup < kMinWarmupIters) {
    throw std::invalid_argument("warmup iterations must be >= " + std::to_string(kMinWarmupIters) +
                                ", got " + std::to_string(warmup));
  }
}

double seconds_of(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

LatencyStats summarize(std::vector<double> samples) {
  LatencyStats s;
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  s.p50 = percentile(samples, 0.5);
  s.p95 = percentile(samples, 0.95);
  s.samples = std::move(samples);
  return s;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
  return j;
}

json entry_json(const BenchEntry& e) {
  return json{{"model_id", e.model_id},  {"mode", e.mode},        {"mean_s", e.stats.mean},
              {"p50_s", e.stats.p50},    {"p95_s", e.stats.p95}};
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

LatencyStats time_calls(const std::function<void()>& fn, int warmup, int iters) {
  check_counts(warmup, iters);
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  for (int i = 0; i < iters; ++i) samples.push_back(seconds_of(fn));
  return summarize(std::move(samples));
}

Tensor<float> LoadedModel::forward(const Tensor<float>& x) {
  if (fused) return fused->forward(x);
  return supernet->predict(x, arch.gates());
}

LoadedModel load_model(const fs::path& path, const std::optional<fs::path>& arch_path) {
  if (!fs::exists(path)) throw std::runtime_error("model file not found: " + path.string());
  LoadedModel m;
  m.id = path.string();
  const Checkpoint ckpt = Checkpoint::load(path);
  fs::path sidecar = path;
  sidecar.replace_extension(".json");
  std::optional<json> side;
  if (fs::exists(sidecar)) side = read_json(sidecar);
  if (side && side->value("format", std::string()) == "repfuse-fused") {
    m.mode = "fused";
    m.fused = FusedNetwork<float>::from_files(ckpt, *side);
    m.arch = m.fused->source_arch;
    return m;
  }
  fs::path arch_file;
  if (arch_path) {
    arch_file = *arch_path;
  } else if (side && side->value("format", std::string()) == "repfuse-arch") {
    arch_file = sidecar;
  } else if (fs::exists(path.parent_path() / "arch_final.json")) {
    arch_file = path.parent_path() / "arch_final.json";
  } else {
    throw std::runtime_error("no architecture found for " + path.string() +
                             " (pass --arch, or place arch_final.json beside it)");
  }
  m.mode = "multi-branch";
  m.arch = NetworkArch::load(arch_file);
  m.supernet = std::make_unique<Supernet<float>>(m.arch, 0);
  m.supernet->load_from(ckpt);
  return m;
}

json BenchReport::to_json() const {
  json j;
  j["batch"] = batch;
  j["warmup_iters"] = warmup;
  j["timed_iters"] = iters;
  j["threads"] = threads;
  j["model"] = entry_json(model);
  if (compare) j["compare"] = entry_json(*compare);
  j["speedup"] = speedup ? json(*speedup) : json(nullptr);
  return j;
}

BenchReport bench_models(LoadedModel& model, LoadedModel* compare, const BenchOptions& options) {
  check_counts(options.warmup, options.iters);
  if (options.batch < 1) throw std::invalid_argument("batch must be positive");
  if (compare != nullptr && (compare->image_size() != model.image_size() ||
                             compare->in_channels() != model.in_channels())) {
    throw std::invalid_argument("models take different input shapes");
  }
  const int saved_threads = kernels::max_threads();
  if (!options.parallel) kernels::set_num_threads(1);

  Tensor<float> x(Shape(options.batch, model.in_channels(), model.image_size(), model.image_size()));
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : x.data()) v = dist(rng);

  auto run_model = [&] { model.forward(x); };
  auto run_compare = [&] { compare->forward(x); };
  for (int i = 0; i < options.warmup; ++i) {
    run_model();
    if (compare != nullptr) run_compare();
  }
  // Interleaved so slow drift in machine load hits both models alike.
  std::vector<double> a, b;
  for (int i = 0; i < options.iters; ++i) {
    a.push_back(seconds_of(run_model));
    if (compare != nullptr) b.push_back(seconds_of(run_compare));
  }

  BenchReport r;
  r.batch = options.batch;
  r.warmup = options.warmup;
  r.iters = options.iters;
  r.threads = kernels::max_threads();
  r.model = {model.id, model.mode, summarize(std::move(a))};
  if (compare != nullptr) {
    r.compare = BenchEntry{compare->id, compare->mode, summarize(std::move(b))};
    if (model.mode != compare->mode) {
      const BenchEntry& multi = model.mode == "multi-branch" ? r.model : *r.compare;
      const BenchEntry& fused = model.mode == "fused" ? r.model : *r.compare;
      r.speedup = multi.stats.mean / fused.stats.mean;
    }
  }
  kernels::set_num_threads(saved_threads);
  return r;
}

}  // namespace repfuse
