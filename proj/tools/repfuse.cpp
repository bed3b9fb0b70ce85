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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "repfuse/bench.hpp"
#include "repfuse/kernels.hpp"
#include "repfuse/network.hpp"
#include "repfuse/sweep.hpp"
#include "repfuse/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace repfuse;

namespace {

struct CommandError : std::runtime_error {
  CommandError(const std::string& type, const std::string& msg, int code)
      : std::runtime_error(msg), type(type), code(code) {}
  std::string type;
  int code;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json parse_budget(const std::string& s) {
  if (s == "min" || s == "mid" || s == "total") return s;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("budget '" + s + "' is neither an integer nor min/mid/total");
}

struct SearchArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_search(const SearchArgs& a) {
  TrainConfig cfg = TrainConfig::load(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const TrainResult r = train_supernet(cfg, a.out);
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

struct FuseArgs {
  std::string ckpt, arch, out;
  int trials = 10;
  double tol = 1e-3;
  std::uint64_t seed = 0;
};

int cmd_fuse(const FuseArgs& a) {
  const NetworkArch arch = NetworkArch::load(a.arch);
  Supernet<float> net(arch, 0);
  net.load_from(Checkpoint::load(a.ckpt));
  const Gates gates = arch.gates();
  const FusedNetwork<float> fused = fuse_network(net, gates);
  fs::create_directories(a.out);
  fused.to_checkpoint().save(fs::path(a.out) / "fused.rpfz");
  write_json(fs::path(a.out) / "fused.json", fused.sidecar());
  const EquivalenceReport rep = verify_equivalence(net, gates, fused, a.trials, a.tol, a.seed);
  write_json(fs::path(a.out) / "verify_report.json", rep.to_json());
  std::cout << rep.to_json().dump(2) << "\n";
  if (!rep.pass) {
    throw CommandError("verification_failed",
                       "fused logits diverge by " + std::to_string(rep.max_abs_diff) +
                           " > tol " + std::to_string(a.tol),
                       3);
  }
  return 0;
}

struct EvalArgs {
  std::string model, arch, data, out, split = "test";
  bool synthetic = false;
  std::int64_t n = 500;
  std::uint64_t data_seed = 1234;
  std::int64_t batch = 256;
};

int cmd_eval(const EvalArgs& a) {
  LoadedModel m = load_model(a.model, a.arch.empty() ? std::nullopt : std::optional<fs::path>(a.arch));
  DatasetSplits data;
  if (a.synthetic) {
    DataConfig dc;
    dc.kind = "synthetic";
    dc.n_train = a.split == "train" ? a.n : 2;
    dc.n_test = a.n;
    dc.classes = m.arch.num_classes;
    dc.image_size = m.arch.image_size;
    dc.seed = a.data_seed;
    data = load_data(dc);
  } else {
    const auto dir = find_cifar10(a.data.empty() ? std::nullopt : std::optional<fs::path>(a.data));
    if (!dir) {
      throw IoError("CIFAR-10 binaries not found; pass --data <dir> or set REPFUSE_DATA_DIR");
    }
    data = load_cifar10(*dir);
  }
  const Dataset& ds = a.split == "train" ? data.train : data.test;
  EvalResult r;
  if (m.fused) {
    r = evaluate(*m.fused, ds, a.batch);
  } else {
    r = evaluate(*m.supernet, m.arch.gates(), ds, a.batch);
  }
  const json report{{"model", a.model}, {"mode", m.mode}, {"split", a.split}, {"metrics", r.to_json()}};
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "eval_report.json", report);
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

struct BenchArgs {
  std::string model, compare, arch, out;
  BenchOptions opt;
};

int cmd_bench(const BenchArgs& a) {
  const auto arch = a.arch.empty() ? std::nullopt : std::optional<fs::path>(a.arch);
  LoadedModel m = load_model(a.model, arch);
  std::optional<LoadedModel> c;
  if (!a.compare.empty()) c = load_model(a.compare, arch);
  const BenchReport r = bench_models(m, c ? &*c : nullptr, a.opt);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "bench_report.json", r.to_json());
  }
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

struct SweepArgs {
  std::string config, budgets = "min,mid,total", seeds = "0", out;
};

int cmd_sweep(const SweepArgs& a) {
  const TrainConfig cfg = TrainConfig::load(a.config);
  std::vector<json> budgets;
  for (const auto& b : split_list(a.budgets)) budgets.push_back(parse_budget(b));
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) seeds.push_back(std::stoull(s));
  const auto rows = run_sweep(cfg, budgets, seeds, a.out);
  std::cout << results_json(rows).dump(2) << "\n";
  return 0;
}

int report_error(const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Searchable multi-branch conv nets with lossless single-path fusion"};
  app.require_subcommand(1);
  int threads = 0;
  bool quiet = false;
  app.add_option("--threads", threads, "Worker threads for training/eval (0 = OpenMP default)");
  app.add_flag("--quiet", quiet, "Only log warnings");

  SearchArgs sa;
  auto* search = app.add_subcommand("search", "Train a supernet and search its branches");
  search->add_option("--config", sa.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  search->add_option("--out", sa.out, "Output directory")->required();
  search->add_option("--seed", sa.seed, "Override the config seed");

  FuseArgs fa;
  auto* fuse = app.add_subcommand("fuse", "Fuse a searched supernet into a single-path net");
  fuse->add_option("--ckpt", fa.ckpt, "Supernet checkpoint")->required()->check(CLI::ExistingFile);
  fuse->add_option("--arch", fa.arch, "Architecture JSON")->required()->check(CLI::ExistingFile);
  fuse->add_option("--out", fa.out, "Output directory")->required();
  fuse->add_option("--verify-trials", fa.trials, "Random input batches for verification")
      ->check(CLI::NonNegativeNumber);
  fuse->add_option("--tol", fa.tol, "Max allowed logit divergence");
  fuse->add_option("--seed", fa.seed, "Seed for verification inputs");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a supernet or fused model");
  eval->add_option("--model", ea.model, "Checkpoint (.rpfz)")->required()->check(CLI::ExistingFile);
  eval->add_option("--arch", ea.arch, "Architecture JSON for supernet checkpoints");
  eval->add_option("--data", ea.data, "CIFAR-10 directory (default $REPFUSE_DATA_DIR)");
  eval->add_flag("--synthetic", ea.synthetic, "Evaluate on synthetic blobs instead of CIFAR-10");
  eval->add_option("--n", ea.n, "Synthetic sample count");
  eval->add_option("--data-seed", ea.data_seed, "Synthetic data seed");
  eval->add_option("--split", ea.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--batch", ea.batch, "Evaluation batch size")->check(CLI::PositiveNumber);
  eval->add_option("--out", ea.out, "Directory for eval_report.json");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Inference latency benchmark");
  bench->add_option("--model", ba.model, "Checkpoint (.rpfz)")->required()->check(CLI::ExistingFile);
  bench->add_option("--compare", ba.compare, "Second model, timed interleaved")->check(CLI::ExistingFile);
  bench->add_option("--arch", ba.arch, "Architecture JSON for supernet checkpoints");
  bench->add_option("--batch", ba.opt.batch, "Batch size");
  bench->add_option("--iters", ba.opt.iters, "Timed iterations (>= 30)");
  bench->add_option("--warmup", ba.opt.warmup, "Warmup iterations (>= 5)");
  bench->add_flag("--parallel", ba.opt.parallel, "Use all worker threads");
  bench->add_option("--out", ba.out, "Directory for bench_report.json");

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep", "Search over several budgets and seeds");
  sweep->add_option("--config", wa.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--budgets", wa.budgets, "Comma list of C values or min/mid/total");
  sweep->add_option("--seeds", wa.seeds, "Comma list of seeds");
  sweep->add_option("--out", wa.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  }

  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  if (threads > 0) kernels::set_num_threads(threads);
  try {
    if (*search) return cmd_search(sa);
    if (*fuse) return cmd_fuse(fa);
    if (*eval) return cmd_eval(ea);
    if (*bench) return cmd_bench(ba);
    if (*sweep) return cmd_sweep(wa);
  } catch (const CommandError& e) {
    return report_error(e.type, e.what(), e.code);
  } catch (const ConfigError& e) {
    return report_error("config", e.what(), 2);
  } catch (const FormatError& e) {
    return report_error("format", e.what(), 1);
  } catch (const IoError& e) {
    return report_error("io", e.what(), 1);
  } catch (const std::invalid_argument& e) {
    return report_error("invalid_argument", e.what(), 2);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what(), 1);
  }
  return 0;
}
