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

#include "repfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

namespace repfuse {

using nlohmann::json;
namespace fs = std::filesystem;

TrainConfig TrainConfig::from_json(const json& j) {
  try {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.init_lr = j.value("init_lr", c.init_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.momentum = j.value("momentum", c.momentum);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.seed = j.value("seed", c.seed);
    if (j.contains("budget")) c.budget = j.at("budget");
    c.arch_preset = j.value("arch_preset", c.arch_preset);
    if (j.contains("widths")) c.widths = j.at("widths").get<std::vector<std::int64_t>>();
    if (j.contains("strides")) c.strides = j.at("strides").get<std::vector<std::int64_t>>();
    c.K = j.value("K", c.K);
    if (j.contains("branches")) {
      c.branches.clear();
      for (const auto& b : j.at("branches")) c.branches.push_back(parse_branch_kind(b.get<std::string>()));
    }
    c.subset_fraction = j.value("subset_fraction", c.subset_fraction);
    c.alpha_lr = j.value("alpha_lr", c.alpha_lr);
    if (j.contains("alpha_betas")) {
      const auto b = j.at("alpha_betas").get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("alpha_betas needs two values");
      c.alpha_beta1 = b[0];
      c.alpha_beta2 = b[1];
    }
    c.calibration_batches = j.value("calibration_batches", c.calibration_batches);
    if (j.contains("augment")) c.augment = j.at("augment").get<bool>();
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    if (j.contains("data")) {
      const json& d = j.at("data");
      c.data.kind = d.value("kind", c.data.kind);
      c.data.dir = d.value("dir", c.data.dir);
      c.data.n_train = d.value("n_train", c.data.n_train);
      c.data.n_test = d.value("n_test", c.data.n_test);
      c.data.classes = d.value("classes", c.data.classes);
      c.data.image_size = d.value("image_size", c.data.image_size);
      c.data.seed = d.value("seed", c.data.seed);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
}

json TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["init_lr"] = init_lr;
  j["weight_decay"] = weight_decay;
  j["momentum"] = momentum;
  j["lr_schedule"] = lr_schedule;
  j["seed"] = seed;
  j["budget"] = budget;
  j["arch_preset"] = arch_preset;
  if (!widths.empty()) j["widths"] = widths;
  if (!strides.empty()) j["strides"] = strides;
  j["K"] = K;
  j["branches"] = json::array();
  for (BranchKind k : branches) j["branches"].push_back(std::string(branch_kind_name(k)));
  j["subset_fraction"] = subset_fraction;
  j["alpha_lr"] = alpha_lr;
  j["alpha_betas"] = {alpha_beta1, alpha_beta2};
  j["calibration_batches"] = calibration_batches;
  if (augment) j["augment"] = *augment;
  j["eval_batch_size"] = eval_batch_size;
  j["data"] = {{"kind", data.kind},       {"dir", data.dir},         {"n_train", data.n_train},
               {"n_test", data.n_test},   {"classes", data.classes}, {"image_size", data.image_size},
               {"seed", data.seed}};
  return j;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(init_lr > 0)) throw ConfigError("init_lr must be positive");
  if (weight_decay < 0 || momentum < 0 || momentum >= 1) {
    throw ConfigError("weight_decay must be >= 0 and momentum in [0, 1)");
  }
  if (lr_schedule != "cosine" && lr_schedule != "constant") {
    throw ConfigError("lr_schedule must be 'cosine' or 'constant'");
  }
  if (!(subset_fraction > 0 && subset_fraction <= 1)) throw ConfigError("subset_fraction must be in (0, 1]");
  if (calibration_batches < 0) throw ConfigError("calibration_batches must be >= 0");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be positive");
  if (K < 1 || K % 2 == 0) throw ConfigError("K must be odd and positive");
  if (data.kind != "synthetic" && data.kind != "cifar10") {
    throw ConfigError("data.kind must be 'synthetic' or 'cifar10'");
  }
  if (data.kind == "synthetic" && (data.n_train < 2 || data.n_test < 1 || data.classes < 2)) {
    throw ConfigError("synthetic data needs n_train >= 2, n_test >= 1, classes >= 2");
  }
  if (widths.size() != strides.size()) throw ConfigError("widths and strides differ in length");
  if (std::find(branches.begin(), branches.end(), BranchKind::ConvKxK) == branches.end()) {
    throw ConfigError("branches must include convKxK");
  }
}

NetworkArch TrainConfig::build_arch() const {
  const std::int64_t classes = data.kind == "cifar10" ? 10 : data.classes;
  const std::int64_t size = data.kind == "cifar10" ? kCifarImageSize : data.image_size;
  if (!widths.empty()) {
    NetworkArch a = make_arch(widths, strides, branches, classes, 3, size, K);
    a.preset = "custom";
    return a;
  }
  return preset_arch(arch_preset, branches, classes, size);
}

std::int64_t resolve_budget(const json& budget, const NetworkArch& arch) {
  const std::int64_t lo = arch.protected_branches(), hi = arch.total_branches();
  if (budget.is_string()) {
    const auto s = budget.get<std::string>();
    if (s == "min") return lo;
    if (s == "mid") return std::max(lo, hi / 2);
    if (s == "total") return hi;
    throw ConfigError("budget must be an integer, 'min', 'mid' or 'total', got '" + s + "'");
  }
  if (!budget.is_number_integer()) throw ConfigError("budget must be an integer or a name");
  const auto C = budget.get<std::int64_t>();
  if (C < lo) {
    throw ConfigError("budget C=" + std::to_string(C) + " is below the " + std::to_string(lo) +
                      " protected branches");
  }
  return C;
}

std::int64_t TrainConfig::resolve_budget(const NetworkArch& arch) const {
  return repfuse::resolve_budget(budget, arch);
}

double cosine_lr(double init_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return init_lr;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * init_lr * (1.0 + std::cos(std::numbers::pi * t));
}

DatasetSplits load_data(const DataConfig& cfg) {
  if (cfg.kind == "synthetic") {
    return {synthetic_dataset(cfg.n_train, cfg.classes, cfg.seed, cfg.image_size, "train"),
            synthetic_dataset(cfg.n_test, cfg.classes, cfg.seed + 7919, cfg.image_size, "test")};
  }
  std::optional<fs::path> dir;
  if (!cfg.dir.empty()) dir = cfg.dir;
  const auto found = find_cifar10(dir);
  if (!found) {
    throw IoError("CIFAR-10 binaries not found (looked in '" + cfg.dir +
                  "' and $REPFUSE_DATA_DIR, directly and under cifar-10-batches-bin)");
  }
  return load_cifar10(*found);
}

json EvalResult::to_json() const { return json{{"top1", top1}, {"loss", loss}, {"n", n}}; }

namespace {

template <typename Forward>
EvalResult run_eval(const Dataset& data, std::int64_t batch_size, Forward&& forward) {
  EvalResult r;
  r.n = data.size();
  double loss_sum = 0;
  std::int64_t correct = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const std::int64_t end = std::min(data.size(), start + batch_size);
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> logits = forward(gather_images<float>(data, idx));
    const std::int64_t K = logits.shape().c();
    for (std::int64_t n = 0; n < end - start; ++n) {
      const float* row = logits.ptr() + n * K;
      const int label = data.labels[static_cast<std::size_t>(start + n)];
      const double mx = *std::max_element(row, row + K);
      double z = 0;
      for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
      loss_sum += std::log(z) + mx - row[label];
      correct += (std::max_element(row, row + K) - row) == label;
    }
  }
  if (r.n > 0) {
    r.top1 = static_cast<double>(correct) / static_cast<double>(r.n);
    r.loss = loss_sum / static_cast<double>(r.n);
  }
  return r;
}

}  // namespace

EvalResult evaluate(Supernet<float>& net, const Gates& gates, const Dataset& data,
                    std::int64_t batch_size) {
  return run_eval(data, batch_size, [&](const Tensor<float>& x) { return net.predict(x, gates); });
}

EvalResult evaluate(const FusedNetwork<float>& net, const Dataset& data, std::int64_t batch_size) {
  return run_eval(data, batch_size, [&](const Tensor<float>& x) { return net.forward(x); });
}

void calibrate_batch_norm(Supernet<float>& net, const Gates& gates, const Dataset& data,
                          std::int64_t batches, std::int64_t batch_size, std::uint64_t seed) {
  if (batches <= 0) return;
  for (auto* bn : net.batch_norms()) bn->calibration_batches = 0;
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::int64_t bs = std::min(batch_size, data.size());
  for (std::int64_t b = 0; b < batches && (b + 1) * bs <= data.size(); ++b) {
    std::span<const std::int64_t> idx(order.data() + b * bs, static_cast<std::size_t>(bs));
    net.forward(ad::constant(gather_images<float>(data, idx)), gates, Mode::Train, nullptr);
  }
  for (auto* bn : net.batch_norms()) bn->calibration_batches = -1;
}

json TrainResult::to_json() const {
  json j;
  j["budget"] = budget;
  j["best_epoch"] = best_epoch;
  j["train_top1"] = train_top1;
  j["train_loss"] = train_loss;
  j["active_branches"] = final_arch.active_branches();
  j["total_branches"] = final_arch.total_branches();
  j["protected_branches"] = final_arch.protected_branches();
  if (test) j["test"] = test->to_json();
  return j;
}

TrainResult train_supernet(const TrainConfig& config, const fs::path& out_dir) {
  config.validate();
  return train_supernet(config, load_data(config.data), out_dir);
}

TrainResult train_supernet(const TrainConfig& config, const DatasetSplits& splits,
                           const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  const NetworkArch arch = config.build_arch();
  const std::int64_t C = config.resolve_budget(arch);
  const Dataset train = subset(splits.train, config.subset_fraction, config.seed + 17);
  const bool do_augment = config.augment.value_or(config.data.kind == "cifar10");

  Supernet<float> net(arch, config.seed);
  SearchConfig sc;
  sc.budget = C;
  sc.alpha_lr = config.alpha_lr;
  sc.alpha_beta1 = config.alpha_beta1;
  sc.alpha_beta2 = config.alpha_beta2;
  sc.seed = config.seed ^ 0x5eed5eedULL;
  Search<float> search(net, sc, SgdConfig{config.momentum, config.weight_decay});

  const std::int64_t N = train.size();
  const std::int64_t bs = std::min(config.batch_size, N);
  std::int64_t per_epoch = N / bs;
  if (N % bs >= 2) ++per_epoch;
  const std::int64_t total_steps = config.epochs * per_epoch;

  std::ofstream log(out_dir / "search_log.csv");
  if (!log) throw IoError("cannot write " + (out_dir / "search_log.csv").string());
  log << "epoch,iter,loss,top1,active_branches,mean_alpha,min_alpha,max_alpha\n";
  log.precision(9);

  std::mt19937_64 data_rng(config.seed + 1);
  std::vector<std::int64_t> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.budget = C;
  double best_top1 = -1;
  Checkpoint best_weights;
  std::vector<double> best_alpha = search.state().alpha;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), data_rng);
    double top1_sum = 0, loss_sum = 0;
    for (std::int64_t it = 0; it < per_epoch; ++it, ++step) {
      const std::int64_t start = it * bs;
      const std::int64_t end = std::min(N, start + bs);
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(end - start));
      Tensor<float> x = gather_images<float>(train, idx);
      const std::vector<int> y = gather_labels(train, idx);
      if (do_augment) augment(x, data_rng);
      const double lr = config.lr_schedule == "cosine" ? cosine_lr(config.init_lr, step, total_steps)
                                                       : config.init_lr;
      auto where = [&] {
        return "epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it) + " (batch index " +
               std::to_string(start / bs) + ", samples " + std::to_string(start) + ".." +
               std::to_string(end - 1) + ", lr " + std::to_string(lr) + ")";
      };
      StepMetrics m;
      try {
        m = search.step(x, y, lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where());
      }
      if (!std::isfinite(m.loss)) throw NumericError("non-finite loss at " + where());
      log << epoch << ',' << it << ',' << m.loss << ',' << m.top1 << ',' << m.active_branches << ','
          << m.mean_alpha << ',' << m.min_alpha << ',' << m.max_alpha << '\n';
      top1_sum += m.top1;
      loss_sum += m.loss;
    }
    const double epoch_top1 = per_epoch > 0 ? top1_sum / per_epoch : 0.0;
    result.train_top1 = epoch_top1;
    result.train_loss = per_epoch > 0 ? loss_sum / per_epoch : 0.0;
    spdlog::info("epoch {}/{}: loss {:.4f} top1 {:.4f}", epoch + 1, config.epochs, result.train_loss,
                 epoch_top1);
    if (epoch_top1 >= best_top1) {
      best_top1 = epoch_top1;
      result.best_epoch = epoch;
      best_weights = Checkpoint();
      net.save_to(best_weights);
      best_alpha = search.state().alpha;
    }
  }
  log.close();

  if (result.best_epoch >= 0) {
    net.load_from(best_weights);
    search.state().alpha = best_alpha;
  }
  result.final_arch = finalized_arch(net, search.state(), C);
  const Gates gates = result.final_arch.gates();
  if (config.epochs > 0) {
    calibrate_batch_norm(net, gates, train, config.calibration_batches, bs, config.seed + 2);
  }

  Checkpoint ckpt;
  net.save_to(ckpt);
  ckpt.save(out_dir / "checkpoint.rpfz");
  result.final_arch.save(out_dir / "arch_final.json");

  if (splits.test.size() > 0) {
    result.test = evaluate(net, gates, splits.test, config.eval_batch_size);
    std::ofstream(out_dir / "eval_report.json") << json{{"model", "supernet"}, {"split", "test"},
                                                         {"metrics", result.test->to_json()}}.dump(2)
                                                << "\n";
  }
  json report = result.to_json();
  report["config"] = config.to_json();
  std::ofstream(out_dir / "train_report.json") << report.dump(2) << "\n";
  return result;
}

}  // namespace repfuse
