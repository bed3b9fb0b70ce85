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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "repfuse/data.hpp"
#include "repfuse/network.hpp"
#include "repfuse/train.hpp"
#include "test_util.hpp"

using namespace repfuse;
using namespace repfuse::testing;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("repfuse_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RawImages random_records(std::int64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RawImages r;
  r.pixels.resize(static_cast<std::size_t>(n * kCifarPixels));
  for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  for (std::int64_t i = 0; i < n; ++i) r.labels.push_back(static_cast<int>(rng() % 10));
  return r;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TrainConfig small_config(std::int64_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.init_lr = 0.05;
  c.widths = {8, 8};
  c.strides = {1, 2};
  c.data.kind = "synthetic";
  c.data.n_train = 512;
  c.data.n_test = 256;
  c.data.classes = 4;
  c.data.image_size = 16;
  return c;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("CIFAR records round trip bitwise") {
  const RawImages r = random_records(25, 71);
  const auto bytes = encode_cifar_records(r);
  CHECK(static_cast<std::int64_t>(bytes.size()) == 25 * kCifarRecordBytes);
  const RawImages back = parse_cifar_records(bytes, "mem");
  CHECK(back.labels == r.labels);
  CHECK(back.pixels == r.pixels);

  const fs::path dir = fresh_dir("cifar_rt");
  write_bytes(dir / "b.bin", bytes);
  const RawImages f = read_cifar_file(dir / "b.bin");
  CHECK(f.pixels == r.pixels);
  CHECK(f.count() == 25);
}

TEST_CASE("CIFAR reader errors") {
  const fs::path dir = fresh_dir("cifar_err");
  auto bytes = encode_cifar_records(random_records(3, 72));
  bytes.resize(bytes.size() - 10);
  write_bytes(dir / "trunc.bin", bytes);
  try {
    read_cifar_file(dir / "trunc.bin");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
  }
  CHECK_THROWS_AS(read_cifar_file(dir / "missing.bin"), IoError);

  write_bytes(dir / "three.bin", encode_cifar_records(random_records(3, 73)));
  try {
    read_cifar_file(dir / "three.bin", kCifarBatchRecords);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(kCifarBatchRecords * kCifarRecordBytes)) != std::string::npos);
    CHECK(msg.find(std::to_string(3 * kCifarRecordBytes)) != std::string::npos);
  }

  RawImages bad = random_records(2, 74);
  bad.labels[1] = 10;
  CHECK_THROWS_AS(parse_cifar_records(encode_cifar_records(bad), "mem"), FormatError);
}

TEST_CASE("a full-size CIFAR directory loads and normalizes with training statistics") {
  const fs::path dir = fresh_dir("cifar_full") / "cifar-10-batches-bin";
  fs::create_directories(dir);
  for (int b = 1; b <= 5; ++b) {
    write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                encode_cifar_records(random_records(kCifarBatchRecords, 80 + static_cast<std::uint64_t>(b))));
  }
  write_bytes(dir / "test_batch.bin", encode_cifar_records(random_records(kCifarBatchRecords, 86)));
  REQUIRE(find_cifar10(dir.parent_path()).has_value());
  const DatasetSplits s = load_cifar10(dir.parent_path());
  CHECK(s.train.size() == 50000);
  CHECK(s.test.size() == 10000);
  CHECK(*std::max_element(s.test.labels.begin(), s.test.labels.end()) < 10);
  CHECK(s.test.images.shape() == Shape(10000, 3, 32, 32));
  for (int c = 0; c < 3; ++c) {
    CHECK(s.test.normalization.mean[static_cast<std::size_t>(c)] == s.train.normalization.mean[static_cast<std::size_t>(c)]);
    // Uniform bytes: mean 127.5/255, std about 73.9/255.
    CHECK(std::abs(s.train.normalization.mean[static_cast<std::size_t>(c)] - 0.5) < 0.01);
  }
  double sum = 0;
  for (std::int64_t i = 0; i < 3 * 1024 * 100; ++i) sum += s.train.images[i];
  CHECK(std::abs(sum / (3 * 1024 * 100)) < 0.02);

  fs::remove(dir / "data_batch_3.bin");
  CHECK_THROWS_AS(load_cifar10(dir.parent_path()), IoError);
  CHECK_FALSE(find_cifar10(fresh_dir("cifar_empty")).has_value());
}

TEST_CASE("synthetic data is balanced, deterministic and separable") {
  const Dataset a = synthetic_dataset(1000, 4, 5, 16);
  std::map<int, int> hist;
  for (int l : a.labels) ++hist[l];
  REQUIRE(hist.size() == 4);
  for (auto [label, count] : hist) CHECK(std::abs(count - 250) <= 1);

  const Dataset b = synthetic_dataset(1000, 4, 5, 16);
  CHECK(max_abs_diff(a.images, b.images) == 0.0f);
  CHECK(max_abs_diff(a.images, synthetic_dataset(1000, 4, 6, 16).images) > 0.0f);

  // Nearest centroid, fitted on one seed and scored on another.
  const Dataset test = synthetic_dataset(1000, 4, 99, 16);
  const std::int64_t D = a.images.numel() / a.size();
  std::vector<std::vector<double>> centroid(4, std::vector<double>(static_cast<std::size_t>(D), 0.0));
  for (std::int64_t n = 0; n < a.size(); ++n)
    for (std::int64_t d = 0; d < D; ++d)
      centroid[static_cast<std::size_t>(a.labels[static_cast<std::size_t>(n)])][static_cast<std::size_t>(d)] +=
          a.images[n * D + d] / 250.0;
  int correct = 0;
  for (std::int64_t n = 0; n < test.size(); ++n) {
    int best = 0;
    double best_d = INFINITY;
    for (int k = 0; k < 4; ++k) {
      double dist = 0;
      for (std::int64_t d = 0; d < D; ++d) {
        const double diff = test.images[n * D + d] - centroid[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    correct += best == test.labels[static_cast<std::size_t>(n)] ? 1 : 0;
  }
  CHECK(correct / 1000.0 > 0.8);
}

TEST_CASE("augmentation primitives") {
  std::mt19937_64 rng(75);
  const Tensor<float> s = random_tensor<float>(Shape(1, 3, 6, 5), rng);
  Tensor<float> f = s.clone();
  hflip(f.ptr(), 3, 6, 5);
  CHECK(f.at(0, 1, 2, 0) == s.at(0, 1, 2, 4));
  std::vector<float> h1(f.data().begin(), f.data().end()), h0(s.data().begin(), s.data().end());
  std::sort(h1.begin(), h1.end());
  std::sort(h0.begin(), h0.end());
  CHECK(h0 == h1);
  hflip(f.ptr(), 3, 6, 5);
  CHECK(max_abs_diff(f, s) == 0.0f);

  Tensor<float> c(s.shape());
  crop_padded(s.ptr(), c.ptr(), 3, 6, 5, 4, 4, 4);
  CHECK(max_abs_diff(c, s) == 0.0f);
  crop_padded(s.ptr(), c.ptr(), 3, 6, 5, 4, 0, 0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 5; ++x) CHECK(c.at(0, 1, y, x) == (y >= 4 && x >= 4 ? s.at(0, 1, y - 4, x - 4) : 0.0f));
  crop_padded(s.ptr(), c.ptr(), 3, 6, 5, 4, 5, 3);
  CHECK(c.at(0, 2, 0, 1) == s.at(0, 2, 1, 0));
  CHECK(c.at(0, 2, 0, 0) == 0.0f);
  CHECK(c.at(0, 2, 5, 1) == 0.0f);

  Tensor<float> batch = random_tensor<float>(Shape(16, 3, 8, 8), rng);
  const Tensor<float> before = batch.clone();
  augment(batch, rng);
  CHECK(batch.shape() == before.shape());
  CHECK(max_abs_diff(batch, before) > 0.0f);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0.1, 0, 100) == doctest::Approx(0.1));
  CHECK(cosine_lr(0.1, 50, 100) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.1, 100, 100) == doctest::Approx(0.0));
  for (int s = 1; s <= 100; ++s) CHECK(cosine_lr(0.1, s, 100) <= cosine_lr(0.1, s - 1, 100));
}

TEST_CASE("config parsing and validation") {
  const TrainConfig c = TrainConfig::from_json(nlohmann::json::parse(
      R"({"epochs": 3, "budget": "mid", "widths": [4, 4], "strides": [1, 2], "data": {"classes": 4}})"));
  CHECK(c.epochs == 3);
  CHECK(c.data.classes == 4);
  const NetworkArch arch = c.build_arch();
  CHECK(arch.blocks.size() == 2);
  CHECK(c.resolve_budget(arch) == std::max<std::int64_t>(arch.protected_branches(), arch.total_branches() / 2));
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"epochs": -1})")).validate(), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"budget": "lots"})")).resolve_budget(arch),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json::parse(R"({"budget": 1})")).resolve_budget(arch), ConfigError);
}

TEST_CASE("two epochs on synthetic data reach 90% training accuracy") {
  const fs::path out = fresh_dir("train_smoke");
  const TrainResult r = train_supernet(small_config(2), out);
  CHECK(r.train_top1 > 0.9);
  for (const char* f : {"checkpoint.rpfz", "arch_final.json", "search_log.csv", "train_report.json", "eval_report.json"})
    CHECK(fs::exists(out / f));
  const auto rows = read_csv(out / "search_log.csv");
  REQUIRE(rows.size() == 1 + 2 * 16);
  CHECK(rows[0] == std::vector<std::string>{"epoch", "iter", "loss", "top1", "active_branches", "mean_alpha",
                                            "min_alpha", "max_alpha"});
  REQUIRE(r.test.has_value());
  CHECK(r.test->top1 > 0.9);

  // The saved checkpoint evaluates to the reported test accuracy.
  const NetworkArch arch = NetworkArch::load(out / "arch_final.json");
  Supernet<float> net(arch, 99);
  net.load_from(Checkpoint::load(out / "checkpoint.rpfz"));
  const DatasetSplits data = load_data(small_config(2).data);
  CHECK(evaluate(net, arch.gates(), data.test).top1 == r.test->top1);
}

TEST_CASE("zero epochs still writes a valid untouched model") {
  const fs::path out = fresh_dir("train_zero");
  const TrainConfig cfg = small_config(0);
  const TrainResult r = train_supernet(cfg, out);
  const NetworkArch arch = NetworkArch::load(out / "arch_final.json");
  Supernet<float> loaded(arch, 1234);
  loaded.load_from(Checkpoint::load(out / "checkpoint.rpfz"));
  Supernet<float> fresh(cfg.build_arch(), cfg.seed);
  Checkpoint a, b;
  loaded.save_to(a);
  fresh.save_to(b);
  CHECK(a.serialize() == b.serialize());
  CHECK(read_csv(out / "search_log.csv").size() == 1);
  CHECK(r.final_arch.active_branches() == r.budget);
}

TEST_CASE("budget sweep logs respect each C") {
  for (const char* name : {"min", "mid", "total"}) {
    TrainConfig cfg = small_config(1);
    cfg.budget = name;
    const fs::path out = fresh_dir(std::string("budget_") + name);
    const TrainResult r = train_supernet(cfg, out);
    const auto rows = read_csv(out / "search_log.csv");
    REQUIRE(rows.size() > 1);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(std::stoll(rows[i][4]) == r.budget);
    CHECK(r.final_arch.active_branches() == r.budget);
    for (const auto& b : r.final_arch.blocks) {
      for (std::size_t j = 0; j < b.branches.size(); ++j)
        if (b.branches[j] == BranchKind::ConvKxK) CHECK(b.gates[j] == 1);
    }
  }
}

TEST_CASE("a diverging run aborts with a diagnostic") {
  TrainConfig cfg = small_config(1);
  DatasetSplits data = load_data(cfg.data);
  data.train.images[5] = std::numeric_limits<float>::quiet_NaN();
  const fs::path out = fresh_dir("train_nan");
  try {
    train_supernet(cfg, data, out);
    FAIL("expected an abort");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CAPTURE(msg);
    CHECK(msg.find("lr") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("evaluation oracles") {
  SUBCASE("a hand-built perfect classifier scores 1.0") {
    Dataset d;
    d.num_classes = 3;
    d.images = Tensor<float>(Shape(30, 3, 4, 4));
    for (int n = 0; n < 30; ++n) {
      d.labels.push_back(n % 3);
      for (int i = 0; i < 16; ++i) d.images.at(n, n % 3, i / 4, i % 4) = 1.0f;
    }
    FusedNetwork<float> net;
    FusedConv<float> layer;
    layer.kernel = Tensor<float>(Shape(3, 3, 3, 3));
    for (int c = 0; c < 3; ++c) layer.kernel.at(c, c, 1, 1) = 1.0f;
    layer.bias = Tensor<float>(Shape(3));
    net.layers.push_back(layer);
    net.head_weight = Tensor<float>(Shape(3, 3));
    for (int c = 0; c < 3; ++c) net.head_weight[c * 3 + c] = 1.0f;
    net.head_bias = Tensor<float>(Shape(3));
    CHECK(evaluate(net, d, 7).top1 == 1.0);
  }
  SUBCASE("labels independent of the model give chance accuracy") {
    Dataset d = synthetic_dataset(10000, 10, 3, 8);
    std::mt19937_64 rng(76);
    for (auto& l : d.labels) l = static_cast<int>(rng() % 10);
    const std::vector<std::int64_t> widths{4}, strides{2};
    const NetworkArch arch = make_arch(widths, strides, all_kinds(), 10, 3, 8);
    Supernet<float> net(arch, 2);
    CHECK(std::abs(evaluate(net, arch.gates(), d, 500).top1 - 0.1) <= 0.02);
  }
}

TEST_CASE("eval-mode logits do not depend on the batch") {
  const std::vector<std::int64_t> widths{6, 6}, strides{1, 2};
  const NetworkArch arch = make_arch(widths, strides, all_kinds(), 4, 3, 8);
  Supernet<float> net(arch, 3);
  std::mt19937_64 rng(77);
  for (auto& b : net.blocks()) randomize_batch_norms(b, rng);
  const Tensor<float> x = random_tensor<float>(Shape(128, 3, 8, 8), rng);
  const Tensor<float> all = net.predict(x, arch.gates());
  Tensor<float> one(Shape(1, 3, 8, 8));
  std::memcpy(one.ptr(), x.ptr() + 37 * 192, sizeof(float) * 192);
  const Tensor<float> single = net.predict(one, arch.gates());
  double worst = 0;
  for (int k = 0; k < 4; ++k) worst = std::max(worst, std::abs(static_cast<double>(single[k] - all.at(37, k, 0, 0))));
  CHECK(worst <= 1e-6);

  const Dataset d = synthetic_dataset(100, 4, 8, 8);
  CHECK(evaluate(net, arch.gates(), d, 1).top1 == evaluate(net, arch.gates(), d, 64).top1);
}
