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

#include "repfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>

namespace repfuse {

namespace fs = std::filesystem;

namespace {

const char* const kTrainFiles[] = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                   "data_batch_4.bin", "data_batch_5.bin"};
const char* const kTestFile = "test_batch.bin";

bool has_cifar_files(const fs::path& dir) {
  std::error_code ec;
  if (!fs::exists(dir / kTestFile, ec)) return false;
  for (const char* f : kTrainFiles)
    if (!fs::exists(dir / f, ec)) return false;
  return true;
}

fs::path resolve_cifar_dir(const fs::path& dir) {
  if (has_cifar_files(dir)) return dir;
  if (has_cifar_files(dir / "cifar-10-batches-bin")) return dir / "cifar-10-batches-bin";
  return dir;
}

}  // namespace

RawImages parse_cifar_records(std::span<const std::uint8_t> bytes, const std::string& source) {
  const auto size = static_cast<std::int64_t>(bytes.size());
  if (size % kCifarRecordBytes != 0) {
    throw FormatError(source + ": expected a multiple of " + std::to_string(kCifarRecordBytes) +
                      " bytes (" + std::to_string((size / kCifarRecordBytes) * kCifarRecordBytes) +
                      " for " + std::to_string(size / kCifarRecordBytes) + " records), actual " +
                      std::to_string(size) + " bytes");
  }
  RawImages out;
  const std::int64_t n = size / kCifarRecordBytes;
  out.labels.resize(static_cast<std::size_t>(n));
  out.pixels.resize(static_cast<std::size_t>(n * kCifarPixels));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= 10) {
      throw FormatError(source + ": record " + std::to_string(i) + " has label " +
                        std::to_string(rec[0]) + ", expected 0..9");
    }
    out.labels[static_cast<std::size_t>(i)] = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, out.pixels.begin() + i * kCifarPixels);
  }
  return out;
}

std::vector<std::uint8_t> encode_cifar_records(const RawImages& images) {
  if (static_cast<std::int64_t>(images.pixels.size()) != images.count() * kCifarPixels) {
    throw std::invalid_argument("encode_cifar_records: pixel buffer does not match label count");
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(images.count() * kCifarRecordBytes));
  for (std::int64_t i = 0; i < images.count(); ++i) {
    const int label = images.labels[static_cast<std::size_t>(i)];
    if (label < 0 || label > 255) throw std::invalid_argument("label does not fit a byte");
    std::uint8_t* rec = out.data() + i * kCifarRecordBytes;
    rec[0] = static_cast<std::uint8_t>(label);
    std::copy(images.pixels.begin() + i * kCifarPixels,
              images.pixels.begin() + (i + 1) * kCifarPixels, rec + 1);
  }
  return out;
}

RawImages read_cifar_file(const fs::path& path, std::optional<std::int64_t> expected_records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (expected_records) {
    const std::int64_t expected = *expected_records * kCifarRecordBytes;
    if (static_cast<std::int64_t>(bytes.size()) != expected) {
      throw FormatError(path.string() + ": expected " + std::to_string(expected) +
                        " bytes, actual " + std::to_string(bytes.size()) + " bytes");
    }
  }
  return parse_cifar_records(bytes, path.string());
}

Normalization channel_stats(const RawImages& images) {
  Normalization norm;
  const std::int64_t plane = kCifarImageSize * kCifarImageSize;
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (std::int64_t i = 0; i < images.count(); ++i) {
      const std::uint8_t* p = images.pixels.data() + i * kCifarPixels + c * plane;
      for (std::int64_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double count = static_cast<double>(images.count() * plane);
    norm.mean[c] = count > 0 ? sum / count : 0.0;
    const double var = count > 0 ? sq / count - norm.mean[c] * norm.mean[c] : 1.0;
    norm.std[c] = var > 0 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

Dataset to_dataset(const RawImages& raw, const Normalization& norm, const std::string& split,
                   std::int64_t num_classes) {
  Dataset d;
  d.split = split;
  d.num_classes = num_classes;
  d.normalization = norm;
  d.labels = raw.labels;
  for (int label : d.labels) {
    if (label < 0 || label >= num_classes) {
      throw FormatError("label " + std::to_string(label) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
  d.images = Tensor<float>(Shape(raw.count(), 3, kCifarImageSize, kCifarImageSize));
  const std::int64_t plane = kCifarImageSize * kCifarImageSize;
  float* dst = d.images.ptr();
  for (std::int64_t i = 0; i < raw.count(); ++i)
    for (int c = 0; c < 3; ++c)
      for (std::int64_t k = 0; k < plane; ++k) {
        const std::int64_t off = i * kCifarPixels + c * plane + k;
        dst[off] = static_cast<float>((raw.pixels[static_cast<std::size_t>(off)] / 255.0 - norm.mean[c]) /
                                      norm.std[c]);
      }
  return d;
}

DatasetSplits load_cifar10(const fs::path& dir) {
  const fs::path root = resolve_cifar_dir(dir);
  RawImages train;
  for (const char* f : kTrainFiles) {
    RawImages part = read_cifar_file(root / f, kCifarBatchRecords);
    train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
    train.pixels.insert(train.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  const RawImages test = read_cifar_file(root / kTestFile, kCifarBatchRecords);
  const Normalization norm = channel_stats(train);
  return {to_dataset(train, norm, "train"), to_dataset(test, norm, "test")};
}

std::optional<fs::path> find_cifar10(const std::optional<fs::path>& explicit_dir) {
  std::vector<fs::path> candidates;
  if (explicit_dir) candidates.push_back(*explicit_dir);
  if (const char* env = std::getenv("REPFUSE_DATA_DIR"); env != nullptr && *env != '\0') {
    candidates.emplace_back(env);
  }
  for (const auto& c : candidates) {
    const fs::path r = resolve_cifar_dir(c);
    if (has_cifar_files(r)) return r;
  }
  return std::nullopt;
}

Dataset synthetic_dataset(std::int64_t n, std::int64_t classes, std::uint64_t seed,
                          std::int64_t image_size, const std::string& split) {
  if (n < 1 || classes < 1 || image_size < 4) {
    throw std::invalid_argument("synthetic_dataset: need n >= 1, classes >= 1, image_size >= 4");
  }
  const std::int64_t S = image_size;
  // Class prototypes depend only on the class count and image size, so train
  // and test sets drawn with different seeds share them.
  struct Proto {
    double cy, cx, radius;
    std::array<double, 3> colour;
  };
  std::vector<Proto> protos;
  const std::int64_t grid = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  for (std::int64_t k = 0; k < classes; ++k) {
    const double cell = static_cast<double>(S) / static_cast<double>(grid);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    protos.push_back({(static_cast<double>(k / grid) + 0.5) * cell,
                      (static_cast<double>(k % grid) + 0.5) * cell,
                      S / 8.0 * (1.0 + 0.5 * static_cast<double>(k % 3)),
                      {std::cos(angle), std::sin(angle), k % 2 == 0 ? 0.75 : -0.75}});
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.5);
  std::uniform_real_distribution<double> jitter(-1.5, 1.5);
  Dataset d;
  d.split = split;
  d.num_classes = classes;
  d.images = Tensor<float>(Shape(n, 3, S, S));
  d.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels[static_cast<std::size_t>(i)] = label;
    const Proto& p = protos[static_cast<std::size_t>(label)];
    const double cy = p.cy + jitter(rng), cx = p.cx + jitter(rng);
    for (int c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < S; ++y)
        for (std::int64_t x = 0; x < S; ++x) {
          const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          const double blob = 2.0 * p.colour[c] * std::exp(-r2 / (2.0 * p.radius * p.radius));
          d.images.at(i, c, y, x) = static_cast<float>(blob + noise(rng));
        }
  }
  return d;
}

Dataset subset(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subset_fraction must be in (0, 1]");
  if (fraction == 1.0) return data;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto k = std::max<std::int64_t>(1, std::llround(fraction * static_cast<double>(data.size())));
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  Dataset out;
  out.split = data.split;
  out.num_classes = data.num_classes;
  out.normalization = data.normalization;
  out.images = gather_images<float>(data, idx);
  out.labels = gather_labels(data, idx);
  return out;
}

template <typename T>
Tensor<T> gather_images(const Dataset& data, std::span<const std::int64_t> indices) {
  const Shape& s = data.images.shape();
  const std::int64_t per = s.c() * s.h() * s.w();
  Tensor<T> out(Shape(static_cast<std::int64_t>(indices.size()), s.c(), s.h(), s.w()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const float* src = data.images.ptr() + indices[k] * per;
    std::copy(src, src + per, out.ptr() + static_cast<std::int64_t>(k) * per);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::int64_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::int64_t i : indices) out.push_back(data.labels[static_cast<std::size_t>(i)]);
  return out;
}

void hflip(float* sample, std::int64_t channels, std::int64_t h, std::int64_t w) {
  for (std::int64_t r = 0; r < channels * h; ++r) std::reverse(sample + r * w, sample + (r + 1) * w);
}

void crop_padded(const float* src, float* dst, std::int64_t channels, std::int64_t h,
                 std::int64_t w, std::int64_t pad, std::int64_t dy, std::int64_t dx) {
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sy = y + dy - pad, sx = x + dx - pad;
        dst[(c * h + y) * w + x] =
            (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[(c * h + sy) * w + sx] : 0.0f;
      }
}

void augment(Tensor<float>& batch, std::mt19937_64& rng, std::int64_t pad) {
  const Shape& s = batch.shape();
  const std::int64_t per = s.c() * s.h() * s.w();
  std::vector<float> tmp(static_cast<std::size_t>(per));
  std::uniform_int_distribution<std::int64_t> offset(0, 2 * pad);
  std::bernoulli_distribution flip(0.5);
  for (std::int64_t n = 0; n < s.n(); ++n) {
    float* sample = batch.ptr() + n * per;
    const std::int64_t dy = offset(rng), dx = offset(rng);
    crop_padded(sample, tmp.data(), s.c(), s.h(), s.w(), pad, dy, dx);
    std::copy(tmp.begin(), tmp.end(), sample);
    if (flip(rng)) hflip(sample, s.c(), s.h(), s.w());
  }
}

template Tensor<float> gather_images<float>(const Dataset&, std::span<const std::int64_t>);
template Tensor<double> gather_images<double>(const Dataset&, std::span<const std::int64_t>);

}  // namespace repfuse
