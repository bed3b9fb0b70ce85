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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "repfuse/tensor.hpp"

namespace repfuse {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::int64_t kCifarImageSize = 32;
inline constexpr std::int64_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::int64_t kCifarRecordBytes = 1 + kCifarPixels;
inline constexpr std::int64_t kCifarBatchRecords = 10000;

/// Undecoded CIFAR-style images: per record one label byte followed by the
/// R, G and B planes (1024 bytes each).
struct RawImages {
  std::vector<std::uint8_t> pixels;  // count * 3072
  std::vector<int> labels;
  std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
};

RawImages parse_cifar_records(std::span<const std::uint8_t> bytes, const std::string& source);
std::vector<std::uint8_t> encode_cifar_records(const RawImages& images);
/// With expected_records set, any other file size is a FormatError.
RawImages read_cifar_file(const std::filesystem::path& path,
                          std::optional<std::int64_t> expected_records = std::nullopt);

struct Normalization {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

/// Per-channel mean and std over all pixels, scaled to [0, 1].
Normalization channel_stats(const RawImages& images);

struct Dataset {
  Tensor<float> images;  // (N, C, H, W), normalized
  std::vector<int> labels;
  std::int64_t num_classes = 10;
  std::string split = "train";
  Normalization normalization;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

Dataset to_dataset(const RawImages& raw, const Normalization& norm, const std::string& split,
                   std::int64_t num_classes = 10);

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// Reads data_batch_1..5.bin and test_batch.bin from `dir` (or its
/// cifar-10-batches-bin subdirectory) and normalizes both splits with the
/// training-split statistics.
DatasetSplits load_cifar10(const std::filesystem::path& dir);

/// First directory holding the CIFAR-10 binaries among `explicit_dir` and
/// $REPFUSE_DATA_DIR (each checked directly and under cifar-10-batches-bin).
std::optional<std::filesystem::path> find_cifar10(
    const std::optional<std::filesystem::path>& explicit_dir);

/// Gaussian-blob images: every class has its own blob position, radius and
/// colour; samples add position jitter and pixel noise. Labels are i % classes.
Dataset synthetic_dataset(std::int64_t n, std::int64_t classes, std::uint64_t seed,
                          std::int64_t image_size = 32, const std::string& split = "train");

/// Random subset of round(fraction * N) samples (at least one).
Dataset subset(const Dataset& data, double fraction, std::uint64_t seed);

/// Copies the listed samples into a (k, C, H, W) batch.
template <typename T>
Tensor<T> gather_images(const Dataset& data, std::span<const std::int64_t> indices);
std::vector<int> gather_labels(const Dataset& data, std::span<const std::int64_t> indices);

/// Mirrors one (C, H, W) sample in place along the width axis.
void hflip(float* sample, std::int64_t channels, std::int64_t h, std::int64_t w);

/// Zero-pads a sample by `pad` and reads back the H x W window whose top-left
/// corner is (dy, dx) in padded coordinates; (pad, pad) is the original.
void crop_padded(const float* src, float* dst, std::int64_t channels, std::int64_t h,
                 std::int64_t w, std::int64_t pad, std::int64_t dy, std::int64_t dx);

/// Standard CIFAR recipe: pad-4 random crop and random horizontal flip, per sample.
void augment(Tensor<float>& batch, std::mt19937_64& rng, std::int64_t pad = 4);

}  // namespace repfuse
