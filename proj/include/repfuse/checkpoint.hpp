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

// Flat binary parameter container.
//
//   magic   "RPFZ1"                      5 bytes
//   version u32 little-endian            (currently 1)
//   records until end of file:
//     name_len u32, name (UTF-8, name_len bytes)
//     dtype    u8    0 = f32, 1 = f64
//     rank     u32
//     extents  u64 x rank
//     values   little-endian IEEE-754, product(extents) elements

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "repfuse/tensor.hpp"

namespace repfuse {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const { return values.index() == 0 ? DType::F32 : DType::F64; }
  std::uint64_t numel() const;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  /// Stores the first `rank` extents of t's shape.
  template <typename T>
  void put(const std::string& name, const Tensor<T>& t, int rank);

  /// Reads a record into a tensor of the requested precision. Throws
  /// FormatError when the record is missing or has a different element count.
  template <typename T>
  Tensor<T> get(const std::string& name, const Shape& shape) const;

  bool contains(const std::string& name) const;
  const CheckpointRecord& record(const std::string& name) const;
  const std::vector<CheckpointRecord>& records() const { return records_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointRecord> records_;
};

}  // namespace repfuse
