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

#include "repfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace repfuse {

namespace {

constexpr char kMagic[5] = {'R', 'P', 'F', 'Z', '1'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFFu));
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename U>
  U read_le(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string read_string(std::size_t n) {
    need(n, "record name");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + ": need " +
                        std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                        ", have " + std::to_string(bytes_.size() - pos_));
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t CheckpointRecord::numel() const {
  std::uint64_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t, int rank) {
  CheckpointRecord rec;
  rec.name = name;
  for (int i = 0; i < rank; ++i) rec.extents.push_back(static_cast<std::uint64_t>(t.shape()[static_cast<std::size_t>(i)]));
  if (rank == 0) rec.extents.clear();
  rec.values = std::vector<T>(t.data().begin(), t.data().end());
  for (auto& r : records_) {
    if (r.name == name) {
      r = std::move(rec);
      return;
    }
  }
  records_.push_back(std::move(rec));
}

template <typename T>
Tensor<T> Checkpoint::get(const std::string& name, const Shape& shape) const {
  const CheckpointRecord& rec = record(name);
  if (rec.numel() != static_cast<std::uint64_t>(shape.numel())) {
    throw FormatError("checkpoint record '" + name + "' has " + std::to_string(rec.numel()) +
                      " elements, expected " + std::to_string(shape.numel()) + " for shape " +
                      shape.to_string());
  }
  return std::visit(
      [&](const auto& values) {
        std::vector<T> out(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
        return Tensor<T>(shape, std::move(out));
      },
      rec.values);
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return true;
  }
  return false;
}

const CheckpointRecord& Checkpoint::record(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return r;
  }
  throw FormatError("checkpoint has no record named '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  for (const auto& rec : records_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.name.size()));
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    out.push_back(static_cast<std::uint8_t>(rec.dtype()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.extents.size()));
    for (auto e : rec.extents) put_le<std::uint64_t>(out, e);
    if (const auto* f = std::get_if<std::vector<float>>(&rec.values)) {
      for (float v : *f) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    } else {
      for (double v : std::get<std::vector<double>>(rec.values)) {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file: bad magic");
  }
  Reader in(bytes.subspan(sizeof(kMagic)));
  const auto version = in.read_le<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  while (!in.done()) {
    CheckpointRecord rec;
    const auto name_len = in.read_le<std::uint32_t>("name length");
    rec.name = in.read_string(name_len);
    const auto dtype = in.read_le<std::uint8_t>("dtype");
    const auto rank = in.read_le<std::uint32_t>("rank");
    for (std::uint32_t i = 0; i < rank; ++i) rec.extents.push_back(in.read_le<std::uint64_t>("extent"));
    const std::uint64_t n = rec.numel();
    if (dtype == static_cast<std::uint8_t>(DType::F32)) {
      in.need(n * 4, "values");
      std::vector<float> v(n);
      for (auto& x : v) x = std::bit_cast<float>(in.read_le<std::uint32_t>("values"));
      rec.values = std::move(v);
    } else if (dtype == static_cast<std::uint8_t>(DType::F64)) {
      in.need(n * 8, "values");
      std::vector<double> v(n);
      for (auto& x : v) x = std::bit_cast<double>(in.read_le<std::uint64_t>("values"));
      rec.values = std::move(v);
    } else {
      throw FormatError("unknown dtype tag " + std::to_string(dtype) + " in record '" + rec.name + "'");
    }
    ckpt.records_.push_back(std::move(rec));
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&, int);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&, int);
template Tensor<float> Checkpoint::get<float>(const std::string&, const Shape&) const;
template Tensor<double> Checkpoint::get<double>(const std::string&, const Shape&) const;

}  // namespace repfuse
