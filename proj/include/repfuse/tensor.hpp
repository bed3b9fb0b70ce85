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

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace repfuse {

// Shape or axis mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents (checkpoint, dataset, JSON description).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or infinity where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent user configuration (budget, presets, CLI arguments).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Four extents in NCHW order. Vectors and matrices use trailing 1s.
struct Shape {
  std::array<std::int64_t, 4> dims{0, 0, 0, 0};

  Shape() = default;
  Shape(std::int64_t n, std::int64_t c = 1, std::int64_t h = 1, std::int64_t w = 1)
      : dims{n, c, h, w} {}

  std::int64_t n() const { return dims[0]; }
  std::int64_t c() const { return dims[1]; }
  std::int64_t h() const { return dims[2]; }
  std::int64_t w() const { return dims[3]; }
  std::int64_t operator[](std::size_t i) const { return dims[i]; }

  std::int64_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }
  bool operator==(const Shape&) const = default;
  std::string to_string() const;
};

/// Dense row-major NCHW array with shared storage.
///
/// Copies are shallow: two Tensor values may view the same buffer. Operators
/// always allocate fresh outputs, so a tensor handed to an op is never written
/// by it. Use clone() for an independent deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}
  explicit Tensor(const Shape& shape, T fill = T(0))
      : shape_(shape), data_(std::make_shared<std::vector<T>>(checked_numel(shape), fill)) {}
  Tensor(const Shape& shape, std::vector<T> values)
      : shape_(shape), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (static_cast<std::int64_t>(data_->size()) != checked_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                           " does not match shape " + shape.to_string());
    }
  }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_->empty(); }

  std::span<T> data() { return {data_->data(), data_->size()}; }
  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  T* ptr() { return data_->data(); }
  const T* ptr() const { return data_->data(); }

  T& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return (*data_)[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return (*data_)[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  Tensor clone() const { return Tensor(shape_, *data_); }

  /// Same storage, new extents with equal element count.
  Tensor reshape(const Shape& shape) const {
    if (shape.numel() != shape_.numel()) {
      throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    }
    Tensor out = *this;
    out.shape_ = shape;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(data_->size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(values));
  }

  bool shares_storage_with(const Tensor& other) const { return data_ == other.data_; }

  void fill(T value) { std::fill(data_->begin(), data_->end(), value); }

 private:
  static std::int64_t checked_numel(const Shape& s) {
    for (auto d : s.dims) {
      if (d < 0) throw DimensionError("negative extent in shape " + s.to_string());
    }
    return s.numel();
  }
  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

/// Throws DimensionError naming `what` when the two shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    T d = a[i] - b[i];
    if (d < 0) d = -d;
    if (d > m) m = d;
  }
  return m;
}

}  // namespace repfuse
