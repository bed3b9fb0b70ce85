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

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repfuse/checkpoint.hpp"
#include "repfuse/fusion.hpp"
#include "repfuse/rep_block.hpp"

namespace repfuse {

using Gates = std::vector<std::vector<int>>;

struct BlockArch {
  std::int64_t c_in = 0;
  std::int64_t c_out = 0;
  std::int64_t stride = 1;
  std::int64_t K = 3;
  std::vector<BranchKind> branches;
  std::vector<int> gates;      // same length as branches
  std::vector<double> alpha;   // optional, recorded after a search
};

/// Block/network description shared by search, fusion and evaluation.
///
///   {"format": "repfuse-arch", "version": 1, "preset": ..., "num_classes": 10,
///    "in_channels": 3, "image_size": 32,
///    "blocks": [{"c_in", "c_out", "stride", "K", "branches": [...],
///                "gates": [0|1 ...], "alpha": [...]}]}
struct NetworkArch {
  std::string preset = "custom";
  std::int64_t num_classes = 10;
  std::int64_t in_channels = 3;
  std::int64_t image_size = 32;
  std::vector<BlockArch> blocks;

  std::int64_t total_branches() const;
  std::int64_t protected_branches() const;
  std::int64_t active_branches() const;
  Gates gates() const;
  void set_gates(const Gates& gates);

  nlohmann::json to_json() const;
  static NetworkArch from_json(const nlohmann::json& j);
  /// FNV-1a over the structural fields (gates and alpha excluded).
  std::string structure_hash() const;

  void save(const std::filesystem::path& path) const;
  static NetworkArch load(const std::filesystem::path& path);
};

/// Plain stack of blocks with the given widths and strides. Every block gets
/// `kinds` (skip dropped where illegal) and all gates on.
NetworkArch make_arch(std::span<const std::int64_t> widths, std::span<const std::int64_t> strides,
                      std::span<const BranchKind> kinds, std::int64_t num_classes,
                      std::int64_t in_channels = 3, std::int64_t image_size = 32,
                      std::int64_t K = 3);

/// Named presets: "vgg-tiny" and the RepVGG-shaped "A0".."B3".
NetworkArch preset_arch(const std::string& name, std::span<const BranchKind> kinds,
                        std::int64_t num_classes, std::int64_t image_size = 32);
std::vector<std::string> preset_names();

/// Stack of RepBlocks followed by global average pooling and a linear head.
template <typename T>
class Supernet {
 public:
  Supernet(const NetworkArch& arch, std::uint64_t seed);

  std::vector<RepBlock<T>>& blocks() { return blocks_; }
  const std::vector<RepBlock<T>>& blocks() const { return blocks_; }
  Parameter<T>& head_weight() { return head_weight_; }
  Parameter<T>& head_bias() { return head_bias_; }
  const Parameter<T>& head_weight() const { return head_weight_; }
  const Parameter<T>& head_bias() const { return head_bias_; }
  std::int64_t num_classes() const { return num_classes_; }
  /// Structure with all gates on.
  const NetworkArch& structure() const { return structure_; }

  /// Logits (N, classes, 1, 1). gates[i] has one entry per branch of block i.
  Var<T> forward(const Var<T>& x, std::span<const std::vector<BranchGate>> gates, Mode mode,
                 Tape<T>* tape);
  Var<T> forward(const Var<T>& x, const Gates& gates, Mode mode, Tape<T>* tape);

  /// Eval-mode logits without a tape.
  Tensor<T> predict(const Tensor<T>& x, const Gates& gates);

  std::vector<Parameter<T>*> parameters();
  std::vector<BatchNorm<T>*> batch_norms();
  void zero_grad();

  /// Architecture with the supernet's structure and the given gates.
  NetworkArch arch(const Gates& gates) const;

  void save_to(Checkpoint& ckpt) const;
  void load_from(const Checkpoint& ckpt);

 private:
  NetworkArch structure_;
  std::vector<RepBlock<T>> blocks_;
  Parameter<T> head_weight_;
  Parameter<T> head_bias_;
  std::int64_t num_classes_ = 0;
};

/// Single-path network produced by fusion: conv + relu per block, then the head.
template <typename T>
struct FusedNetwork {
  std::vector<FusedConv<T>> layers;
  Tensor<T> head_weight;
  Tensor<T> head_bias;
  std::string source_arch_hash;
  NetworkArch source_arch;

  Tensor<T> forward(const Tensor<T>& x) const;
  /// Sum over layers of C_out*C_in*K^2 + C_out (convolutions only).
  std::int64_t conv_parameter_count() const;

  Checkpoint to_checkpoint() const;
  nlohmann::json sidecar() const;
  static FusedNetwork from_files(const Checkpoint& ckpt, const nlohmann::json& sidecar);
};

template <typename T>
FusedNetwork<T> fuse_network(const Supernet<T>& net, const Gates& gates);

struct EquivalenceReport {
  double max_abs_diff = 0;
  int trials = 0;
  double tol = 0;
  bool pass = false;

  nlohmann::json to_json() const;
};

/// Runs both models on n_trials N(0,1) input batches and compares logits.
template <typename T>
EquivalenceReport verify_equivalence(Supernet<T>& net, const Gates& gates,
                                     const FusedNetwork<T>& fused, int n_trials, double tol,
                                     std::uint64_t seed, std::int64_t batch = 2);

}  // namespace repfuse
