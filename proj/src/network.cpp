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

#include "repfuse/network.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace repfuse {

using nlohmann::json;

std::int64_t NetworkArch::total_branches() const {
  std::int64_t n = 0;
  for (const auto& b : blocks) n += static_cast<std::int64_t>(b.branches.size());
  return n;
}

std::int64_t NetworkArch::protected_branches() const {
  return static_cast<std::int64_t>(blocks.size());
}

std::int64_t NetworkArch::active_branches() const {
  std::int64_t n = 0;
  for (const auto& b : blocks)
    for (int g : b.gates) n += g != 0 ? 1 : 0;
  return n;
}

Gates NetworkArch::gates() const {
  Gates out;
  for (const auto& b : blocks) out.push_back(b.gates);
  return out;
}

void NetworkArch::set_gates(const Gates& gates) {
  if (gates.size() != blocks.size()) throw std::invalid_argument("gate list has wrong block count");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (gates[i].size() != blocks[i].branches.size()) {
      throw std::invalid_argument("gate list has wrong branch count for block " + std::to_string(i));
    }
    blocks[i].gates = gates[i];
  }
}

json NetworkArch::to_json() const {
  json j;
  j["format"] = "repfuse-arch";
  j["version"] = 1;
  j["preset"] = preset;
  j["num_classes"] = num_classes;
  j["in_channels"] = in_channels;
  j["image_size"] = image_size;
  j["blocks"] = json::array();
  for (const auto& b : blocks) {
    json jb;
    jb["c_in"] = b.c_in;
    jb["c_out"] = b.c_out;
    jb["stride"] = b.stride;
    jb["K"] = b.K;
    jb["branches"] = json::array();
    for (BranchKind k : b.branches) jb["branches"].push_back(std::string(branch_kind_name(k)));
    jb["gates"] = b.gates;
    if (!b.alpha.empty()) jb["alpha"] = b.alpha;
    j["blocks"].push_back(std::move(jb));
  }
  return j;
}

NetworkArch NetworkArch::from_json(const json& j) {
  try {
    if (j.contains("format") && j.at("format") != "repfuse-arch") {
      throw FormatError("not an architecture file (format '" + j.at("format").dump() + "')");
    }
    if (j.contains("version") && j.at("version") != 1) {
      throw FormatError("unsupported architecture version " + j.at("version").dump());
    }
    NetworkArch a;
    a.preset = j.value("preset", std::string("custom"));
    a.num_classes = j.value("num_classes", std::int64_t{10});
    a.in_channels = j.value("in_channels", std::int64_t{3});
    a.image_size = j.value("image_size", std::int64_t{32});
    for (const auto& jb : j.at("blocks")) {
      BlockArch b;
      b.c_in = jb.at("c_in").get<std::int64_t>();
      b.c_out = jb.at("c_out").get<std::int64_t>();
      b.stride = jb.at("stride").get<std::int64_t>();
      b.K = jb.value("K", std::int64_t{3});
      for (const auto& name : jb.at("branches")) b.branches.push_back(parse_branch_kind(name.get<std::string>()));
      if (jb.contains("gates")) {
        b.gates = jb.at("gates").get<std::vector<int>>();
      } else {
        b.gates.assign(b.branches.size(), 1);
      }
      if (b.gates.size() != b.branches.size()) {
        throw FormatError("architecture block has " + std::to_string(b.branches.size()) +
                          " branches but " + std::to_string(b.gates.size()) + " gates");
      }
      for (int g : b.gates) {
        if (g != 0 && g != 1) throw FormatError("architecture gates must be 0 or 1");
      }
      if (jb.contains("alpha")) b.alpha = jb.at("alpha").get<std::vector<double>>();
      a.blocks.push_back(std::move(b));
    }
    return a;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed architecture JSON: ") + e.what());
  }
}

std::string NetworkArch::structure_hash() const {
  std::string key = std::to_string(num_classes) + "/" + std::to_string(in_channels);
  for (const auto& b : blocks) {
    key += "|" + std::to_string(b.c_in) + "," + std::to_string(b.c_out) + "," +
           std::to_string(b.stride) + "," + std::to_string(b.K);
    for (BranchKind k : b.branches) key += "," + std::string(branch_kind_name(k));
  }
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void NetworkArch::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
}

NetworkArch NetworkArch::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open architecture file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

NetworkArch make_arch(std::span<const std::int64_t> widths, std::span<const std::int64_t> strides,
                      std::span<const BranchKind> kinds, std::int64_t num_classes,
                      std::int64_t in_channels, std::int64_t image_size, std::int64_t K) {
  if (widths.size() != strides.size() || widths.empty()) {
    throw ConfigError("architecture needs one stride per width and at least one block");
  }
  NetworkArch a;
  a.num_classes = num_classes;
  a.in_channels = in_channels;
  a.image_size = image_size;
  std::int64_t c_in = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    BlockArch b;
    b.c_in = c_in;
    b.c_out = widths[i];
    b.stride = strides[i];
    b.K = K;
    b.branches = effective_branch_kinds(b.c_in, b.c_out, b.stride, kinds);
    b.gates.assign(b.branches.size(), 1);
    a.blocks.push_back(std::move(b));
    c_in = widths[i];
  }
  return a;
}

namespace {

struct StagePreset {
  std::vector<std::int64_t> layers;
  std::vector<std::int64_t> widths;
};

const std::map<std::string, StagePreset>& stage_presets() {
  static const std::map<std::string, StagePreset> presets{
      {"A0", {{1, 2, 4, 14, 1}, {64, 48, 96, 192, 1280}}},
      {"A1", {{1, 2, 4, 14, 1}, {64, 64, 128, 256, 1280}}},
      {"A2", {{1, 2, 4, 14, 1}, {64, 96, 192, 384, 1408}}},
      {"B1", {{1, 4, 6, 16, 1}, {64, 128, 256, 512, 2048}}},
      {"B2", {{1, 4, 6, 16, 1}, {64, 160, 320, 640, 2560}}},
      {"B3", {{1, 4, 6, 16, 1}, {64, 192, 384, 768, 2560}}},
  };
  return presets;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out{"vgg-tiny"};
  for (const auto& [name, _] : stage_presets()) out.push_back(name);
  return out;
}

NetworkArch preset_arch(const std::string& name, std::span<const BranchKind> kinds,
                        std::int64_t num_classes, std::int64_t image_size) {
  std::vector<std::int64_t> widths, strides;
  if (name == "vgg-tiny") {
    widths = {32, 32, 64, 64, 128, 128, 256, 256};
    strides = {1, 1, 2, 1, 2, 1, 2, 1};
  } else {
    auto it = stage_presets().find(name);
    if (it == stage_presets().end()) throw ConfigError("unknown architecture preset '" + name + "'");
    // Each stage opens with a stride-2 block.
    for (std::size_t s = 0; s < it->second.layers.size(); ++s) {
      for (std::int64_t l = 0; l < it->second.layers[s]; ++l) {
        widths.push_back(it->second.widths[s]);
        strides.push_back(l == 0 ? 2 : 1);
      }
    }
  }
  NetworkArch a = make_arch(widths, strides, kinds, num_classes, 3, image_size);
  a.preset = name;
  return a;
}

template <typename T>
Supernet<T>::Supernet(const NetworkArch& arch, std::uint64_t seed) : structure_(arch) {
  if (arch.blocks.empty()) throw ConfigError("supernet needs at least one block");
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
    const BlockArch& b = arch.blocks[i];
    blocks_.push_back(build_block<T>(b.c_in, b.c_out, b.stride, b.K, b.branches, rng,
                                     "block" + std::to_string(i)));
    if (blocks_.back().kinds() != b.branches) {
      throw FormatError("block " + std::to_string(i) +
                        " lists a branch set that is illegal for its geometry");
    }
    if (i > 0 && b.c_in != arch.blocks[i - 1].c_out) {
      throw FormatError("block " + std::to_string(i) + " input width does not chain");
    }
  }
  num_classes_ = arch.num_classes;
  const std::int64_t features = arch.blocks.back().c_out;
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(features)));
  Tensor<T> w(Shape(num_classes_, features));
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  head_weight_ = Parameter<T>("head.weight", w, 2);
  head_bias_ = Parameter<T>("head.bias", Tensor<T>(Shape(num_classes_)), 1);
  for (auto& b : structure_.blocks) {
    b.gates.assign(b.branches.size(), 1);
    b.alpha.clear();
  }
}

template <typename T>
Var<T> Supernet<T>::forward(const Var<T>& x, std::span<const std::vector<BranchGate>> gates,
                            Mode mode, Tape<T>* tape) {
  if (gates.size() != blocks_.size()) {
    throw std::invalid_argument("supernet forward: expected gates for " +
                                std::to_string(blocks_.size()) + " blocks");
  }
  Var<T> h = x;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = block_forward<T>(blocks_[i], h, gates[i], mode, tape);
  }
  h = ad::global_avg_pool(h);
  return ad::linear(h, ad::param(tape, head_weight_), ad::param(tape, head_bias_));
}

template <typename T>
Var<T> Supernet<T>::forward(const Var<T>& x, const Gates& gates, Mode mode, Tape<T>* tape) {
  std::vector<std::vector<BranchGate>> g;
  for (const auto& row : gates) g.push_back(constant_gates(row));
  return forward(x, g, mode, tape);
}

template <typename T>
Tensor<T> Supernet<T>::predict(const Tensor<T>& x, const Gates& gates) {
  return forward(ad::constant(x), gates, Mode::Eval, nullptr).value;
}

template <typename T>
std::vector<Parameter<T>*> Supernet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& b : blocks_) {
    auto p = b.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

template <typename T>
std::vector<BatchNorm<T>*> Supernet<T>::batch_norms() {
  std::vector<BatchNorm<T>*> out;
  for (auto& b : blocks_) {
    auto p = b.batch_norms();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
void Supernet<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
NetworkArch Supernet<T>::arch(const Gates& gates) const {
  NetworkArch a = structure_;
  a.set_gates(gates);
  return a;
}

namespace {

template <typename T>
void put_bn(Checkpoint& ckpt, const std::string& prefix, const BatchNorm<T>& bn) {
  ckpt.put(bn.gamma.name, bn.gamma.value, 1);
  ckpt.put(bn.beta.name, bn.beta.value, 1);
  ckpt.put(prefix + ".running_mean", bn.running_mean, 1);
  ckpt.put(prefix + ".running_var", bn.running_var, 1);
}

template <typename T>
void get_bn(const Checkpoint& ckpt, const std::string& prefix, BatchNorm<T>& bn) {
  const Shape s(bn.channels());
  bn.gamma.value = ckpt.get<T>(bn.gamma.name, s);
  bn.beta.value = ckpt.get<T>(bn.beta.name, s);
  bn.running_mean = ckpt.get<T>(prefix + ".running_mean", s);
  bn.running_var = ckpt.get<T>(prefix + ".running_var", s);
}

}  // namespace

template <typename T>
void Supernet<T>::save_to(Checkpoint& ckpt) const {
  for (const auto& b : blocks_) {
    ckpt.put(b.main_kernel.name, b.main_kernel.value, 4);
    for (const auto& br : b.branches) {
      const std::string prefix = b.name + "." + std::string(branch_kind_name(br.kind));
      if (br.pre_kernel) ckpt.put(br.pre_kernel->name, br.pre_kernel->value, 4);
      if (br.pre_bn) put_bn(ckpt, prefix + ".pre_bn", *br.pre_bn);
      put_bn(ckpt, prefix + ".bn", br.bn);
    }
  }
  ckpt.put(head_weight_.name, head_weight_.value, 2);
  ckpt.put(head_bias_.name, head_bias_.value, 1);
}

template <typename T>
void Supernet<T>::load_from(const Checkpoint& ckpt) {
  for (auto& b : blocks_) {
    b.main_kernel.value = ckpt.get<T>(b.main_kernel.name, b.main_kernel.value.shape());
    for (auto& br : b.branches) {
      const std::string prefix = b.name + "." + std::string(branch_kind_name(br.kind));
      if (br.pre_kernel) {
        br.pre_kernel->value = ckpt.get<T>(br.pre_kernel->name, br.pre_kernel->value.shape());
      }
      if (br.pre_bn) get_bn(ckpt, prefix + ".pre_bn", *br.pre_bn);
      get_bn(ckpt, prefix + ".bn", br.bn);
    }
  }
  head_weight_.value = ckpt.get<T>(head_weight_.name, head_weight_.value.shape());
  head_bias_.value = ckpt.get<T>(head_bias_.name, head_bias_.value.shape());
}

template <typename T>
Tensor<T> FusedNetwork<T>::forward(const Tensor<T>& x) const {
  Var<T> h = ad::constant(x);
  for (const auto& layer : layers) {
    Var<T> b(layer.bias);
    h = ad::relu(ad::conv2d(h, ad::constant(layer.kernel), &b, layer.stride, layer.padding,
                            layer.padding));
  }
  h = ad::global_avg_pool(h);
  return ad::linear(h, ad::constant(head_weight), ad::constant(head_bias)).value;
}

template <typename T>
std::int64_t FusedNetwork<T>::conv_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& l : layers) n += l.kernel.numel() + l.bias.numel();
  return n;
}

template <typename T>
Checkpoint FusedNetwork<T>::to_checkpoint() const {
  Checkpoint ckpt;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ckpt.put("layer" + std::to_string(i) + ".kernel", layers[i].kernel, 4);
    ckpt.put("layer" + std::to_string(i) + ".bias", layers[i].bias, 1);
  }
  ckpt.put("head.weight", head_weight, 2);
  ckpt.put("head.bias", head_bias, 1);
  return ckpt;
}

template <typename T>
json FusedNetwork<T>::sidecar() const {
  json j;
  j["format"] = "repfuse-fused";
  j["version"] = 1;
  j["source_arch_hash"] = source_arch_hash;
  j["source_arch"] = source_arch.to_json();
  j["num_classes"] = head_bias.numel();
  j["conv_parameter_count"] = conv_parameter_count();
  j["layers"] = json::array();
  for (const auto& l : layers) {
    json jl;
    jl["c_out"] = l.kernel.shape().n();
    jl["c_in"] = l.kernel.shape().c();
    jl["K"] = l.kernel.shape().h();
    jl["stride"] = l.stride;
    jl["padding"] = l.padding;
    jl["provenance"] = json::array();
    for (BranchKind k : l.provenance) jl["provenance"].push_back(std::string(branch_kind_name(k)));
    j["layers"].push_back(std::move(jl));
  }
  return j;
}

template <typename T>
FusedNetwork<T> FusedNetwork<T>::from_files(const Checkpoint& ckpt, const json& sidecar) {
  try {
    if (sidecar.value("format", std::string()) != "repfuse-fused") {
      throw FormatError("sidecar is not a fused-network description");
    }
    FusedNetwork<T> net;
    net.source_arch_hash = sidecar.at("source_arch_hash").get<std::string>();
    net.source_arch = NetworkArch::from_json(sidecar.at("source_arch"));
    const auto& jl = sidecar.at("layers");
    for (std::size_t i = 0; i < jl.size(); ++i) {
      FusedConv<T> l;
      const auto c_out = jl[i].at("c_out").get<std::int64_t>();
      const auto c_in = jl[i].at("c_in").get<std::int64_t>();
      const auto K = jl[i].at("K").get<std::int64_t>();
      l.stride = jl[i].at("stride").get<std::int64_t>();
      l.padding = jl[i].at("padding").get<std::int64_t>();
      for (const auto& p : jl[i].at("provenance")) l.provenance.push_back(parse_branch_kind(p.get<std::string>()));
      l.kernel = ckpt.get<T>("layer" + std::to_string(i) + ".kernel", Shape(c_out, c_in, K, K));
      l.bias = ckpt.get<T>("layer" + std::to_string(i) + ".bias", Shape(c_out));
      net.layers.push_back(std::move(l));
    }
    if (net.layers.empty()) throw FormatError("fused network has no layers");
    const auto classes = sidecar.at("num_classes").get<std::int64_t>();
    const std::int64_t features = net.layers.back().kernel.shape().n();
    net.head_weight = ckpt.get<T>("head.weight", Shape(classes, features));
    net.head_bias = ckpt.get<T>("head.bias", Shape(classes));
    return net;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed fused sidecar: ") + e.what());
  }
}

template <typename T>
FusedNetwork<T> fuse_network(const Supernet<T>& net, const Gates& gates) {
  if (gates.size() != net.blocks().size()) {
    throw std::invalid_argument("fuse_network: gate list has wrong block count");
  }
  FusedNetwork<T> out;
  for (std::size_t i = 0; i < gates.size(); ++i) {
    out.layers.push_back(fuse_block(net.blocks()[i], gates[i]));
  }
  out.head_weight = net.head_weight().value.clone();
  out.head_bias = net.head_bias().value.clone();
  out.source_arch = net.arch(gates);
  out.source_arch_hash = out.source_arch.structure_hash();
  return out;
}

json EquivalenceReport::to_json() const {
  return json{{"max_abs_diff", max_abs_diff}, {"trials", trials}, {"tol", tol}, {"pass", pass}};
}

template <typename T>
EquivalenceReport verify_equivalence(Supernet<T>& net, const Gates& gates,
                                     const FusedNetwork<T>& fused, int n_trials, double tol,
                                     std::uint64_t seed, std::int64_t batch) {
  const NetworkArch& a = fused.source_arch;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  EquivalenceReport report;
  report.trials = n_trials;
  report.tol = tol;
  for (int t = 0; t < n_trials; ++t) {
    Tensor<T> x(Shape(batch, a.in_channels, a.image_size, a.image_size));
    for (auto& v : x.data()) v = static_cast<T>(dist(rng));
    const Tensor<T> ref = net.predict(x, gates);
    const Tensor<T> got = fused.forward(x);
    report.max_abs_diff = std::max(report.max_abs_diff, static_cast<double>(max_abs_diff(ref, got)));
  }
  report.pass = report.max_abs_diff <= tol;
  return report;
}

template class Supernet<float>;
template class Supernet<double>;
template struct FusedNetwork<float>;
template struct FusedNetwork<double>;
template FusedNetwork<float> fuse_network<float>(const Supernet<float>&, const Gates&);
template FusedNetwork<double> fuse_network<double>(const Supernet<double>&, const Gates&);
template EquivalenceReport verify_equivalence<float>(Supernet<float>&, const Gates&,
                                                     const FusedNetwork<float>&, int, double,
                                                     std::uint64_t, std::int64_t);
template EquivalenceReport verify_equivalence<double>(Supernet<double>&, const Gates&,
                                                      const FusedNetwork<double>&, int, double,
                                                      std::uint64_t, std::int64_t);

}  // namespace repfuse
