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

#include <random>

#include <benchmark/benchmark.h>

#include "repfuse/kernels.hpp"
#include "repfuse/network.hpp"
#include "repfuse/reference.hpp"

using namespace repfuse;

namespace {

Tensor<float> random_tensor(const Shape& s, std::uint64_t seed) {
  Tensor<float> t(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Args: batch, channels, spatial size.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({8, 16, 32})->Args({32, 32, 16})->Args({32, 64, 8});
}

void BM_ConvReference(benchmark::State& state) {
  const auto n = state.range(0), c = state.range(1), s = state.range(2);
  const Tensor<float> x = random_tensor(Shape(n, c, s, s), 1);
  const Tensor<float> w = random_tensor(Shape(c, c, 3, 3), 2);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d(x, w, Tensor<float>(), 1, 1, 1));
}
BENCHMARK(BM_ConvReference)->Apply(conv_args)->Unit(benchmark::kMillisecond);

void BM_ConvIm2col(benchmark::State& state) {
  const auto n = state.range(0), c = state.range(1), s = state.range(2);
  const int threads = static_cast<int>(state.range(3));
  const Tensor<float> x = random_tensor(Shape(n, c, s, s), 1);
  const Tensor<float> w = random_tensor(Shape(c, c, 3, 3), 2);
  kernels::ConvGeometry g{n, c, s, s, c, 3, 3, 1, 1, 1};
  Tensor<float> y(Shape(n, c, s, s));
  const int saved = kernels::max_threads();
  // 0 means every available worker.
  kernels::set_num_threads(threads > 0 ? threads : saved);
  for (auto _ : state) {
    kernels::conv2d_forward(g, x.ptr(), w.ptr(), static_cast<const float*>(nullptr), y.ptr());
    benchmark::ClobberMemory();
  }
  kernels::set_num_threads(saved);
}
BENCHMARK(BM_ConvIm2col)
    ->ArgsProduct({{8, 32}, {16, 64}, {16}, {1, 0}})
    ->Unit(benchmark::kMillisecond);

// Range 0: 1 = fused, 0 = all-branch supernet. Single thread.
void BM_VggTinyForward(benchmark::State& state) {
  const bool fused_mode = state.range(0) == 1;
  std::vector<BranchKind> kinds(kAllBranchKinds.begin(), kAllBranchKinds.end());
  const NetworkArch arch = preset_arch("vgg-tiny", kinds, 10);
  Supernet<float> net(arch, 0);
  const Gates gates = arch.gates();
  const FusedNetwork<float> fused = fuse_network(net, gates);
  const Tensor<float> x = random_tensor(Shape(32, 3, 32, 32), 3);
  const int saved = kernels::max_threads();
  kernels::set_num_threads(1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fused_mode ? fused.forward(x) : net.predict(x, gates));
  }
  kernels::set_num_threads(saved);
}
BENCHMARK(BM_VggTinyForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
