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
#include <numbers>
#include <numeric>

#include "repfuse/autodiff.hpp"
#include "repfuse/data.hpp"
#include "repfuse/network.hpp"
#include "repfuse/search.hpp"
#include "test_util.hpp"

using namespace repfuse;
using namespace repfuse::testing;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

NetworkArch tiny_arch() {
  const std::vector<std::int64_t> widths{6, 6}, strides{1, 2};
  return make_arch(widths, strides, all_kinds(), 4, 3, 8);
}

struct Batch {
  Tensor<float> x;
  std::vector<int> y;
};

Batch synthetic_batch(std::int64_t n, std::uint64_t seed) {
  const Dataset d = synthetic_dataset(n, 4, seed, 8);
  return {d.images.clone(), d.labels};
}

/// Logits of a one-block network where branch k is scaled by `gate_k` and the
/// other branches are on.
Var<double> one_block_logits(Supernet<double>& net, const Tensor<double>& x, int k, const Var<double>& gate_k,
                             Tape<double>* tape) {
  RepBlock<double>& block = net.blocks()[0];
  Var<double> main = ad::param(tape, block.main_kernel);
  std::vector<Var<double>> parts;
  for (int j = 0; j < static_cast<int>(block.branches.size()); ++j) {
    Var<double> o = branch_forward(block, j, ad::constant(x), main, Mode::Eval, tape);
    parts.push_back(j == k ? ad::scale(o, gate_k) : o);
  }
  Var<double> h = ad::global_avg_pool(ad::relu(ad::add_n<double>(parts)));
  return ad::linear(h, ad::param(tape, net.head_weight()), ad::param(tape, net.head_bias()));
}

}  // namespace

TEST_CASE("logistic noise examples") {
  CHECK(logistic_from_uniform(0.5) == 0.0);
  CHECK(std::isfinite(logistic_from_uniform(0.0)));
  CHECK(std::isfinite(logistic_from_uniform(1.0)));
  CHECK(logistic_from_uniform(0.0) == doctest::Approx(std::log(1e-12)).epsilon(1e-6));

  std::mt19937_64 rng(61);
  const int n = 100000;
  double sum = 0, sq = 0;
  int below = 0;
  for (int i = 0; i < n; ++i) {
    const double z = sample_logistic_noise(rng);
    sum += z;
    sq += z * z;
    below += z < 0 ? 1 : 0;
  }
  const double mean = sum / n;
  CHECK(std::abs(static_cast<double>(below) / n - 0.5) <= 0.01);
  CHECK(std::abs(sq / n - mean * mean - std::numbers::pi * std::numbers::pi / 3) <= 0.1);
}

TEST_CASE("importance examples") {
  CHECK(compute_importance(0, 0, 1) == 0.5);
  CHECK(compute_importance(0.2, 0.1, 1e-3) == doctest::Approx(1.0));
  CHECK(compute_importance(0.2, 0.1, 1e-3) > 0.999);
  CHECK(compute_importance(-0.2, -0.1, 1e-3) < 0.001);
  double prev = 0;
  for (double a = -5; a <= 5; a += 0.5) {
    const double z = compute_importance(a, 0.3, 1.0);
    CHECK(z > prev);
    CHECK(z < 1.0);
    prev = z;
  }
}

TEST_CASE("keep frequency under the hard threshold equals sigmoid(alpha)") {
  std::mt19937_64 rng(62);
  for (double alpha : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    int kept = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) kept += compute_importance(alpha, sample_logistic_noise(rng), 1.0) > 0.5 ? 1 : 0;
    CAPTURE(alpha);
    CHECK(std::abs(static_cast<double>(kept) / n - sigmoid(alpha)) <= 0.01);
  }
}

TEST_CASE("rank_and_select examples") {
  const std::vector<double> R{0.9, 0.5, -0.2, -0.7};
  const std::vector<std::uint8_t> none(4, 0);
  CHECK(rank_and_select(R, 2, none) == std::vector<int>{1, 1, 0, 0});
  CHECK(rank_and_select(R, 4, none) == std::vector<int>{1, 1, 1, 1});
  CHECK(rank_and_select(R, 9, none) == std::vector<int>{1, 1, 1, 1});

  const std::vector<std::uint8_t> prot{0, 0, 0, 1};
  CHECK(rank_and_select(R, 2, prot) == std::vector<int>{1, 0, 0, 1});
  CHECK(rank_and_select(R, 1, prot) == std::vector<int>{0, 0, 0, 1});
  CHECK_THROWS_AS(rank_and_select(R, 0, prot), ConfigError);

  const std::vector<double> tied{0.1, 0.3, 0.3, 0.3};
  CHECK(rank_and_select(tied, 2, none) == std::vector<int>{0, 1, 1, 0});
}

TEST_CASE("rank_and_select keeps exactly min(C, total) over 1000 random draws") {
  std::mt19937_64 rng(63);
  std::uniform_int_distribution<int> size_d(1, 40);
  std::normal_distribution<double> r_d(0, 2);
  for (int t = 0; t < 1000; ++t) {
    const int n = size_d(rng);
    std::vector<double> R(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> prot(static_cast<std::size_t>(n));
    std::int64_t n_prot = 0;
    for (int i = 0; i < n; ++i) {
      R[static_cast<std::size_t>(i)] = r_d(rng);
      prot[static_cast<std::size_t>(i)] = (i % 7 == 1) ? 1 : 0;
      n_prot += prot[static_cast<std::size_t>(i)];
    }
    const std::int64_t C = std::uniform_int_distribution<std::int64_t>(n_prot, n + 3)(rng);
    const auto z = rank_and_select(R, C, prot);
    CHECK(std::accumulate(z.begin(), z.end(), std::int64_t{0}) == std::min<std::int64_t>(C, n));
    for (int i = 0; i < n; ++i)
      if (prot[static_cast<std::size_t>(i)]) CHECK(z[static_cast<std::size_t>(i)] == 1);
    // Every kept free entry outranks every dropped one.
    double min_kept = INFINITY, max_dropped = -INFINITY;
    for (int i = 0; i < n; ++i) {
      if (prot[static_cast<std::size_t>(i)]) continue;
      if (z[static_cast<std::size_t>(i)]) min_kept = std::min(min_kept, R[static_cast<std::size_t>(i)]);
      else max_dropped = std::max(max_dropped, R[static_cast<std::size_t>(i)]);
    }
    CHECK(min_kept >= max_dropped);
  }
}

TEST_CASE("raising one alpha never moves its branch from kept to pruned") {
  std::mt19937_64 rng(64);
  std::normal_distribution<double> d(0, 1);
  std::uniform_real_distribution<double> bump(0, 3);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> alpha(12), zeta(12), R(12);
    for (int i = 0; i < 12; ++i) {
      alpha[static_cast<std::size_t>(i)] = d(rng);
      zeta[static_cast<std::size_t>(i)] = sample_logistic_noise(rng);
    }
    const std::vector<std::uint8_t> prot{1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0};
    const int k = std::uniform_int_distribution<int>(0, 11)(rng);
    const std::int64_t C = std::uniform_int_distribution<std::int64_t>(2, 12)(rng);
    for (int i = 0; i < 12; ++i) R[static_cast<std::size_t>(i)] = alpha[static_cast<std::size_t>(i)] + zeta[static_cast<std::size_t>(i)];
    const int before = rank_and_select(R, C, prot)[static_cast<std::size_t>(k)];
    R[static_cast<std::size_t>(k)] += bump(rng);
    const int after = rank_and_select(R, C, prot)[static_cast<std::size_t>(k)];
    CHECK(after >= before);
  }
}

TEST_CASE("keep frequency is monotone in alpha") {
  std::mt19937_64 rng(65);
  std::vector<double> alpha(20);
  for (int i = 0; i < 20; ++i) alpha[static_cast<std::size_t>(i)] = -2.0 + 4.0 * ((i * 7) % 20) / 19.0;
  const std::vector<std::uint8_t> none(20, 0);
  std::vector<double> freq(20, 0.0), R(20);
  for (int t = 0; t < 10000; ++t) {
    for (int i = 0; i < 20; ++i) R[static_cast<std::size_t>(i)] = alpha[static_cast<std::size_t>(i)] + sample_logistic_noise(rng);
    const auto z = rank_and_select(R, 10, none);
    for (int i = 0; i < 20; ++i) freq[static_cast<std::size_t>(i)] += z[static_cast<std::size_t>(i)];
  }
  CHECK(spearman(alpha, freq) > 0.95);
}

TEST_CASE("straight-through gate examples") {
  Tensor<double> o(Shape(1, 1, 1, 3), std::vector<double>{1.0, 2.0, 3.0});
  Tensor<double> up(Shape(1, 1, 1, 3), 1.0);
  Parameter<double> src("o", o.clone(), 4);
  {
    double g = 0;
    Tape<double> tape;
    tape.backward(ad::weighted_sum(ad::straight_through_gate(ad::param(&tape, src), 1.0, 0.5, 1.0, &g), up));
    CHECK(g == 1.5);
    CHECK(src.grad[2] == 1.0);
  }
  {
    double g = 0;
    src.zero_grad();
    Tape<double> tape;
    tape.backward(ad::weighted_sum(ad::straight_through_gate(ad::param(&tape, src), 1.0, 0.5, 1.0, &g),
                                   Tensor<double>(up.shape(), 0.0)));
    CHECK(g == 0.0);
  }
  {
    double g = 0;
    src.zero_grad();
    Tape<double> tape;
    Var<double> y = ad::straight_through_gate(ad::param(&tape, src), 1.0, 0.3, 2.0, &g);
    CHECK(max_abs_diff(y.value, o) == 0.0);
    tape.backward(ad::weighted_sum(y, up));
    CHECK(g == doctest::Approx(6 * 0.3 * 0.7 / 2.0).epsilon(1e-14));
  }
}

TEST_CASE("soft-mode alpha gradient matches the sigmoid derivative and finite differences") {
  std::mt19937_64 rng(66);
  const NetworkArch arch = make_arch(std::vector<std::int64_t>{4}, std::vector<std::int64_t>{1}, all_kinds(), 3, 4, 6);
  Supernet<double> net(arch, 1);
  randomize_block(net.blocks()[0], rng);
  const Tensor<double> x = random_tensor<double>(Shape(2, 4, 6, 6), rng);
  const std::vector<int> labels{0, 2};
  double worst_formula = 0, worst_fd = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int k = trial % 7 == 1 ? 0 : trial % 7;
    const double zeta = sample_logistic_noise(rng), lambda = trial % 2 ? 1.0 : 0.7;
    Parameter<double> alpha("alpha", Tensor<double>(Shape(1), std::normal_distribution<double>(0, 1)(rng)), 1);

    // Gradient through the tape's sigmoid node.
    Tape<double> tape;
    Var<double> gate = ad::logistic_gate(ad::param(&tape, alpha), zeta, lambda);
    tape.backward(ad::softmax_cross_entropy(one_block_logits(net, x, k, gate, &tape), labels));
    const double tape_grad = alpha.grad[0];

    // Straight-through formula with the soft value in forward.
    const double zs = compute_importance(alpha.value[0], zeta, lambda);
    double ste = 0;
    {
      Tape<double> t2;
      RepBlock<double>& block = net.blocks()[0];
      Var<double> main = ad::param(&t2, block.main_kernel);
      std::vector<Var<double>> parts;
      for (int j = 0; j < 7; ++j) {
        Var<double> o = branch_forward(block, j, ad::constant(x), main, Mode::Eval, &t2);
        parts.push_back(j == k ? ad::straight_through_gate(o, zs, zs, lambda, &ste) : o);
      }
      Var<double> h = ad::global_avg_pool(ad::relu(ad::add_n<double>(parts)));
      t2.backward(ad::softmax_cross_entropy(
          ad::linear(h, ad::param(&t2, net.head_weight()), ad::param(&t2, net.head_bias())), labels));
    }
    worst_formula = std::max(worst_formula, rel_error(ste, tape_grad));

    const double hstep = 1e-5;
    auto loss_at = [&](double a) {
      Var<double> g = ad::constant(Tensor<double>(Shape(1), compute_importance(a, zeta, lambda)));
      return ad::softmax_cross_entropy(one_block_logits(net, x, k, g, nullptr), labels).value[0];
    };
    const double fd = (loss_at(alpha.value[0] + hstep) - loss_at(alpha.value[0] - hstep)) / (2 * hstep);
    worst_fd = std::max(worst_fd, rel_error(ste, fd));
  }
  CHECK(worst_formula <= 1e-10);
  CHECK(worst_fd <= 1e-5);
}

TEST_CASE("straight-through alpha gradient agrees in sign with the soft relaxation") {
  std::mt19937_64 rng(67);
  const NetworkArch arch = make_arch(std::vector<std::int64_t>{4}, std::vector<std::int64_t>{1}, all_kinds(), 3, 4, 6);
  int agree = 0, trials = 0;
  for (int t = 0; t < 200; ++t) {
    Supernet<double> net(arch, static_cast<std::uint64_t>(t));
    randomize_block(net.blocks()[0], rng);
    const Tensor<double> x = random_tensor<double>(Shape(2, 4, 6, 6), rng);
    const std::vector<int> labels{t % 3, (t + 1) % 3};
    const int k = t % 7 == 1 ? 0 : t % 7;
    // Only branches whose hard gate is on get an alpha gradient, so draw
    // (alpha, zeta) conditioned on R = alpha + zeta > 0.
    double R = -1;
    while (R <= 0) R = std::normal_distribution<double>(0, 1)(rng) + sample_logistic_noise(rng);
    const double zs = sigmoid(R);
    auto grad_with_forward_gate = [&](double z_forward) {
      double g = 0;
      Tape<double> tape;
      RepBlock<double>& block = net.blocks()[0];
      Var<double> main = ad::param(&tape, block.main_kernel);
      std::vector<Var<double>> parts;
      for (int j = 0; j < 7; ++j) {
        Var<double> o = branch_forward(block, j, ad::constant(x), main, Mode::Eval, &tape);
        parts.push_back(j == k ? ad::straight_through_gate(o, z_forward, zs, 1.0, &g) : o);
      }
      Var<double> h = ad::global_avg_pool(ad::relu(ad::add_n<double>(parts)));
      tape.backward(ad::softmax_cross_entropy(
          ad::linear(h, ad::param(&tape, net.head_weight()), ad::param(&tape, net.head_bias())), labels));
      return g;
    };
    const double hard = grad_with_forward_gate(1.0), soft = grad_with_forward_gate(zs);
    if (soft == 0.0) continue;
    ++trials;
    agree += (hard > 0) == (soft > 0) ? 1 : 0;
  }
  REQUIRE(trials > 150);
  CHECK(static_cast<double>(agree) / trials >= 0.95);
}

TEST_CASE("search steps respect the budget and train") {
  const NetworkArch arch = tiny_arch();
  const Batch b = synthetic_batch(32, 5);
  const std::int64_t total = arch.total_branches(), prot = arch.protected_branches();
  REQUIRE(prot == 2);

  SUBCASE("C = total trains the full supernet") {
    Supernet<float> net(arch, 1);
    SearchConfig sc;
    sc.budget = total;
    Search<float> search(net, sc);
    double first = 0, last = 0;
    for (int i = 0; i < 50; ++i) {
      const StepMetrics m = search.step(b.x, b.y, 0.05);
      CHECK(m.active_branches == total);
      if (i < 5) first += m.loss / 5;
      if (i >= 45) last += m.loss / 5;
    }
    CHECK(last < first);
  }
  SUBCASE("C = #protected is single-path training with inert alpha") {
    Supernet<float> net(arch, 1);
    SearchConfig sc;
    sc.budget = prot;
    Search<float> search(net, sc);
    for (int i = 0; i < 10; ++i) {
      const StepMetrics m = search.step(b.x, b.y, 0.05);
      CHECK(m.active_branches == prot);
      for (std::size_t k = 0; k < search.state().size(); ++k)
        CHECK(search.state().z_hard[k] == search.state().is_protected[k]);
    }
    for (double a : search.state().alpha) CHECK(a == 0.0);
  }
  SUBCASE("intermediate C") {
    Supernet<float> net(arch, 1);
    SearchConfig sc;
    sc.budget = 7;
    Search<float> search(net, sc);
    for (int i = 0; i < 10; ++i) {
      CHECK(search.step(b.x, b.y, 0.05).active_branches == 7);
      for (std::size_t k = 0; k < search.state().size(); ++k)
        if (search.state().is_protected[k]) CHECK(search.state().z_hard[k] == 1);
    }
  }
  SUBCASE("C below the protected count") {
    Supernet<float> net(arch, 1);
    SearchConfig sc;
    sc.budget = 1;
    CHECK_THROWS_AS(Search<float>(net, sc), ConfigError);
  }
}

TEST_CASE("same seed gives identical alpha trajectories") {
  const NetworkArch arch = tiny_arch();
  const Batch b = synthetic_batch(16, 6);
  auto run = [&] {
    Supernet<float> net(arch, 3);
    SearchConfig sc;
    sc.budget = 8;
    sc.seed = 11;
    Search<float> search(net, sc);
    std::vector<std::vector<double>> traj;
    for (int i = 0; i < 10; ++i) {
      search.step(b.x, b.y, 0.05);
      traj.push_back(search.state().alpha);
    }
    return traj;
  };
  const auto a = run();
  CHECK(a == run());
  bool moved = false;
  for (double v : a.back()) moved = moved || v != 0.0;
  CHECK(moved);
}

TEST_CASE("finalize examples") {
  ArchState s = ArchState::for_arch(tiny_arch());
  const std::int64_t prot = s.num_protected();
  const auto ties = finalize_architecture(s, prot + 3);
  int kept_free = 0;
  std::size_t last_kept = 0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.is_protected[k]) {
      CHECK(ties[k] == 1);
    } else if (ties[k]) {
      ++kept_free;
      last_kept = k;
    }
  }
  CHECK(kept_free == 3);
  for (std::size_t k = 0; k < last_kept; ++k)
    if (!s.is_protected[k]) CHECK(ties[k] == 1);

  for (std::size_t k = 0; k < s.size(); ++k) s.alpha[k] = -static_cast<double>(k);
  const auto ordered = finalize_architecture(s, prot + 2);
  std::vector<std::size_t> free_idx;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (!s.is_protected[k]) free_idx.push_back(k);
  for (std::size_t i = 0; i < free_idx.size(); ++i) CHECK(ordered[free_idx[i]] == (i < 2 ? 1 : 0));
}

TEST_CASE("finalized gates are among the most often sampled branches") {
  const NetworkArch arch = tiny_arch();
  const Batch b = synthetic_batch(16, 7);
  Supernet<float> net(arch, 4);
  SearchConfig sc;
  sc.budget = 7;
  sc.seed = 3;
  Search<float> search(net, sc);
  ArchState& s = search.state();
  // A spread-out alpha, as after a long search; shuffled so order is not index order.
  std::vector<double> spread;
  for (std::size_t k = 0; k < s.size(); ++k) spread.push_back(-3.0 + 6.0 * static_cast<double>(k) / static_cast<double>(s.size() - 1));
  std::mt19937_64 rng(68);
  std::shuffle(spread.begin(), spread.end(), rng);
  s.alpha = spread;
  for (int i = 0; i < 20; ++i) search.step(b.x, b.y, 0.02);
  s.reset_keep_counts();
  for (int i = 0; i < 300; ++i) search.step(b.x, b.y, 0.02);
  REQUIRE(s.samples == 300);

  std::vector<double> rates;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (!s.is_protected[k]) rates.push_back(static_cast<double>(s.keep_count[k]) / static_cast<double>(s.samples));
  std::vector<double> sorted = rates;
  std::sort(sorted.begin(), sorted.end());
  const double median = 0.5 * (sorted[(sorted.size() - 1) / 2] + sorted[sorted.size() / 2]);
  const auto final_gates = finalize_architecture(s, sc.budget);
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.is_protected[k]) {
      CHECK(final_gates[k] == 1);
      CHECK(s.keep_count[k] == s.samples);
    } else if (final_gates[k]) {
      CHECK(static_cast<double>(s.keep_count[k]) / static_cast<double>(s.samples) > median);
    }
  }

  const NetworkArch fa = finalized_arch(net, s, sc.budget);
  CHECK(fa.active_branches() == sc.budget);
  CHECK(fa.blocks[0].alpha.size() == fa.blocks[0].branches.size());
}
