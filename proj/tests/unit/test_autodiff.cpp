#include <cmath>
#include <random>

#include "doctest.h"
#include "sprune/autodiff.hpp"
#include "testing.hpp"

using namespace sprune;
using sprune::testing::gradient_check;
using sprune::testing::random_tensor;
using sprune::testing::weighted_sum;

namespace {

constexpr double kFdTol = 1e-4;
constexpr int kTrials = 20;

}  // namespace

TEST_CASE("conv2d scalar and identity cases") {
  Tape tape;
  auto x = tape.leaf(Tensor({1, 1, 1, 1}, 2.0f), false);
  auto w = tape.leaf(Tensor({1, 1, 1, 1}, 3.0f), false);
  CHECK(tape.value(ops::conv2d(tape, x, w, {})).data()[0] == 6.0f);

  std::mt19937_64 rng(1);
  auto input = random_tensor<float>({2, 1, 5, 4}, rng);
  auto xi = tape.leaf(input, false);
  auto wi = tape.leaf(Tensor({1, 1, 1, 1}, 1.0f), false);
  CHECK(tape.value(ops::conv2d(tape, xi, wi, {})) == input);
}

TEST_CASE("conv2d matches the nested-loop reference") {
  std::mt19937_64 rng(7);
  auto x = random_tensor<float>({1, 3, 4, 4}, rng);
  auto w = random_tensor<float>({2, 3, 3, 3}, rng);
  Tape tape;
  auto y = ops::conv2d(tape, tape.leaf(x, false), tape.leaf(w, false), {1, 1, 1});
  auto ref = sprune::testing::naive_conv(x, w, 1, 1, 1);
  REQUIRE(tape.value(y).shape() == ref.shape());
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    CHECK(std::abs(tape.value(y)[i] - ref[i]) < 1e-5);
  }

  SUBCASE("strided, grouped") {
    auto x2 = random_tensor<float>({2, 4, 7, 6}, rng);
    auto w2 = random_tensor<float>({4, 1, 3, 3}, rng);
    Tape t2;
    auto y2 = ops::conv2d(t2, t2.leaf(x2, false), t2.leaf(w2, false), {2, 1, 4});
    auto ref2 = sprune::testing::naive_conv(x2, w2, 2, 1, 4);
    REQUIRE(t2.value(y2).shape() == ref2.shape());
    for (std::size_t i = 0; i < ref2.numel(); ++i) {
      CHECK(std::abs(t2.value(y2)[i] - ref2[i]) < 1e-5);
    }
  }
}

TEST_CASE("conv2d errors") {
  Tape tape;
  auto x = tape.leaf(Tensor({1, 3, 4, 4}), false);
  auto w = tape.leaf(Tensor({2, 2, 3, 3}), false);
  CHECK_THROWS_AS(ops::conv2d(tape, x, w, {}), Error);
  try {
    ops::conv2d(tape, x, w, {});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
  }
  auto big = tape.leaf(Tensor({2, 3, 5, 5}), false);
  try {
    ops::conv2d(tape, x, big, {});
    FAIL("expected geometry error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::geometry);
  }
}

TEST_CASE("batchnorm forward") {
  SUBCASE("constant input normalizes to zero") {
    Tape tape;
    BnRunningStats<float> stats{Tensor({3}, 0.f), Tensor({3}, 1.f)};
    auto y = ops::batchnorm(tape, tape.leaf(Tensor({2, 3, 2, 2}, 4.0f), false),
                            tape.leaf(Tensor({3}, 1.f), false),
                            tape.leaf(Tensor({3}, 0.f), false), &stats, BnMode::train);
    for (float v : tape.value(y).data()) CHECK(std::abs(v) < 1e-6);
    // running stats moved 10% toward the batch statistics
    CHECK(stats.mean[0] == doctest::Approx(0.4));
    CHECK(stats.var[0] == doctest::Approx(0.9));
  }
  SUBCASE("gamma zero collapses to beta") {
    std::mt19937_64 rng(3);
    Tape tape;
    BnRunningStats<float> stats{Tensor({3}, 0.f), Tensor({3}, 1.f)};
    auto y = ops::batchnorm(tape, tape.leaf(random_tensor<float>({2, 3, 2, 2}, rng), false),
                            tape.leaf(Tensor({3}, 0.f), false),
                            tape.leaf(Tensor({3}, 0.75f), false), &stats, BnMode::train);
    for (float v : tape.value(y).data()) CHECK(v == 0.75f);
  }
  SUBCASE("matches per-channel loop") {
    std::mt19937_64 rng(11);
    auto x = random_tensor<float>({4, 3, 2, 2}, rng);
    auto g = random_tensor<float>({3}, rng);
    auto b = random_tensor<float>({3}, rng);
    Tape tape;
    BnRunningStats<float> stats{Tensor({3}, 0.f), Tensor({3}, 1.f)};
    auto y = ops::batchnorm(tape, tape.leaf(x, false), tape.leaf(g, false),
                            tape.leaf(b, false), &stats, BnMode::train);
    for (int c = 0; c < 3; ++c) {
      double mu = 0, var = 0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) mu += x[(n * 3 + c) * 4 + i];
      mu /= 16;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) var += std::pow(x[(n * 3 + c) * 4 + i] - mu, 2);
      var /= 16;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 4; ++i) {
          const std::size_t k = static_cast<std::size_t>((n * 3 + c) * 4 + i);
          const double ref = (x[k] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
          CHECK(std::abs(tape.value(y)[k] - ref) < 1e-5);
        }
    }
  }
  SUBCASE("eval without stats and empty batch") {
    Tape tape;
    auto g = tape.leaf(Tensor({3}, 1.f), false);
    auto b = tape.leaf(Tensor({3}, 0.f), false);
    auto x = tape.leaf(Tensor({1, 3, 2, 2}, 1.f), false);
    try {
      ops::batchnorm<float>(tape, x, g, b, nullptr, BnMode::eval);
      FAIL("expected statistics error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::statistics);
    }
    auto empty = tape.leaf(Tensor({0, 3, 2, 2}), false);
    try {
      ops::batchnorm<float>(tape, empty, g, b, nullptr, BnMode::train);
      FAIL("expected statistics error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::statistics);
    }
  }
}

TEST_CASE("gate_modulate identity, suppression and length check") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({2, 3, 2, 2}, rng);
  Tape tape;
  auto xi = tape.leaf(x, false);
  CHECK(tape.value(ops::gate_modulate(tape, xi, tape.leaf(Tensor({3}, 1.f), false))) == x);
  for (float v : tape.value(ops::gate_modulate(tape, xi, tape.leaf(Tensor({3}, 0.f), false))).data()) {
    CHECK(v == 0.0f);
  }
  try {
    ops::gate_modulate(tape, xi, tape.leaf(Tensor({4}, 1.f), false));
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
  }
}

TEST_CASE("cross_entropy values") {
  Tape tape;
  std::vector<int> labels{3, 7};
  auto z = tape.leaf(Tensor({2, 10}, 0.5f), false);
  CHECK(tape.value(ops::cross_entropy(tape, z, labels))[0] ==
        doctest::Approx(std::log(10.0)).epsilon(1e-6));

  Tensor sat({1, 4}, 0.f);
  sat[2] = 1000.f;
  std::vector<int> two{2};
  CHECK(tape.value(ops::cross_entropy(tape, tape.leaf(sat, false), two))[0] < 1e-6);

  std::mt19937_64 rng(9);
  auto logits = random_tensor<double>({4, 5}, rng, -3, 3);
  std::vector<int> ys{0, 4, 2, 2};
  BasicTape<double> dt;
  const double got = dt.value(ops::cross_entropy(dt, dt.leaf(logits, false), ys))[0];
  double ref = 0;
  for (int b = 0; b < 4; ++b) {
    double se = 0;
    for (int c = 0; c < 5; ++c) se += std::exp(logits[b * 5 + c]);
    ref += std::log(se) - logits[b * 5 + ys[b]];
  }
  CHECK(std::abs(got - ref / 4) < 1e-6);

  std::vector<int> bad{10, 0};
  try {
    ops::cross_entropy(tape, z, bad);
    FAIL("expected label error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::label);
  }
}

TEST_CASE("label smoothing cross entropy") {
  std::mt19937_64 rng(13);
  auto logits = random_tensor<double>({4, 5}, rng, -2, 2);
  std::vector<int> ys{1, 0, 4, 3};
  const double eps = 0.1;
  BasicTape<double> tape;
  auto z = tape.leaf(logits, false);
  const double plain = tape.value(ops::cross_entropy(tape, z, ys))[0];
  const double smooth = tape.value(ops::cross_entropy(tape, z, ys, eps))[0];
  CHECK(tape.value(ops::cross_entropy(tape, z, ys, 0.0))[0] == plain);
  double ref = 0;
  for (int b = 0; b < 4; ++b) {
    double se = 0;
    for (int c = 0; c < 5; ++c) se += std::exp(logits[b * 5 + c]);
    const double lse = std::log(se);
    for (int c = 0; c < 5; ++c) {
      const double q = (c == ys[b] ? 1 - eps : 0.0) + eps / 5;
      ref -= q * (logits[b * 5 + c] - lse);
    }
  }
  CHECK(std::abs(smooth - ref / 4) < 1e-6);

  auto uniform = tape.leaf(BasicTensor<double>({4, 5}, 1.5), false);
  CHECK(tape.value(ops::cross_entropy(tape, uniform, ys, 0.3))[0] ==
        doctest::Approx(std::log(5.0)));
}

TEST_CASE("backward basics") {
  Tape tape;
  std::mt19937_64 rng(2);
  auto x = tape.leaf(random_tensor<float>({2, 3, 4}, rng), true);
  auto other = tape.leaf(random_tensor<float>({3}, rng), true);
  auto s = ops::sum(tape, x);
  std::vector<VarId> targets{x, other};
  auto grads = tape.backward(s, targets);
  for (float g : grads.at(x).data()) CHECK(g == 1.0f);
  for (float g : grads.at(other).data()) CHECK(g == 0.0f);

  auto nonscalar = ops::relu(tape, x);
  try {
    tape.backward(nonscalar, targets);
    FAIL("expected contract error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contract);
  }
}

TEST_CASE("backward leaves non-target tensors untouched") {
  std::mt19937_64 rng(4);
  const auto w = random_tensor<float>({4, 3, 3, 3}, rng);
  const auto x = random_tensor<float>({2, 3, 5, 5}, rng);
  Tape tape;
  auto wi = tape.leaf(w, false);
  auto gi = tape.leaf(Tensor({4}, 0.5f), true);
  auto y = ops::gate_modulate(tape, ops::conv2d(tape, tape.leaf(x, false), wi, {1, 1, 1}), gi);
  auto loss = ops::sum(tape, ops::relu(tape, y));
  const auto before = tape.value(wi);
  std::vector<VarId> targets{gi};
  auto grads = tape.backward(loss, targets);
  CHECK(grads.size() == 1);
  CHECK(tape.value(wi) == before);
  CHECK(tape.value(wi) == w);
}

TEST_CASE("non-finite forward is rejected") {
  Tape tape;
  Tensor x({1, 2}, 1.0f);
  x[1] = std::numeric_limits<float>::infinity();
  auto xi = tape.leaf(x, false);
  try {
    ops::relu(tape, xi);
    FAIL("expected divergence error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::divergence);
  }
}

TEST_CASE("deterministic forward") {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({2, 3, 6, 6}, rng);
  auto w = random_tensor<float>({5, 3, 3, 3}, rng);
  auto run = [&] {
    Tape tape;
    return tape.value(ops::conv2d(tape, tape.leaf(x, false), tape.leaf(w, false), {2, 1, 1}));
  };
  CHECK(run() == run());
}

// Finite-difference oracle for every differentiable op (double precision).
TEST_CASE("finite-difference gradients") {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto r4 = random_tensor<double>({2, 4, 5, 5}, rng);

    // conv2d, input and weight, with stride/padding/groups variety
    {
      const int groups = trial % 2 ? 2 : 1;
      auto x = random_tensor<double>({2, 4, 5, 5}, rng);
      auto w = random_tensor<double>({4, 4 / groups, 3, 3}, rng);
      const int stride = 1 + trial % 2;
      auto ref = random_tensor<double>({2, 4, (5 + 2 - 3) / stride + 1, (5 + 2 - 3) / stride + 1}, rng);
      worst = std::max(worst, gradient_check({x, w}, {0, 1}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::conv2d(t, ids[0], ids[1], {stride, 1, groups}), ref);
      }));
    }
    // batchnorm in both modes
    for (BnMode mode : {BnMode::train, BnMode::eval}) {
      auto x = random_tensor<double>({2, 4, 5, 5}, rng);
      auto g = random_tensor<double>({4}, rng, 0.5, 1.5);
      auto b = random_tensor<double>({4}, rng);
      BnRunningStats<double> stats{random_tensor<double>({4}, rng), random_tensor<double>({4}, rng, 0.5, 2)};
      worst = std::max(worst, gradient_check({x, g, b}, {0, 1, 2}, [&](auto& t, const auto& ids) {
        BnRunningStats<double> s = stats;
        return weighted_sum(t, ops::batchnorm(t, ids[0], ids[1], ids[2], &s, mode), r4);
      }));
    }
    // gate modulation
    {
      auto x = random_tensor<double>({2, 3, 2, 2}, rng);
      auto g = random_tensor<double>({3}, rng, 0, 1);
      auto ref = random_tensor<double>({2, 3, 2, 2}, rng);
      worst = std::max(worst, gradient_check({x, g}, {0, 1}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::gate_modulate(t, ids[0], ids[1]), ref);
      }));
    }
    // relu (inputs kept away from the kink), pooling, linear, add, CE
    {
      auto x = random_tensor<double>({2, 4, 5, 5}, rng, 0.01, 1);
      for (auto& v : x.data()) v = (rng() % 2 ? v : -v);
      worst = std::max(worst, gradient_check({x}, {0}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::relu(t, ids[0]), r4);
      }));
    }
    {
      auto x = random_tensor<double>({2, 3, 4, 6}, rng);
      auto ref = random_tensor<double>({2, 3, 2, 3}, rng);
      worst = std::max(worst, gradient_check({x}, {0}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::avg_pool(t, ids[0], 2), ref);
      }));
      auto ref2 = random_tensor<double>({2, 3}, rng);
      worst = std::max(worst, gradient_check({x}, {0}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::global_avg_pool(t, ids[0]), ref2);
      }));
    }
    {
      auto x = random_tensor<double>({3, 5}, rng);
      auto w = random_tensor<double>({4, 5}, rng);
      auto b = random_tensor<double>({4}, rng);
      auto ref = random_tensor<double>({3, 4}, rng);
      worst = std::max(worst, gradient_check({x, w, b}, {0, 1, 2}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::linear(t, ids[0], ids[1], ids[2]), ref);
      }));
    }
    {
      auto a = random_tensor<double>({2, 3}, rng);
      auto b = random_tensor<double>({2, 3}, rng);
      auto ref = random_tensor<double>({2, 3}, rng);
      worst = std::max(worst, gradient_check({a, b}, {0, 1}, [&](auto& t, const auto& ids) {
        return weighted_sum(t, ops::add(t, ids[0], ids[1]), ref);
      }));
    }
    {
      auto z = random_tensor<double>({4, 5}, rng, -2, 2);
      std::vector<int> ys{0, 3, 4, 1};
      const double eps = trial % 2 ? 0.1 : 0.0;
      worst = std::max(worst, gradient_check({z}, {0}, [&](auto& t, const auto& ids) {
        return ops::cross_entropy(t, ids[0], ys, eps);
      }));
    }
  }
  INFO("worst relative error " << worst);
  CHECK(worst < kFdTol);
}

TEST_CASE("composite conv-bn-gate-pool-linear-CE gate gradients") {
  std::mt19937_64 rng(77);
  std::vector<int> ys{0, 2, 1};
  double worst = 0;
  for (int trial = 0; trial < kTrials; ++trial) {
    auto x = random_tensor<double>({3, 2, 6, 6}, rng);
    auto w = random_tensor<double>({4, 2, 3, 3}, rng);
    auto gm = random_tensor<double>({4}, rng, 0.5, 1.5);
    auto bt = random_tensor<double>({4}, rng);
    auto gates = random_tensor<double>({4}, rng, 0.05, 1);
    auto fc = random_tensor<double>({3, 4}, rng);
    worst = std::max(worst, gradient_check({x, w, gm, bt, gates, fc}, {4}, [&](auto& t, const auto& ids) {
      BnRunningStats<double> s{BasicTensor<double>({4}, 0.0), BasicTensor<double>({4}, 1.0)};
      auto h = ops::conv2d(t, ids[0], ids[1], {1, 1, 1});
      h = ops::batchnorm(t, h, ids[2], ids[3], &s, BnMode::train);
      h = ops::gate_modulate(t, h, ids[4]);
      h = ops::relu(t, h);
      h = ops::avg_pool(t, h, 2);
      h = ops::global_avg_pool(t, h);
      return ops::cross_entropy(t, ops::linear(t, h, ids[5], -1), ys);
    }));
  }
  INFO("worst relative error " << worst);
  CHECK(worst < kFdTol);
}
