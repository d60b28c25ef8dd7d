#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "p2w/error.hpp"
#include "p2w/ops.hpp"

using namespace p2w;
using ops::Padding;

namespace {

Real max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<Real> random_vec(std::size_t n, std::mt19937_64& g) {
  std::uniform_real_distribution<Real> d(-1, 1);
  std::vector<Real> v(n);
  for (auto& x : v) x = d(g);
  return v;
}

}  // namespace

TEST_CASE("conv2d: ones kernel over ones gives nine") {
  const Tensor x(Shape{1, 1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0);
  const Tensor y = ops::conv2d(x, w, {}, 1, Padding::valid);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0);
}

TEST_CASE("conv2d: identity kernel with same padding returns the input") {
  std::mt19937_64 g(1);
  const Tensor x = oracle::random_tensor({1, 1, 5, 5}, g);
  Tensor w(Shape{1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1;
  const Tensor y = ops::conv2d(x, w, {}, 1, Padding::same);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(x, y) == 0);
}

TEST_CASE("conv2d: stride-2 valid case matches the six-loop oracle") {
  std::mt19937_64 g(2);
  const Tensor x = oracle::random_tensor({1, 2, 8, 8}, g);
  const Tensor w = oracle::random_tensor({4, 2, 3, 3}, g);
  const auto b = random_vec(4, g);
  const Tensor y = ops::conv2d(x, w, b, 2, Padding::valid);
  CHECK(y.shape() == Shape{1, 4, 3, 3});
  CHECK(max_abs_diff(y, oracle::conv2d(x, w, b, 2, false)) <= 1e-12);
}

TEST_CASE("conv2d: random geometries agree with the oracle") {
  std::mt19937_64 g(3);
  std::uniform_int_distribution<std::size_t> ext(1, 11), ch(1, 5), ker(1, 4), str(1, 3);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t h = ext(g), w = ext(g), k = ker(g), s = str(g);
    const bool same = trial % 2 == 0;
    if (!same && (k > h || k > w)) continue;
    const Tensor x = oracle::random_tensor({1 + trial % 3u, ch(g), h, w}, g);
    const Tensor wt = oracle::random_tensor({ch(g), x.shape().c, k, k}, g);
    const auto b = trial % 4 == 0 ? std::vector<Real>{} : random_vec(wt.shape().n, g);
    const Tensor y = ops::conv2d(x, wt, b, s, same ? Padding::same : Padding::valid);
    CHECK(max_abs_diff(y, oracle::conv2d(x, wt, b, s, same)) <= 1e-12);
  }
}

TEST_CASE("conv2d: same padding keeps extents at stride 1 and ceil-divides otherwise") {
  CHECK(ops::plan_padding(7, 3, 1, Padding::same).out == 7);
  CHECK(ops::plan_padding(7, 3, 2, Padding::same).out == 4);
  CHECK(ops::plan_padding(8, 1, 2, Padding::same).out == 4);
  CHECK(ops::plan_padding(8, 3, 2, Padding::valid).out == 3);
}

TEST_CASE("conv2d: shape errors name both shapes") {
  const Tensor x(Shape{1, 2, 5, 5}), w(Shape{3, 4, 3, 3});
  try {
    (void)ops::conv2d(x, w, {}, 1, Padding::same);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(x.shape().str()) != std::string::npos);
    CHECK(msg.find(w.shape().str()) != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv2d(Tensor(Shape{1, 1, 2, 2}), Tensor(Shape{1, 1, 3, 3}), {}, 1, Padding::valid),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor(Shape{1, 2, 3, 3}), {}, 0, Padding::same), ShapeError);
}

TEST_CASE("maxpool2d: small cases and the loop oracle") {
  const Tensor x(Shape{1, 1, 2, 2}, std::vector<Real>{1, 2, 3, 4});
  const auto r = ops::maxpool2d(x, 2, 2);
  CHECK(r.output.size() == 1);
  CHECK(r.output[0] == 4);

  const Tensor c(Shape{1, 2, 4, 6}, 3.5);
  const auto rc = ops::maxpool2d(c, 2, 2);
  CHECK(rc.output.shape() == Shape{1, 2, 2, 3});
  for (Real v : rc.output.data()) CHECK(v == 3.5);

  std::mt19937_64 g(4);
  for (int t = 0; t < 20; ++t) {
    const Tensor r6 = oracle::random_tensor({2, 3, 6, 6}, g);
    CHECK(max_abs_diff(ops::maxpool2d(r6, 2, 2).output, oracle::maxpool(r6, 2, 2)) == 0);
    CHECK(max_abs_diff(ops::maxpool2d(r6, 3, 2).output, oracle::maxpool(r6, 3, 2)) == 0);
  }
  CHECK_THROWS_AS(ops::maxpool2d(x, 3, 1), ShapeError);
}

TEST_CASE("maxpool2d: ties route the gradient to the first scanned cell") {
  const Tensor x(Shape{1, 1, 2, 2}, 1.0);
  const auto r = ops::maxpool2d(x, 2, 2);
  const Tensor dx = ops::maxpool2d_backward(x.shape(), r.argmax, Tensor(Shape{1, 1, 1, 1}, 5.0));
  CHECK(dx[0] == 5.0);
  CHECK(dx[1] == 0.0);
  CHECK(dx[2] == 0.0);
  CHECK(dx[3] == 0.0);
}

TEST_CASE("global_avg_pool: shape, constants and oracle") {
  const Tensor big(Shape{1, 512, 7, 7}, 0.25);
  const Tensor y = ops::global_avg_pool(big);
  CHECK(y.shape() == Shape{1, 512, 1, 1});
  for (Real v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  std::mt19937_64 g(5);
  const Tensor x = oracle::random_tensor({3, 4, 5, 6}, g);
  CHECK(max_abs_diff(ops::global_avg_pool(x), oracle::gap(x)) <= 1e-12);
}

TEST_CASE("batchnorm: identity in infer mode with unit statistics") {
  std::mt19937_64 g(6);
  const Tensor x = oracle::random_tensor({2, 3, 4, 4}, g);
  std::vector<Real> gamma(3, 1), beta(3, 0), mean(3, 0), var(3, 1);
  const ops::BnState st{gamma, beta, mean, var, 0.9, 1e-3};
  const Tensor y = ops::batchnorm(x, st, ops::BnMode::infer);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(y[i] - x[i]) <= std::abs(x[i]) * 1e-3 / 2 + 1e-15);
  }
  // Pure function: statistics untouched, repeat call identical.
  CHECK(mean == std::vector<Real>(3, 0));
  CHECK(var == std::vector<Real>(3, 1));
  CHECK(max_abs_diff(y, ops::batchnorm(x, st, ops::BnMode::infer)) == 0);
}

TEST_CASE("batchnorm: train mode standardizes per channel") {
  std::mt19937_64 g(7);
  const Tensor x = oracle::random_tensor({4, 2, 5, 5}, g, -3, 7);
  std::vector<Real> gamma{1.5, 0.5}, beta{0.2, -1}, mean(2, 0), var(2, 1);
  const ops::BnState st{gamma, beta, mean, var, 0.9, 1e-12};
  const Tensor y = ops::batchnorm(x, st, ops::BnMode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    Real s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y.plane(n, c)[i];
    const Real mu = s / 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) ss += (y.plane(n, c)[i] - mu) * (y.plane(n, c)[i] - mu);
    CHECK(std::abs(mu - beta[c]) <= 1e-5);
    CHECK(std::abs(ss / 100 - gamma[c] * gamma[c]) <= 1e-5);
  }
}

TEST_CASE("batchnorm: fixed 2x2x2x2 input against the formula") {
  const std::vector<Real> vals{1, 2, 3, 4, 10, 20, 30, 40, 5, 6, 7, 8, -10, -20, -30, -40};
  const Tensor x(Shape{2, 2, 2, 2}, vals);
  std::vector<Real> gamma{2, 2}, beta{1, 1}, mean(2, 0), var(2, 1);
  const Real eps = 1e-3;
  const ops::BnState st{gamma, beta, mean, var, 0.9, eps};
  const Tensor y = ops::batchnorm(x, st, ops::BnMode::train);
  // Channel 0 holds {1,2,3,4,5,6,7,8}; channel 1 holds {10..40, -10..-40}.
  const Real mu0 = 4.5, var0 = 5.25;
  const Real var1 = (2 * (100 + 400 + 900 + 1600)) / 8.0;
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(2 * (1 - mu0) / std::sqrt(var0 + eps) + 1).epsilon(1e-12));
  CHECK(y.at(1, 0, 1, 1) == doctest::Approx(2 * (8 - mu0) / std::sqrt(var0 + eps) + 1).epsilon(1e-12));
  CHECK(y.at(0, 1, 0, 1) == doctest::Approx(2 * 20 / std::sqrt(var1 + eps) + 1).epsilon(1e-12));
  CHECK(y.at(1, 1, 1, 0) == doctest::Approx(2 * -30 / std::sqrt(var1 + eps) + 1).epsilon(1e-12));
  CHECK(mean[0] == doctest::Approx(0.1 * mu0));
  CHECK(var[1] == doctest::Approx(0.9 + 0.1 * var1));
  std::vector<Real> bad_eps_mean(2, 0), bad_eps_var(2, 1);
  CHECK_THROWS_AS(ops::batchnorm(x, {gamma, beta, bad_eps_mean, bad_eps_var, 0.9, 0.0}, ops::BnMode::train),
                  ShapeError);
}

TEST_CASE("relu: values and subgradient") {
  const Tensor x(Shape{1, 1, 1, 3}, std::vector<Real>{-1, 0, 2});
  const Tensor y = ops::relu(x);
  CHECK(y[0] == 0);
  CHECK(y[1] == 0);
  CHECK(y[2] == 2);
  const Tensor neg(Shape{1, 2, 2, 2}, -0.5);
  const Tensor rn = ops::relu(neg);
  for (Real v : rn.data()) CHECK(v == 0);
  const Tensor g = ops::relu_backward(x, Tensor(Shape{1, 1, 1, 3}, 7.0));
  CHECK(g[0] == 0);
  CHECK(g[1] == 0);
  CHECK(g[2] == 7);
}

TEST_CASE("softmax: symmetry, overflow safety and direct formula") {
  for (Real p : ops::softmax(std::vector<Real>(5, 0.0))) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
  const auto big = ops::softmax(std::vector<Real>{1000, 0});
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  const auto p = ops::softmax(std::vector<Real>{1, 2, 3});
  const Real z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(p[0] - std::exp(1.0) / z) <= 1e-9);
  CHECK(std::abs(p[1] - std::exp(2.0) / z) <= 1e-9);
  CHECK(std::abs(p[2] - std::exp(3.0) / z) <= 1e-9);
}

TEST_CASE("softmax: probability vector and shift invariance over random logits") {
  std::mt19937_64 g(8);
  std::uniform_real_distribution<Real> d(-50, 50);
  for (int t = 0; t < 200; ++t) {
    std::vector<Real> z(2 + t % 7);
    for (auto& v : z) v = d(g);
    const auto p = ops::softmax(z);
    Real s = 0;
    for (Real v : p) {
      CHECK(v >= 0);
      CHECK(v <= 1);
      s += v;
    }
    CHECK(std::abs(s - 1) <= 1e-6);
    const Real k = d(g) * 10;
    auto zk = z;
    for (auto& v : zk) v += k;
    const auto pk = ops::softmax(zk);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - pk[i]) <= 1e-9);
  }
}

TEST_CASE("fully_connected: identity, bias only and oracle") {
  std::mt19937_64 g(9);
  const Tensor x = oracle::random_tensor({2, 4, 1, 1}, g);
  Tensor eye(Shape{4, 4, 1, 1});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1;
  CHECK(max_abs_diff(ops::fully_connected(x, eye, {}), x) == 0);
  const std::vector<Real> b{1, -2, 3};
  const Tensor y0 = ops::fully_connected(x, Tensor(Shape{3, 4, 1, 1}), b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o) CHECK(y0[n * 3 + o] == b[o]);
  const Tensor xs = oracle::random_tensor({3, 2, 3, 3}, g);
  const Tensor w = oracle::random_tensor({5, 18, 1, 1}, g);
  const auto bb = random_vec(5, g);
  CHECK(max_abs_diff(ops::fully_connected(xs, w, bb), oracle::dense(xs, w, bb)) <= 1e-12);
  CHECK_THROWS_AS(ops::fully_connected(xs, Tensor(Shape{5, 17, 1, 1}), {}), ShapeError);
}

TEST_CASE("residual_add: identities and mismatch") {
  std::mt19937_64 g(10);
  const Tensor a = oracle::random_tensor({1, 3, 4, 4}, g);
  const Tensor zero(a.shape());
  CHECK(max_abs_diff(ops::residual_add(zero, a), a) == 0);
  CHECK(max_abs_diff(ops::residual_add(a, zero), a) == 0);
  CHECK_THROWS_AS(ops::residual_add(a, Tensor(Shape{1, 3, 4, 5})), ShapeError);
}

TEST_CASE("cross_entropy: uniform, confident and direct formula") {
  CHECK(ops::cross_entropy(std::vector<Real>(5, 0.0), 3) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(ops::cross_entropy(std::vector<Real>{60, 0, 0}, 0) < 1e-20);
  std::mt19937_64 g(11);
  for (int t = 0; t < 50; ++t) {
    const auto z = random_vec(5, g);
    const int target = t % 5;
    const Real w = 0.5 + t * 0.01;
    const Real direct = -w * std::log(ops::softmax(z)[target]);
    CHECK(std::abs(ops::cross_entropy(z, target, w) - direct) <= 1e-9);
  }
  CHECK_THROWS_AS(ops::cross_entropy(std::vector<Real>(5, 0.0), 5), ShapeError);
  CHECK_THROWS_AS(ops::cross_entropy(std::vector<Real>(5, 0.0), -1), ShapeError);
}

TEST_CASE("flips form the Klein four-group") {
  std::mt19937_64 g(12);
  const Tensor x = oracle::random_tensor({1, 2, 5, 7}, g);
  const Tensor h = ops::flip_horizontal(x), v = ops::flip_vertical(x);
  CHECK(max_abs_diff(ops::flip_horizontal(h), x) == 0);
  CHECK(max_abs_diff(ops::flip_vertical(v), x) == 0);
  CHECK(max_abs_diff(ops::flip_vertical(h), ops::flip_horizontal(v)) == 0);
  CHECK(h.at(0, 1, 2, 0) == x.at(0, 1, 2, 6));
  CHECK(v.at(0, 0, 0, 3) == x.at(0, 0, 4, 3));
}

TEST_CASE("channel_softmax: every cell is a probability vector") {
  std::mt19937_64 g(13);
  const Tensor x = oracle::random_tensor({2, 5, 3, 4}, g, -20, 20);
  const Tensor p = ops::channel_softmax(x);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        Real s = 0;
        for (std::size_t c = 0; c < 5; ++c) s += p.at(n, c, i, j);
        CHECK(std::abs(s - 1) <= 1e-12);
      }
}

TEST_CASE("crop and concat_channels") {
  std::mt19937_64 g(14);
  const Tensor x = oracle::random_tensor({2, 3, 6, 5}, g);
  const Tensor c = ops::crop(x, 1, 2);
  CHECK(c.shape() == Shape{2, 3, 4, 1});
  CHECK(c.at(1, 2, 0, 0) == x.at(1, 2, 1, 2));
  const Tensor y = oracle::random_tensor({2, 2, 6, 5}, g);
  const Tensor cat = ops::concat_channels(x, y);
  CHECK(cat.shape() == Shape{2, 5, 6, 5});
  CHECK(cat.at(1, 3, 4, 4) == y.at(1, 0, 4, 4));
  CHECK(cat.at(0, 2, 4, 4) == x.at(0, 2, 4, 4));
}

TEST_CASE("tensor invariants") {
  Tensor t(Shape{2, 3, 4, 5});
  CHECK(t.size() == 120);
  t.ensure_grad();
  CHECK(t.grad().size() == t.size());
  CHECK_THROWS_AS(Tensor(Shape{1, 1, 2, 2}, std::vector<Real>(3)), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{1, 1, 1, 7}), ShapeError);
}
