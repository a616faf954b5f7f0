// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "pmtmae/gradcheck.hpp"
#include "pmtmae/ndcore.hpp"

using namespace pmt;
using nd::Tensor;
using TD = Tensor<double>;

namespace {

TD randn(nd::Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(nd::numel(s));
  for (double& x : v) x = g(rng);
  return TD::from(std::move(s), std::move(v), true);
}

TD weights(nd::Shape s, std::mt19937_64& rng) {
  auto t = randn(std::move(s), rng);
  t.set_requires_grad(false);
  return t;
}

}  // namespace

TEST_CASE("matmul examples") {
  auto a = TD::from({2, 2}, {1, 2, 3, 4});
  auto b = TD::from({2, 1}, {1, 1});
  auto c = nd::matmul(a, b);
  CHECK(c.shape() == nd::Shape{2, 1});
  CHECK(c.at(0) == 3.0);
  CHECK(c.at(1) == 7.0);

  auto eye = TD::from({2, 2}, {1, 0, 0, 1});
  auto x = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = nd::matmul(eye, x);
  for (std::size_t i = 0; i < 6; ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("matmul gradient of sum(A*B) w.r.t. A") {
  auto a = TD::from({2, 2}, {1, 0, 0, 1}, true);
  auto b = TD::from({2, 2}, {2, 3, 4, 5});
  nd::backward(nd::sum(nd::matmul(a, b)));
  const double expect[] = {5, 9, 5, 9};
  for (int i = 0; i < 4; ++i) CHECK(a.grad()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({2, 3});
  try {
    nd::matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  auto s = nd::softmax(TD::from({1, 3}, {5, 5, 5}));
  for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  auto t = nd::softmax(TD::from({1, 2}, {0, std::log(3.0)}));
  CHECK(t.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.at(1) == doctest::Approx(0.75).epsilon(1e-12));

  auto big = nd::softmax(Tensor<float>::from({1, 2}, {1000.0f, 0.0f}));
  CHECK(std::isfinite(big.at(0)));
  CHECK(big.at(0) == doctest::Approx(1.0));
  CHECK(big.at(1) == doctest::Approx(0.0));
}

TEST_CASE("softmax sums to one and ignores a constant shift") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randn({4, 7}, rng, 3.0);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = static_cast<double>(r) * 17.0 - 20.0;
      for (std::size_t j = 0; j < 7; ++j) shifted[r * 7 + j] += c;
    }
    auto a = nd::softmax(x);
    auto b = nd::softmax(TD::from({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) total += a.at(r * 7 + j);
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  auto gamma = TD::from({2}, {1, 1});
  auto beta = TD::from({2}, {0, 0});
  auto y = nd::layer_norm(TD::from({1, 2}, {1, 3}), gamma, beta, 1e-12);
  CHECK(y.at(0) == doctest::Approx(-1.0));
  CHECK(y.at(1) == doctest::Approx(1.0));

  auto c = nd::layer_norm(TD::from({1, 2}, {4, 4}), gamma, beta, 1e-5);
  CHECK(c.at(0) == 0.0);
  CHECK(c.at(1) == 0.0);
}

TEST_CASE("gelu values") {
  auto y = nd::gelu(TD::from({3}, {0.0, 10.0, -10.0}));
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == doctest::Approx(10.0));
  CHECK(std::abs(y.at(2)) < 1e-12);

  // Monotone on the positive half line.
  std::vector<double> xs;
  for (int i = 0; i <= 400; ++i) xs.push_back(i * 0.02);
  auto g = nd::gelu(TD::from({xs.size()}, xs));
  for (std::size_t i = 1; i < xs.size(); ++i) CHECK(g.at(i) >= g.at(i - 1));

  // Float path agrees with the double path.
  std::vector<float> xf(xs.begin(), xs.end());
  auto gf = nd::gelu(Tensor<float>::from({xf.size()}, xf));
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(gf.at(i) == doctest::Approx(g.at(i)).epsilon(1e-5));
}

TEST_CASE("gelu gradient at fixed points") {
  auto x = TD::from({4}, {-2.0, -0.5, 0.5, 2.0}, true);
  const double err = grad_rel_error({x}, [&] { return nd::sum(nd::gelu(x)); });
  CHECK(err < kGradTolerance);
}

TEST_CASE("backward examples") {
  auto w = TD::from({3}, {0.3, -1.0, 2.0}, true);
  nd::backward(nd::sum(w));
  for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == 1.0);

  auto v = TD::from({2}, {1, 2}, true);
  nd::backward(nd::sum(nd::mul(v, v)));
  CHECK(v.grad()[0] == 2.0);
  CHECK(v.grad()[1] == 4.0);

  // Repeated backward calls accumulate.
  nd::backward(nd::sum(nd::mul(v, v)));
  CHECK(v.grad()[0] == 4.0);
  CHECK(v.grad()[1] == 8.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  auto w = TD::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(nd::backward(nd::mul(w, w)), Error);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = randn({3, 4}, rng);
    auto b = weights({4, 2}, rng);
    auto r = weights({3, 2}, rng);
    auto l1 = [&] { return nd::sum(nd::mul(nd::matmul(a, b), r)); };
    auto l2 = [&] { return nd::sum(nd::gelu(nd::mul(a, a))); };
    nd::backward(l1());
    std::vector<double> g1(a.grad().begin(), a.grad().end());
    a.zero_grad();
    nd::backward(l2());
    std::vector<double> g2(a.grad().begin(), a.grad().end());
    a.zero_grad();
    nd::backward(nd::add(l1(), l2()));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
  }
}

TEST_CASE("NoGradGuard records nothing") {
  auto w = TD::from({2}, {1, 2}, true);
  TD y;
  {
    nd::NoGradGuard g;
    y = nd::sum(nd::mul(w, w));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(nd::grad_enabled());
}

TEST_CASE("gather_rows, concat and segment reductions") {
  auto x = TD::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::size_t idx[] = {2, 0, 2};
  auto g = nd::gather_rows(x, std::span<const std::size_t>(idx));
  CHECK(g.shape() == nd::Shape{3, 2});
  CHECK(g.at(0) == 5.0);
  CHECK(g.at(3) == 2.0);
  nd::backward(nd::sum(g));
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[2] == 0.0);
  CHECK(x.grad()[4] == 2.0);

  auto c = nd::concat_cols<double>({TD::from({2, 1}, {1, 2}), TD::from({2, 2}, {3, 4, 5, 6})});
  const double cols[] = {1, 3, 4, 2, 5, 6};
  for (int i = 0; i < 6; ++i) CHECK(c.at(i) == cols[i]);
  auto r = nd::concat_rows<double>({TD::from({1, 2}, {1, 2}), TD::from({1, 2}, {3, 4})});
  CHECK(r.shape() == nd::Shape{2, 2});
  CHECK(r.at(3) == 4.0);

  auto s = TD::from({4, 2}, {1, 8, 3, 2, 0, 0, -1, 5});
  auto m = nd::segment_max(s, 2);
  CHECK(m.shape() == nd::Shape{2, 2});
  CHECK(m.at(0) == 3.0);
  CHECK(m.at(1) == 8.0);
  CHECK(m.at(2) == 0.0);
  CHECK(m.at(3) == 5.0);
  auto mu = nd::segment_mean(s, 4);
  CHECK(mu.at(0) == doctest::Approx(0.75));
  CHECK(mu.at(1) == doctest::Approx(3.75));
}

TEST_CASE("linear_segment_max equals segment_max of linear") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t groups = 1 + trial % 3, k = 4, in = 5, out = 6;
    auto x = randn({groups * k, in}, rng);
    auto w = randn({in, out}, rng);
    auto b = randn({out}, rng);
    auto fused = nd::linear_segment_max(x, w, b, k);
    auto ref = nd::segment_max(nd::linear(x, w, b), k);
    REQUIRE(fused.shape() == ref.shape());
    for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(fused.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-12));

    auto r = weights({groups, out}, rng);
    const double err =
        grad_rel_error({x, w, b}, [&] { return nd::sum(nd::mul(nd::linear_segment_max(x, w, b, k), r)); });
    CHECK(err < kGradTolerance);
  }
}

TEST_CASE("finite-difference check of assorted ops") {
  std::mt19937_64 rng(21);
  for (int seed = 0; seed < 20; ++seed) {
    auto x = randn({4, 8}, rng);
    auto g = randn({8}, rng);
    auto b = randn({8}, rng);
    auto r = weights({4, 8}, rng);
    CHECK(grad_rel_error({x, g, b}, [&] { return nd::sum(nd::mul(nd::layer_norm(x, g, b, 1e-5), r)); }) <
          kGradTolerance);
    CHECK(grad_rel_error({x}, [&] { return nd::sum(nd::mul(nd::log_softmax(x), r)); }) < kGradTolerance);
    auto r2 = weights({2, 8}, rng);
    CHECK(grad_rel_error({x}, [&] { return nd::sum(nd::mul(nd::segment_max(x, 2), r2)); }) < kGradTolerance);

    auto q = randn({6, 4}, rng), k = randn({6, 4}, rng), v = randn({6, 4}, rng);
    auto rq = weights({6, 4}, rng);
    CHECK(grad_rel_error({q, k, v}, [&] {
            return nd::sum(nd::mul(nd::multi_head_attention(q, k, v, 2, 3, 2), rq));
          }) < kGradTolerance);
  }
}
