// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "pmtmae/geometry.hpp"
#include "pmtmae/gradcheck.hpp"

using namespace pmt;

namespace {

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) p = {g(rng), g(rng), g(rng)};
  return c;
}

std::vector<oracle::Vec3> widen(std::span<const Point3> pts) {
  std::vector<oracle::Vec3> out;
  for (const auto& p : pts) out.push_back({p[0], p[1], p[2]});
  return out;
}

}  // namespace

TEST_CASE("normalize examples") {
  PointCloud c;
  c.points = {{0, 0, 0}, {2, 0, 0}};
  auto n = normalize(c);
  CHECK(n.points[0][0] == doctest::Approx(-1.0));
  CHECK(n.points[1][0] == doctest::Approx(1.0));

  PointCloud same;
  same.points = {{1, 2, 3}, {1, 2, 3}};
  CHECK_THROWS_AS(normalize(same), Error);

  std::mt19937_64 rng(1);
  auto r = normalize(random_cloud(200, rng));
  double far = 0.0;
  for (const auto& p : r.points) far = std::max(far, std::sqrt(double(p[0]) * p[0] + p[1] * p[1] + p[2] * p[2]));
  CHECK(far <= 1.0 + 1e-6);
  auto again = normalize(r);
  for (std::size_t i = 0; i < r.size(); ++i)
    for (int d = 0; d < 3; ++d) CHECK(std::abs(again.points[i][d] - r.points[i][d]) < 1e-6);
}

TEST_CASE("fps examples") {
  PointCloud c;
  c.points = {{0, 0, 0}, {10, 0, 0}, {0, 0, 1}};
  auto idx = fps_from(c, 2, 0);
  CHECK(idx == std::vector<std::size_t>{0, 1});

  std::mt19937_64 rng(2);
  auto cloud = random_cloud(50, rng);
  auto all = fps(cloud, 50, 99);
  std::set<std::size_t> uniq(all.begin(), all.end());
  CHECK(uniq.size() == 50);

  auto one = fps(cloud, 1, 99);
  CHECK(one.front() == fps_start_index(50, 99));
  CHECK_THROWS_AS(fps(cloud, 51, 0), Error);
}

TEST_CASE("fps is deterministic and greedy") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto cloud = random_cloud(40, rng);
    auto a = fps(cloud, 12, trial);
    auto b = fps(cloud, 12, trial);
    CHECK(a == b);
    // Each pick maximizes the distance to the already chosen set.
    for (std::size_t s = 1; s < a.size(); ++s) {
      auto dist = [&](std::size_t i) {
        double best = 1e300;
        for (std::size_t j = 0; j < s; ++j)
          best = std::min(best, oracle::sq_dist(widen({&cloud.points[i], 1})[0], widen({&cloud.points[a[j]], 1})[0]));
        return best;
      };
      const double chosen = dist(a[s]);
      for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(dist(i) <= chosen);
    }
  }
}

TEST_CASE("knn_group examples") {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  const std::size_t centers[] = {0};
  auto ps = knn_group(c, centers, 2);
  CHECK(ps.source_indices == std::vector<std::uint32_t>{0, 1});

  auto k1 = knn_group(c, std::vector<std::size_t>{2, 3}, 1);
  for (const auto& p : k1.patches) CHECK((p[0] == 0.0f && p[1] == 0.0f && p[2] == 0.0f));
  CHECK_THROWS_AS(knn_group(c, centers, 5), Error);
}

TEST_CASE("patches plus centers reproduce the source points") {
  std::mt19937_64 rng(6);
  auto cloud = normalize(random_cloud(128, rng));
  auto ps = make_patches(cloud, 8, 16, 3);
  REQUIRE(ps.groups() == 8);
  REQUIRE(ps.patches.size() == 8 * 16);
  for (std::size_t g = 0; g < 8; ++g) {
    for (std::size_t j = 0; j < 16; ++j) {
      const auto& src = cloud.points[ps.source_indices[g * 16 + j]];
      for (int d = 0; d < 3; ++d) CHECK(ps.patches[g * 16 + j][d] + ps.centers[g][d] == doctest::Approx(src[d]));
    }
  }
}

TEST_CASE("chamfer examples") {
  std::vector<Point3> a{{0, 0, 0}}, b{{1, 0, 0}};
  CHECK(chamfer_l2(a, b) == doctest::Approx(2.0));
  std::vector<Point3> c{{0, 0, 0}, {1, 0, 0}}, d{{0, 0, 0}};
  CHECK(chamfer_l2(c, d) == doctest::Approx(0.5));
  CHECK(chamfer_l2(c, c) == 0.0);
  CHECK_THROWS_AS(chamfer_l2(std::span<const Point3>{}, d), Error);
}

TEST_CASE("chamfer matches brute force and its symmetries") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_cloud(1 + trial % 7, rng).points;
    auto b = random_cloud(1 + (trial * 3) % 5, rng).points;
    const double ref = oracle::chamfer(widen(a), widen(b));
    const double got = chamfer_l2(a, b);
    CHECK(std::abs(got - ref) < 1e-6);
    CHECK(std::abs(chamfer_l2(b, a) - got) < 1e-9);
    CHECK(got >= 0.0);

    auto ap = a;
    std::shuffle(ap.begin(), ap.end(), rng);
    CHECK(std::abs(chamfer_l2(ap, b) - got) < 1e-9);

    auto at = a, bt = b;
    for (auto& p : at) p[0] += 0.3f, p[2] -= 0.2f;
    for (auto& p : bt) p[0] += 0.3f, p[2] -= 0.2f;
    CHECK(std::abs(chamfer_l2(at, bt) - got) < 1e-5);
  }
}

TEST_CASE("differentiable chamfer agrees with the scalar form and finite differences") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_cloud(5, rng).points;
    auto b = random_cloud(6, rng).points;
    std::vector<double> av, bv;
    for (const auto& p : a) av.insert(av.end(), p.begin(), p.end());
    for (const auto& p : b) bv.insert(bv.end(), p.begin(), p.end());
    auto ta = nd::Tensor<double>::from({5, 3}, av, true);
    auto tb = nd::Tensor<double>::from({6, 3}, bv, true);
    CHECK(chamfer_l2(ta, tb).item() == doctest::Approx(chamfer_l2(a, b)).epsilon(1e-6));
    CHECK(grad_rel_error({ta, tb}, [&] { return chamfer_l2(ta, tb); }) < kGradTolerance);
  }
}

TEST_CASE("patch-wise chamfer averages independent groups") {
  std::mt19937_64 rng(12);
  auto a = random_cloud(6, rng).points;
  auto b = random_cloud(4, rng).points;
  std::vector<double> av, bv;
  for (const auto& p : a) av.insert(av.end(), p.begin(), p.end());
  for (const auto& p : b) bv.insert(bv.end(), p.begin(), p.end());
  auto ta = nd::Tensor<double>::from({6, 3}, av);
  auto tb = nd::Tensor<double>::from({4, 3}, bv);
  const double ref = 0.5 * (oracle::chamfer(widen({a.data(), 3}), widen({b.data(), 2})) +
                            oracle::chamfer(widen({a.data() + 3, 3}), widen({b.data() + 2, 2})));
  CHECK(chamfer_l2_patches(ta, tb, 2).item() == doctest::Approx(ref).epsilon(1e-9));
}
