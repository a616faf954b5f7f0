// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "pmtmae/analysis.hpp"
#include "pmtmae/data.hpp"

using namespace pmt;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.num_patches = 8;
  c.patch_k = 16;
  c.points = 64;
  c.encoder_blocks = 2;
  c.decoder_blocks = 1;
  c.num_classes = 5;
  c.mask_ratio = 0.5;
  return c;
}

std::vector<PatchedSample> samples() {
  SyntheticSpec s;
  s.points = 64;
  s.per_class = 3;
  s.seed = 8;
  return prepare_patches(gen_synthetic(s), Split::Train, tiny_model());
}

}  // namespace

TEST_CASE("pearson examples") {
  const std::vector<double> x{1, 2, 3};
  CHECK(pearson_r(x, x) == doctest::Approx(1.0));
  CHECK(pearson_r(x, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(pearson_r(x, std::vector<double>{1, 2, 4}) == doctest::Approx(9.0 / std::sqrt(84.0)).epsilon(1e-12));
  CHECK(pearson_r(x, std::vector<double>{1, 2, 4}) == doctest::Approx(0.98198).epsilon(1e-5));
  try {
    pearson_r(x, std::vector<double>{5, 5, 5});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
  CHECK_THROWS_AS(pearson_r(std::vector<double>{1}, std::vector<double>{2}), Error);
  CHECK_THROWS_AS(pearson_r(x, std::vector<double>{1, 2}), Error);
}

TEST_CASE("pearson matches the oracle, is symmetric and affine invariant") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 30;
    auto x = oracle::uniform(rng, n);
    auto y = oracle::uniform(rng, n);
    const double r = pearson_r(x, y);
    CHECK(std::abs(r - oracle::pearson(x, y)) < 1e-6);
    CHECK(std::abs(pearson_r(y, x) - r) < 1e-12);
    const double a = (trial % 2 ? 2.5 : -0.7), b = 3.0;
    std::vector<double> ax(x);
    for (double& v : ax) v = a * v + b;
    CHECK(pearson_r(x, ax) == doctest::Approx(a > 0 ? 1.0 : -1.0).epsilon(1e-9));
    std::vector<float> xf(x.begin(), x.end()), yf(y.begin(), y.end());
    CHECK(pearson_r(xf, yf) == doctest::Approx(oracle::pearson({xf.begin(), xf.end()}, {yf.begin(), yf.end()})).epsilon(1e-6));
  }
}

TEST_CASE("histogram binning and rebinning conserve counts") {
  const auto edges = uniform_edges(41);
  REQUIRE(edges.size() == 42);
  CHECK(edges.front() == -1.0);
  CHECK(edges.back() == 1.0);
  for (std::size_t i = 1; i < edges.size(); ++i) CHECK(edges[i] > edges[i - 1]);
  CHECK(bin_index(1.0, 41) == 40);
  CHECK(bin_index(-1.0, 41) == 0);
  CHECK(bin_index(0.0, 41) == 20);

  CorrHistogram h;
  h.edges = uniform_edges(40);
  h.counts.assign(40, 0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) add_sample(h, u(rng));
  h.undefined = 3;
  h.total += 3;
  const auto coarse = rebin(h, 4);
  REQUIRE(coarse.counts.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += h.counts[i * 4 + j];
    CHECK(coarse.counts[i] == s);
  }
  CHECK(coarse.total == h.total);
  CHECK(coarse.undefined == 3);
  CHECK_THROWS_AS(rebin(h, 3), Error);
}

TEST_CASE("correlation histograms count every token and are deterministic") {
  const auto ss = samples();
  Model<float> model(tiny_model(), 3);
  CorrOptions opt;
  const auto a = correlation_histogram(model, ss, opt);
  const auto b = correlation_histogram(model, ss, opt);
  REQUIRE(a.size() == 2);
  for (const auto& h : a) {
    std::size_t s = h.undefined;
    for (auto c : h.counts) s += c;
    CHECK(s == h.total);
    CHECK(h.total == ss.size() * 8);
    CHECK(h.mean_abs_r() >= 0.0);
    CHECK(h.mean_abs_r() <= 1.0);
  }
  CHECK(corr_jsonl(a) == corr_jsonl(b));
  opt.masked = true;
  const auto m = correlation_histogram(model, ss, opt);
  CHECK(m[0].total == ss.size() * 4);
  const auto csv = corr_csv(a);
  CHECK(csv.rfind("block,bin_lo,bin_hi,count\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == 1 + 2 * 41);
}

TEST_CASE("feature export has one row per sample and 2 + 3C columns") {
  const auto ss = samples();
  Model<float> model(tiny_model(), 3);
  const auto csv = export_features(model, ss, 4);
  CHECK(csv == export_features(model, ss, 4));
  // Batch composition changes GEMM blocking, so other batch sizes agree to rounding only.
  const auto other = export_features(model, ss, 7);
  std::istringstream ia(csv), ib(other);
  std::string la, lb;
  while (std::getline(ia, la) && std::getline(ib, lb)) {
    if (la.rfind("sample_id", 0) == 0) {
      CHECK(la == lb);
      continue;
    }
    std::istringstream ca(la), cb(lb);
    std::string fa, fb;
    while (std::getline(ca, fa, ',') && std::getline(cb, fb, ','))
      CHECK(std::stod(fa) == doctest::Approx(std::stod(fb)).epsilon(1e-4));
  }
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("sample_id,label,f0,", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 2 + 3 * 16 - 1);
  }
  CHECK(rows == ss.size());
}

TEST_CASE("reconstruction export") {
  SyntheticSpec s;
  s.points = 64;
  s.per_class = 2;
  const auto ds = gen_synthetic(s);
  Model<float> model(tiny_model(), 3);
  const auto dir = fs::temp_directory_path() / "pmtmae_test_recon";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto path = (dir / "r.pmtp").string();
  const auto r = export_reconstruction(model, ds.samples[2].cloud, 5, path);
  CHECK(r.masked == 4);
  CHECK(r.reconstructed.size() == 4 * 16);
  CHECK(r.target.size() == 4 * 16);
  CHECK(std::isfinite(r.chamfer));
  for (const auto& p : r.visible) {
    bool found = false;
    for (const auto& q : r.ground_truth) found |= (p == q);
    CHECK(found);
  }
  const auto sections = load_pmtp_sections(path);
  REQUIRE(sections.size() == 3);
  CHECK(sections[0] == r.ground_truth);
  CHECK(sections[1] == r.visible);
  CHECK(sections[2] == r.reconstructed);
  const auto again = export_reconstruction(model, ds.samples[2].cloud, 5, "");
  CHECK(again.reconstructed == r.reconstructed);
  fs::remove_all(dir);
}
