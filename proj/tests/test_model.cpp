// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "helpers.hpp"
#include "pmtmae/gradcheck.hpp"
#include "pmtmae/model.hpp"

using namespace pmt;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.num_patches = 8;
  c.patch_k = 8;
  c.points = 64;
  c.encoder_blocks = 2;
  c.decoder_blocks = 1;
  c.num_classes = 3;
  c.mask_ratio = 0.5;
  return c;
}

std::vector<PatchSet> patch_sets(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<PatchSet> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto cloud = normalize(fixture::random_cloud(cfg.points, rng));
    out.push_back(make_patches(cloud, cfg.num_patches, cfg.patch_k, seed + i));
  }
  return out;
}

std::vector<const PatchSet*> ptrs(const std::vector<PatchSet>& v) {
  std::vector<const PatchSet*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

template <class T>
bool same(const nd::Tensor<T>& a, const nd::Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("make_mask examples") {
  auto p = make_mask(64, 0.7, 1);
  CHECK(p.masked.size() == 44);
  CHECK(p.visible.size() == 20);
  auto q = make_mask(10, 0.5, 2);
  CHECK(q.masked.size() == 5);
  auto r = make_mask(64, 0.7, 1);
  CHECK(p.masked == r.masked);
  CHECK(p.source == MaskPlan::Source::Random);
  CHECK_THROWS_AS(make_mask(4, 0.2, 0), Error);  // floor gives zero masked
  CHECK_THROWS_AS(make_mask(1, 0.5, 0), Error);
}

TEST_CASE("mask plans partition the token positions") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> kd(2, 128);
  std::uniform_real_distribution<double> rd(0.01, 0.99);
  int checked = 0;
  while (checked < 300) {
    const std::size_t k = kd(rng);
    const double ratio = rd(rng);
    const std::size_t m = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(k)));
    if (m == 0 || m == k) continue;
    auto p = make_mask(k, ratio, rng());
    CHECK(p.masked.size() == m);
    CHECK(masked_count(k, ratio) == m);
    std::vector<std::size_t> all(p.visible);
    all.insert(all.end(), p.masked.begin(), p.masked.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < k; ++i) CHECK(all[i] == i);
    CHECK(std::is_sorted(p.visible.begin(), p.visible.end()));
    CHECK(std::is_sorted(p.masked.begin(), p.masked.end()));
    ++checked;
  }
}

TEST_CASE("mask_from_teacher mirrors the flags") {
  std::vector<bool> flags(10, false);
  for (std::size_t i : {0u, 2u, 3u, 5u, 6u, 7u, 8u, 9u}) flags[i] = true;  // 0.8 of 10
  auto p = mask_from_teacher(flags);
  CHECK(p.masked.size() == 8);
  CHECK(p.source == MaskPlan::Source::Teacher);
  CHECK(p.flags() == flags);
  CHECK(mask_from_teacher(p.flags()).masked == p.masked);
  CHECK_THROWS_AS(mask_from_teacher(std::vector<bool>(5, true)), Error);
  CHECK_THROWS_AS(mask_from_teacher(std::vector<bool>(5, false)), Error);
}

TEST_CASE("encoder output ignores masked patch contents") {
  const auto cfg = tiny();
  Model<float> model(cfg, 7);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto sets = patch_sets(cfg, 2, seed);
    std::vector<MaskPlan> plans{make_mask(8, 0.5, seed), make_mask(8, 0.5, seed + 100)};
    auto base = model.encode(ptrs(sets), plans);
    CHECK(base.visible == 4);
    CHECK(base.tokens.shape() == nd::Shape{2 * 4, 16});
    CHECK(base.cls.shape() == nd::Shape{2, 16});

    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 5.0f);
    auto noisy = sets;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t m : plans[b].masked) {
        for (std::size_t j = 0; j < cfg.patch_k; ++j)
          for (auto& v : noisy[b].patches[m * cfg.patch_k + j]) v = g(rng);
        for (auto& v : noisy[b].centers[m]) v = g(rng);
      }
    }
    auto after = model.encode(ptrs(noisy), plans);
    CHECK(same(base.tokens, after.tokens));
    CHECK(same(base.cls, after.cls));
  }
}

TEST_CASE("encoder traces: one per block, and recording them changes nothing") {
  const auto cfg = tiny();
  Model<float> model(cfg, 7);
  auto sets = patch_sets(cfg, 2, 1);
  std::vector<MaskPlan> plans{full_visibility(8), full_visibility(8)};
  auto plain = model.encode(ptrs(sets), plans, false);
  auto traced = model.encode(ptrs(sets), plans, true);
  CHECK(plain.traces.empty());
  REQUIRE(traced.traces.size() == cfg.encoder_blocks);
  CHECK(traced.traces[0].attn_out.shape() == nd::Shape{2 * 8, 16});
  CHECK(same(plain.tokens, traced.tokens));
}

TEST_CASE("decoder shape, mask token gradient and positional conditioning") {
  const auto cfg = tiny();
  Model<float> model(cfg, 9);
  auto sets = patch_sets(cfg, 2, 4);
  std::vector<MaskPlan> plans{make_mask(8, 0.5, 1), make_mask(8, 0.5, 2)};
  auto enc = model.encode(ptrs(sets), plans);
  auto pred = model.decode(enc, ptrs(sets), plans);
  CHECK(pred.shape() == nd::Shape{2, 4, 8, 3});

  auto target = masked_patch_targets<float>(ptrs(sets), plans);
  CHECK(target.shape() == nd::Shape{2 * 4 * 8, 3});
  auto loss = chamfer_l2_patches(nd::reshape(pred, {2 * 4 * 8, 3}), target, 2 * 4);
  nd::backward(loss);
  const auto& mt = model.params().get("decoder.mask_token");
  REQUIRE(mt.has_grad());
  CHECK(std::any_of(mt.grad().begin(), mt.grad().end(), [](float g) { return g != 0.0f; }));
  model.params().zero_grad();

  // Moving a masked center moves its prediction and leaves the encoder alone.
  auto moved = sets;
  const std::size_t m = plans[0].masked[0];
  moved[0].centers[m] = {0.9f, -0.9f, 0.5f};
  auto enc2 = model.encode(ptrs(moved), plans);
  CHECK(same(enc.tokens, enc2.tokens));
  auto pred2 = model.decode(enc2, ptrs(moved), plans);
  bool changed = false;
  for (std::size_t i = 0; i < 8 * 3; ++i) changed |= pred2.at(i) != pred.at(i);
  CHECK(changed);
}

TEST_CASE("classifier: shape and invariance to patch order") {
  const auto cfg = tiny();
  Model<float> model(cfg, 11);
  auto sets = patch_sets(cfg, 2, 5);
  std::vector<MaskPlan> plans{full_visibility(8), full_visibility(8)};
  auto logits = model.classify(model.encode(ptrs(sets), plans));
  CHECK(logits.shape() == nd::Shape{2, 3});
  CHECK(model.classify_features(model.encode(ptrs(sets), plans)).shape() == nd::Shape{2, 48});

  auto shuffled = sets;
  std::vector<std::size_t> perm{5, 3, 0, 7, 1, 6, 2, 4};
  for (std::size_t b = 0; b < 2; ++b) {
    PatchSet p = sets[b];
    for (std::size_t g = 0; g < 8; ++g) {
      p.centers[g] = sets[b].centers[perm[g]];
      for (std::size_t j = 0; j < cfg.patch_k; ++j) {
        p.patches[g * cfg.patch_k + j] = sets[b].patches[perm[g] * cfg.patch_k + j];
        p.source_indices[g * cfg.patch_k + j] = sets[b].source_indices[perm[g] * cfg.patch_k + j];
      }
    }
    shuffled[b] = p;
  }
  auto logits2 = model.classify(model.encode(ptrs(shuffled), plans));
  for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(logits2.at(i) == doctest::Approx(logits.at(i)).epsilon(1e-4));
}

TEST_CASE("gradient check through the classification head") {
  auto cfg = tiny();
  cfg.dim = 8;
  cfg.encoder_blocks = 1;
  Model<double> model(cfg, 13);
  auto sets = patch_sets(cfg, 2, 6);
  std::vector<MaskPlan> plans{full_visibility(8), full_visibility(8)};
  std::mt19937_64 rng(2);
  auto r = fixture::randn<double>({2, 3}, rng, 1.0, false);
  std::vector<nd::Tensor<double>> inputs;
  for (const char* n : {"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias", "encoder.cls_token",
                        "encoder.norm.weight"})
    inputs.push_back(model.params().get(n));
  const double err = grad_rel_error(
      inputs, [&] { return nd::sum(nd::mul(model.classify(model.encode(ptrs(sets), plans)), r)); });
  CHECK(err < kGradTolerance);
}

TEST_CASE("model construction is deterministic per seed") {
  const auto cfg = tiny();
  Model<float> a(cfg, 21), b(cfg, 21), c(cfg, 22);
  CHECK(a.params().hash() == b.params().hash());
  CHECK(a.params().hash() != c.params().hash());
}

TEST_CASE("parameter counts") {
  ModelConfig s;  // 6 encoder blocks at 384
  ModelConfig l = s;
  l.encoder_blocks = 12;
  const auto cs = count_params(s);
  const auto cl = count_params(l);
  CHECK(cl.total > cs.total);
  CHECK(cs.per_block == dual_block_param_count(384));
  CHECK(cl.classifier - cs.classifier == 6 * cs.per_block);
  CHECK(cs.total == count_scalars(model_layout(s)));
  CHECK(Model<float>(tiny(), 1).params().scalar_count() == count_params(tiny()).total);
}

TEST_CASE("projector exists only when the teacher width differs") {
  auto cfg = tiny();
  cfg.teacher_dim = 32;
  Model<float> m(cfg, 1);
  CHECK(m.params().contains("distill.proj.weight"));
  auto t = m.project(nd::Tensor<float>::zeros({3, 16}));
  CHECK(t.shape() == nd::Shape{3, 32});
  cfg.teacher_dim = 16;
  CHECK_FALSE(Model<float>(cfg, 1).params().contains("distill.proj.weight"));
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.mask_ratio = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}
