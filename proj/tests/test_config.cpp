// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "pmtmae/config.hpp"

using namespace pmt;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Contract;
}

}  // namespace

TEST_CASE("defaults carry the published hyperparameters") {
  const auto c = default_config();
  const auto m = model_config(c);
  CHECK(m.dim == 384);
  CHECK(m.num_patches == 64);
  CHECK(m.encoder_blocks == 6);
  CHECK(m.decoder_blocks == 4);
  CHECK(m.mask_ratio == 0.7);
  const auto d = distill_config(c);
  CHECK(d.alpha == 1.0);
  CHECK(d.beta == 0.01);
  CHECK(d.temperature == 3.0);
  const auto p = train_config(c, Stage::Pretrain);
  const auto f = train_config(c, Stage::Finetune);
  CHECK(p.epochs == 40);
  CHECK(p.batch_size == 32);
  CHECK(f.batch_size == 24);
  CHECK(p.schedule.lr_max == 1.0e-3);
  CHECK(p.schedule.lr_min == 1.0e-6);
  CHECK(teacher_config(c, m).mask_ratio == 0.8);
}

TEST_CASE("later sources win and derived defaults follow") {
  auto c = default_config();
  merge_config(c, {{"model.dim", 96}, {"model.points", 512}, {"model.num_patches", 32}, {"train.epochs", 5}},
               "test");
  const auto m = model_config(c);
  CHECK(m.dim == 96);
  CHECK(m.patch_k == 32);  // 2·512/32
  CHECK(train_config(c, Stage::Pretrain).schedule.total_epochs == 5);
  merge_config(c, {{"train.lr_max", 1}}, "ints accepted for reals");
  CHECK(train_config(c, Stage::Finetune).schedule.lr_max == 1.0);
}

TEST_CASE("unknown keys and type mismatches are configuration errors naming the key") {
  auto c = default_config();
  try {
    merge_config(c, {{"model.width", 3}}, "file.json");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("model.width") != std::string::npos);
  }
  CHECK(kind_of([&] { merge_config(c, {{"train.epochs", "many"}}, "x"); }) == ErrorKind::Config);
  CHECK(kind_of([&] { merge_config(c, {{"model.dim", -4}}, "x"); }) == ErrorKind::Config);
  CHECK(kind_of([&] { merge_config(c, {{"data.rotate", 1}}, "x"); }) == ErrorKind::Config);
}

TEST_CASE("invalid values fail when the typed config is built") {
  auto c = default_config();
  merge_config(c, {{"model.mask_ratio", 1.5}}, "x");
  CHECK(kind_of([&] { model_config(c); }) == ErrorKind::Config);
  c = default_config();
  merge_config(c, {{"distill.temperature", 0.0}}, "x");
  CHECK(kind_of([&] { distill_config(c); }) == ErrorKind::Config);
  c = default_config();
  merge_config(c, {{"data.classes", "sphere,blob"}}, "x");
  CHECK_THROWS_AS(synthetic_spec(c), Error);
}

TEST_CASE("model config round trips through the flat form") {
  auto c = default_config();
  ModelConfig m;
  m.dim = 48;
  m.heads = 4;
  m.encoder_blocks = 3;
  m.num_classes = 7;
  m.patch_k = 20;
  m.teacher_dim = 64;
  store_model_config(c, m);
  const auto back = model_config(c);
  CHECK(back.dim == 48);
  CHECK(back.heads == 4);
  CHECK(back.encoder_blocks == 3);
  CHECK(back.num_classes == 7);
  CHECK(back.patch_k == 20);
  CHECK(back.teacher_dim == 64);
}
