// SPDX-License-Identifier: Apache-2.0
// Exercises the shared library through its C header only.
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

#include "pmtmae/pmtmae.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kSmall =
    R"({"model.dim": 16, "model.heads": 2, "model.num_patches": 8, "model.points": 64, "model.encoder_blocks": 1,
        "model.decoder_blocks": 1, "model.mask_ratio": 0.5, "data.points": 64, "data.per_class": 4,
        "teacher.dim": 16, "teacher.blocks": 1, "teacher.heads": 2, "train.epochs": 2, "train.batch_size": 8})";

json take(char* s) {
  REQUIRE(s != nullptr);
  auto j = json::parse(s);
  pmt_string_free(s);
  return j;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pmtmae_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("version and configuration resolution") {
  CHECK(std::string(pmt_version()).size() > 0);
  char* out = nullptr;
  REQUIRE(pmt_config_resolve(nullptr, R"({"model.dim": 96})", &out) == PMT_OK);
  const auto cfg = take(out);
  CHECK(cfg["model.dim"] == 96);
  CHECK(cfg["distill.alpha"] == 1.0);

  CHECK(pmt_config_resolve(nullptr, R"({"model.bogus": 1})", &out) == PMT_ERR_USAGE);
  CHECK(std::string(pmt_last_error()).find("model.bogus") != std::string::npos);
  CHECK(pmt_config_resolve(nullptr, "{not json", &out) == PMT_ERR_USAGE);
  CHECK(pmt_config_resolve("/nonexistent/config.json", nullptr, &out) == PMT_ERR_DATA);
  CHECK(pmt_config_resolve(nullptr, nullptr, nullptr) == PMT_ERR_USAGE);
}

TEST_CASE("dataset, model and teacher handles") {
  const auto dir = scratch("handles");
  pmt_dataset* ds = nullptr;
  REQUIRE(pmt_dataset_generate(kSmall, &ds) == PMT_OK);
  char* out = nullptr;
  REQUIRE(pmt_dataset_info(ds, &out) == PMT_OK);
  const auto info = take(out);
  CHECK(info["samples"] == 20);
  CHECK(info["train"] == 15);
  CHECK(info["points"] == 64);

  REQUIRE(pmt_dataset_save(ds, (dir / "data").c_str()) == PMT_OK);
  pmt_dataset* back = nullptr;
  REQUIRE(pmt_dataset_load((dir / "data").c_str(), &back) == PMT_OK);
  pmt_dataset_free(back);
  CHECK(pmt_dataset_load((dir / "missing").c_str(), &back) == PMT_ERR_DATA);

  pmt_model* model = nullptr;
  REQUIRE(pmt_model_create(kSmall, 5, &model) == PMT_OK);
  std::uint64_t count = 0, hash = 0;
  REQUIRE(pmt_model_param_count(model, &count) == PMT_OK);
  REQUIRE(pmt_model_param_hash(model, &hash) == PMT_OK);
  CHECK(count > 0);

  REQUIRE(pmt_evaluate(model, ds, 1, &out) == PMT_OK);
  const auto ev = take(out);
  CHECK(ev["total"] == 5);
  CHECK(ev["confusion"].size() == 5);

  const auto ck = (dir / "m.pmtc").string();
  REQUIRE(pmt_model_save(model, ck.c_str()) == PMT_OK);
  pmt_model* loaded = nullptr;
  REQUIRE(pmt_model_load(ck.c_str(), &loaded) == PMT_OK);
  std::uint64_t hash2 = 0;
  REQUIRE(pmt_model_param_hash(loaded, &hash2) == PMT_OK);
  CHECK(hash2 == hash);
  pmt_model_free(loaded);

  pmt_teacher* teacher = nullptr;
  REQUIRE(pmt_teacher_make(ds, kSmall, &teacher) == PMT_OK);
  REQUIRE(pmt_teacher_info(teacher, &out) == PMT_OK);
  const auto ti = take(out);
  CHECK(ti["records"] == 20);
  CHECK(ti["visible"] == 2);  // teacher ratio 0.8 over 8 tokens
  const auto tp = (dir / "t.pmtt").string();
  REQUIRE(pmt_teacher_save(teacher, tp.c_str()) == PMT_OK);
  pmt_teacher* tl = nullptr;
  REQUIRE(pmt_teacher_load(tp.c_str(), &tl) == PMT_OK);
  pmt_teacher_free(tl);

  // Corrupt the checkpoint magic: data error, message kept.
  {
    std::fstream f(ck, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK(pmt_model_load(ck.c_str(), &loaded) == PMT_ERR_DATA);
  CHECK(std::string(pmt_last_error()).find("magic") != std::string::npos);

  pmt_teacher_free(teacher);
  pmt_model_free(model);
  pmt_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("training through the C API") {
  const auto dir = scratch("train");
  pmt_dataset* ds = nullptr;
  REQUIRE(pmt_dataset_generate(kSmall, &ds) == PMT_OK);
  pmt_model* model = nullptr;
  REQUIRE(pmt_model_create(kSmall, 5, &model) == PMT_OK);
  char* out = nullptr;
  const auto log = (dir / "m.jsonl").string();
  REQUIRE(pmt_pretrain(model, ds, nullptr, kSmall, log.c_str(), nullptr, &out) == PMT_OK);
  const auto m = take(out);
  REQUIRE(m.size() == 2);
  CHECK(m[0]["epoch"] == 1);
  CHECK(fs::exists(log));

  REQUIRE(pmt_finetune(model, ds, nullptr, kSmall, nullptr, nullptr, &out) == PMT_OK);
  CHECK(take(out)[1].contains("test_acc"));

  // A fresh model so the run starts at epoch 1 rather than resuming.
  pmt_model* wild = nullptr;
  REQUIRE(pmt_model_create(kSmall, 5, &wild) == PMT_OK);
  CHECK(pmt_finetune(wild, ds, nullptr, R"({"train.lr_max": 1e30, "train.lr_min": 1e29, "train.epochs": 3})",
                     nullptr, nullptr, &out) == PMT_ERR_NUMERIC);
  pmt_model_free(wild);
  CHECK(pmt_pretrain(nullptr, ds, nullptr, kSmall, nullptr, nullptr, &out) == PMT_ERR_USAGE);

  pmt_model_free(model);
  pmt_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("finite-difference suite and parameter report") {
  char* out = nullptr;
  REQUIRE(pmt_grad_check(3, 2, &out) == PMT_OK);
  const auto g = take(out);
  CHECK(g["ops"].size() == 12);
  for (const auto& row : g["ops"]) CHECK(row["pass"] == true);

  REQUIRE(pmt_param_report(R"({"model.dim": 384})", &out) == PMT_OK);
  const auto r = take(out);
  CHECK(r["per_block_match"] == true);
  CHECK(r["per_block"] == 4 * (384 * 384 + 384) + 2 * (384 * 384 + 384) + (2 * 384 * 1536 + 1536) +
                              (1536 * 384 + 384) + 2 * 384);
  CHECK(r["large"]["total"] > r["small"]["total"]);
  CHECK(pmt_grad_check(3, 0, &out) == PMT_ERR_USAGE);
}
