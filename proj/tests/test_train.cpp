// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pmtmae/data.hpp"
#include "pmtmae/distill.hpp"
#include "pmtmae/train.hpp"

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
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.num_classes = 5;
  c.mask_ratio = 0.5;
  return c;
}

struct Setup {
  Dataset ds;
  std::vector<PatchedSample> train, test;
  Setup() {
    SyntheticSpec s;
    s.points = 64;
    s.per_class = 5;
    s.seed = 2;
    ds = gen_synthetic(s);
    train = prepare_patches(ds, Split::Train, tiny_model());
    test = prepare_patches(ds, Split::Test, tiny_model());
  }
};

TrainConfig tiny_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.schedule.total_epochs = epochs;
  t.seed = 3;
  return t;
}

std::string log_of(const std::vector<EpochMetrics>& m) {
  std::string s;
  for (const auto& e : m) s += e.json_line() + "\n";
  return s;
}

TeacherTable make_teacher(const std::vector<PatchedSample>& samples, bool logits) {
  auto m = tiny_model();
  m.dim = 24;
  m.heads = 2;
  SynthTeacher t({m, 0.75, 9});
  TeacherTable table;
  for (const auto& s : samples) table[s.id] = t.record(s.id, s.patches, logits);
  return table;
}

}  // namespace

TEST_CASE("pretraining without a teacher reduces the loss and is reproducible") {
  Setup s;
  auto run = [&] {
    Model<float> model(tiny_model(), 1);
    auto cfg = tiny_train(4);
    auto st = make_train_state(model, cfg);
    return pretrain(model, {&s.train, &s.test, nullptr}, cfg, st);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == 4);
  CHECK(log_of(a) == log_of(b));
  CHECK(a.back().get("loss") < a.front().get("loss"));
  CHECK_FALSE(a.front().has("feat"));
  CHECK(a.front().has("heldout_recon"));
  for (const auto& e : a) CHECK(e.lr == cosine_lr(e.epoch - 1, tiny_train(4).schedule));
}

TEST_CASE("pretraining with teacher records adds the feature term and follows teacher masks") {
  Setup s;
  const auto teacher = make_teacher(s.train, false);
  auto mcfg = tiny_model();
  mcfg.teacher_dim = 24;
  Model<float> model(mcfg, 1);
  auto cfg = tiny_train(2);
  auto st = make_train_state(model, cfg);
  const auto m = pretrain(model, {&s.train, nullptr, &teacher}, cfg, st);
  REQUIRE(m.front().has("feat"));
  CHECK(m.front().get("loss") == doctest::Approx(m.front().get("feat") + m.front().get("recon")));

  cfg.distill.alpha = 0.0;
  Model<float> m0(mcfg, 1);
  auto st0 = make_train_state(m0, cfg);
  const auto z = pretrain(m0, {&s.train, nullptr, &teacher}, cfg, st0);
  CHECK(z.front().get("loss") == doctest::Approx(z.front().get("recon")));

  TeacherTable partial = teacher;
  partial.erase(partial.begin());
  Model<float> m2(mcfg, 1);
  auto st2 = make_train_state(m2, cfg);
  try {
    pretrain(m2, {&s.train, nullptr, &partial}, cfg, st2);
    FAIL("expected a missing-teacher error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingTeacher);
  }
}

TEST_CASE("fine-tuning requires teacher logits only when beta is positive") {
  Setup s;
  const auto teacher = make_teacher(s.train, false);
  Model<float> model(tiny_model(), 1);
  auto cfg = tiny_train(1);
  auto st = make_train_state(model, cfg);
  CHECK_THROWS_AS(finetune(model, {&s.train, nullptr, &teacher}, cfg, st), Error);

  cfg.distill.beta = 0.0;
  Model<float> m2(tiny_model(), 1);
  auto st2 = make_train_state(m2, cfg);
  const auto m = finetune(m2, {&s.train, &s.test, &teacher}, cfg, st2);
  CHECK(m.front().get("loss") == doctest::Approx(m.front().get("ce")));

  const auto with_logits = make_teacher(s.train, true);
  cfg.distill.beta = 0.01;
  Model<float> m3(tiny_model(), 1);
  auto st3 = make_train_state(m3, cfg);
  const auto l = finetune(m3, {&s.train, &s.test, &with_logits}, cfg, st3);
  CHECK(l.front().get("loss") == doctest::Approx(0.01 * l.front().get("logit") + l.front().get("ce")));
}

TEST_CASE("evaluation: constant predictor, identities and purity") {
  Setup s;
  Model<float> model(tiny_model(), 1);
  auto w = model.params().get("head.fc2.weight");
  auto b = model.params().get("head.fc2.bias");
  for (float& v : w.mutable_data()) v = 0.0f;
  for (float& v : b.mutable_data()) v = 0.0f;
  b.mutable_data()[2] = 1.0f;
  const auto hash = model.params().hash();
  const auto r = evaluate(model, s.test, 4);
  CHECK(r.accuracy == doctest::Approx(0.2));
  CHECK(r.total == 5);
  std::size_t diag = 0;
  for (std::size_t c = 0; c < 5; ++c) {
    diag += r.confusion[c][c];
    CHECK(r.confusion[c][2] == 1);
  }
  CHECK(static_cast<double>(diag) / static_cast<double>(r.total) == r.accuracy);
  const auto again = evaluate(model, s.test, 3);
  CHECK(again.ce == doctest::Approx(r.ce).epsilon(1e-6));
  CHECK(model.params().hash() == hash);

  auto logits = nd::Tensor<float>::from({2, 3}, {1, 1, 0, 0, 2, 2});
  CHECK(predict(logits) == std::vector<int>{0, 1});
}

TEST_CASE("checkpoint round trip reproduces forward outputs bitwise") {
  Setup s;
  Model<float> model(tiny_model(), 4);
  auto cfg = tiny_train(1);
  auto st = make_train_state(model, cfg);
  finetune(model, {&s.train, nullptr, nullptr}, tiny_train(1), st);
  const auto ck = capture(model, &st, nlohmann::ordered_json{{"model.dim", 16}});
  const auto bytes = encode_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "PMTC");
  const auto back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.epoch == 1);
  CHECK(back.config.at("optimizer.step").get<std::uint64_t>() == st.opt.steps());
  // Fine-tuning never updates the decoder, so only touched parameters carry moments.
  std::size_t touched = 0;
  for (const auto& spec : model.params().specs()) touched += spec.name.rfind("decoder.", 0) != 0;
  CHECK(back.moments.size() == 2 * touched);

  Model<float> other(tiny_model(), 99);
  restore_params(other, back);
  CHECK(other.params().hash() == model.params().hash());
  const auto a = evaluate(model, s.test);
  const auto b = evaluate(other, s.test);
  CHECK(a.ce == b.ce);
}

TEST_CASE("checkpoint decoding rejects corrupt files") {
  Model<float> model(tiny_model(), 4);
  const auto bytes = encode_checkpoint(capture(model, nullptr, nlohmann::ordered_json::object()));
  auto expect = [](const std::string& b, const char* needle) {
    try {
      decode_checkpoint(b);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  auto magic = bytes;
  magic[3] = 'X';
  expect(magic, "magic");
  auto version = bytes;
  version[4] = 7;
  expect(version, "version");
  expect(bytes.substr(0, bytes.size() / 2), "truncated");
}

TEST_CASE("restoring into a different architecture names the parameter") {
  auto big = tiny_model();
  big.encoder_blocks = 2;
  Model<float> l(big, 1);
  Model<float> s(tiny_model(), 1);
  const auto ck = capture(l, nullptr, nlohmann::ordered_json::object());
  try {
    restore_params(s, ck);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
    CHECK(std::string(e.what()).find("encoder.blocks.1") != std::string::npos);
  }
  auto wide = tiny_model();
  wide.dim = 32;
  Model<float> w(wide, 1);
  try {
    restore_params(s, capture(w, nullptr, nlohmann::ordered_json::object()));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
    CHECK(std::string(e.what()).find("tokenizer.fc3.weight") != std::string::npos);
  }
}

TEST_CASE("resumed training continues the unbroken loss trace exactly") {
  Setup s;
  const TrainData data{&s.train, &s.test, nullptr};
  const auto cfg = tiny_train(4);

  Model<float> full(tiny_model(), 6);
  auto fst = make_train_state(full, cfg);
  const auto unbroken = pretrain(full, data, cfg, fst);

  Model<float> first(tiny_model(), 6);
  auto st = make_train_state(first, cfg);
  std::vector<EpochMetrics> part;
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochMetrics& m) { return m.epoch < 2; };
  part = pretrain(first, data, cfg, st, hooks);
  REQUIRE(part.size() == 2);
  const auto bytes = encode_checkpoint(capture(first, &st, nlohmann::ordered_json::object()));

  const auto ck = decode_checkpoint(bytes);
  Model<float> resumed(tiny_model(), 1234);
  restore_params(resumed, ck);
  auto rst = make_train_state(resumed, cfg);
  restore_state(rst, ck);
  CHECK(rst.epoch == 2);
  const auto rest = pretrain(resumed, data, cfg, rst);
  part.insert(part.end(), rest.begin(), rest.end());
  CHECK(log_of(part) == log_of(unbroken));
  CHECK(resumed.params().hash() == full.params().hash());
}

TEST_CASE("checkpoints and metric logs are written on cadence") {
  Setup s;
  const auto dir = fs::temp_directory_path() / "pmtmae_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cfg = tiny_train(3);
  cfg.checkpoint_every = 2;
  Model<float> model(tiny_model(), 2);
  auto st = make_train_state(model, cfg);
  TrainHooks hooks;
  hooks.metric_log = (dir / "m.jsonl").string();
  hooks.checkpoint_dir = dir.string();
  const auto m = finetune(model, {&s.train, &s.test, nullptr}, cfg, st, hooks);
  CHECK(fs::exists(dir / "finetune-epoch2.pmtc"));
  CHECK_FALSE(fs::exists(dir / "finetune-epoch1.pmtc"));
  std::ifstream in(dir / "m.jsonl");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == log_of(m));
  fs::remove_all(dir);
}

TEST_CASE("a diverging run stops with a numeric error") {
  Setup s;
  auto cfg = tiny_train(2);
  cfg.schedule.lr_max = 1e30;
  cfg.schedule.lr_min = 1e29;
  Model<float> model(tiny_model(), 2);
  auto st = make_train_state(model, cfg);
  try {
    finetune(model, {&s.train, nullptr, nullptr}, cfg, st);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("train config validation") {
  auto c = tiny_train(2);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_train(2);
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}
