// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/config.hpp"

#include <sstream>

#include "pmtmae/binio.hpp"

namespace pmt {

FlatConfig default_config() {
  FlatConfig c;
  c["seed"] = 0;

  c["model.dim"] = 384;
  c["model.num_patches"] = 64;
  c["model.encoder_blocks"] = 6;
  c["model.decoder_blocks"] = 4;
  c["model.mask_ratio"] = 0.7;
  c["model.heads"] = 6;
  c["model.patch_k"] = 0;  // 0: 2·points/num_patches
  c["model.num_classes"] = 0;  // 0: taken from the dataset
  c["model.points"] = 1024;
  c["model.teacher_dim"] = 0;

  c["train.epochs"] = 40;
  c["train.batch_size"] = 0;  // 0: 32 for pre-training, 24 for fine-tuning
  c["train.lr_max"] = 1.0e-3;
  c["train.lr_min"] = 1.0e-6;
  c["train.weight_decay"] = 0.05;
  c["train.clip"] = false;
  c["train.augment"] = false;
  c["train.checkpoint_every"] = 0;

  c["distill.alpha"] = 1.0;
  c["distill.beta"] = 0.01;
  c["distill.temperature"] = 3.0;

  c["data.classes"] = "sphere,cube,torus,cylinder,cone";
  c["data.points"] = 1024;
  c["data.sigma"] = 0.02;
  c["data.per_class"] = 125;
  c["data.variation"] = 0.0;
  c["data.rotate"] = false;

  c["teacher.dim"] = 384;
  c["teacher.blocks"] = 6;
  c["teacher.heads"] = 6;
  c["teacher.mask_ratio"] = 0.8;
  c["teacher.logits"] = true;

  c["analysis.bins"] = 41;
  c["analysis.masked"] = false;
  return c;
}

namespace {

bool compatible(const nlohmann::ordered_json& want, const nlohmann::ordered_json& got) {
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_integer()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<long long>() >= 0);
  return false;
}

std::string type_name(const nlohmann::ordered_json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_string()) return "a string";
  if (v.is_number_float()) return "a number";
  return "a non-negative integer";
}

template <class T>
T get(const FlatConfig& c, const char* key) {
  auto it = c.find(key);
  if (it == c.end()) fail(ErrorKind::Config, std::string("config: missing key \"") + key + "\"");
  return it->get<T>();
}

}  // namespace

void merge_config(FlatConfig& base, const FlatConfig& src, const std::string& origin) {
  require(src.is_object(), ErrorKind::Config, origin + ": configuration must be a JSON object");
  const FlatConfig defaults = default_config();
  for (auto it = src.begin(); it != src.end(); ++it) {
    auto d = defaults.find(it.key());
    if (d == defaults.end()) fail(ErrorKind::Config, origin + ": unknown key \"" + it.key() + "\"");
    if (!compatible(*d, it.value())) {
      fail(ErrorKind::Config, origin + ": key \"" + it.key() + "\" must be " + type_name(*d));
    }
    base[it.key()] = d->is_number_float() ? nlohmann::ordered_json(it.value().get<double>()) : it.value();
  }
}

FlatConfig resolve_config(const std::string& file, const FlatConfig& overrides) {
  FlatConfig cfg = default_config();
  if (!file.empty()) {
    FlatConfig from_file;
    try {
      from_file = FlatConfig::parse(binio::read_file(file));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Parse, file + ": " + e.what());
    }
    merge_config(cfg, from_file, file);
  }
  if (!overrides.is_null()) merge_config(cfg, overrides, "flags");
  return cfg;
}

ModelConfig model_config(const FlatConfig& c) {
  ModelConfig m;
  m.dim = get<std::size_t>(c, "model.dim");
  m.num_patches = get<std::size_t>(c, "model.num_patches");
  m.encoder_blocks = get<std::size_t>(c, "model.encoder_blocks");
  m.decoder_blocks = get<std::size_t>(c, "model.decoder_blocks");
  m.mask_ratio = get<double>(c, "model.mask_ratio");
  m.heads = get<std::size_t>(c, "model.heads");
  m.points = get<std::size_t>(c, "model.points");
  m.patch_k = get<std::size_t>(c, "model.patch_k");
  if (m.patch_k == 0 && m.num_patches > 0) m.patch_k = std::max<std::size_t>(1, 2 * m.points / m.num_patches);
  m.num_classes = get<std::size_t>(c, "model.num_classes");
  m.teacher_dim = get<std::size_t>(c, "model.teacher_dim");
  // num_classes 0 defers to the dataset; everything else must already be valid.
  ModelConfig probe = m;
  if (probe.num_classes == 0) probe.num_classes = 1;
  probe.validate();
  return m;
}

void store_model_config(FlatConfig& c, const ModelConfig& m) {
  c["model.dim"] = m.dim;
  c["model.num_patches"] = m.num_patches;
  c["model.encoder_blocks"] = m.encoder_blocks;
  c["model.decoder_blocks"] = m.decoder_blocks;
  c["model.mask_ratio"] = m.mask_ratio;
  c["model.heads"] = m.heads;
  c["model.patch_k"] = m.patch_k;
  c["model.num_classes"] = m.num_classes;
  c["model.points"] = m.points;
  c["model.teacher_dim"] = m.teacher_dim;
}

DistillConfig distill_config(const FlatConfig& c) {
  DistillConfig d;
  d.alpha = get<double>(c, "distill.alpha");
  d.beta = get<double>(c, "distill.beta");
  d.temperature = get<double>(c, "distill.temperature");
  d.validate();
  return d;
}

TrainConfig train_config(const FlatConfig& c, Stage stage) {
  TrainConfig t;
  t.epochs = get<int>(c, "train.epochs");
  const auto bs = get<std::size_t>(c, "train.batch_size");
  t.batch_size = bs != 0 ? bs : (stage == Stage::Pretrain ? 32 : 24);
  t.schedule.lr_max = get<double>(c, "train.lr_max");
  t.schedule.lr_min = get<double>(c, "train.lr_min");
  t.schedule.total_epochs = t.epochs;
  t.optim.weight_decay = get<double>(c, "train.weight_decay");
  t.clip = get<bool>(c, "train.clip");
  t.augment = get<bool>(c, "train.augment");
  t.checkpoint_every = get<int>(c, "train.checkpoint_every");
  t.distill = distill_config(c);
  t.seed = get<std::uint64_t>(c, "seed");
  t.validate();
  return t;
}

SyntheticSpec synthetic_spec(const FlatConfig& c) {
  SyntheticSpec s;
  s.classes.clear();
  std::stringstream ss(get<std::string>(c, "data.classes"));
  std::string name;
  while (std::getline(ss, name, ',')) {
    const auto b = name.find_first_not_of(' '), e = name.find_last_not_of(' ');
    if (b == std::string::npos) continue;
    s.classes.push_back(shape_from_name(name.substr(b, e - b + 1)));
  }
  s.points = get<std::size_t>(c, "data.points");
  s.sigma = get<double>(c, "data.sigma");
  s.per_class = get<std::size_t>(c, "data.per_class");
  s.variation = get<double>(c, "data.variation");
  s.rotate = get<bool>(c, "data.rotate");
  s.seed = get<std::uint64_t>(c, "seed");
  s.validate();
  return s;
}

SynthTeacherConfig teacher_config(const FlatConfig& c, const ModelConfig& student) {
  SynthTeacherConfig t;
  t.model = student;
  t.model.dim = get<std::size_t>(c, "teacher.dim");
  t.model.encoder_blocks = get<std::size_t>(c, "teacher.blocks");
  t.model.heads = get<std::size_t>(c, "teacher.heads");
  t.model.teacher_dim = 0;
  t.mask_ratio = get<double>(c, "teacher.mask_ratio");
  t.seed = mix_seed(get<std::uint64_t>(c, "seed"), 0x7465616368ULL);
  return t;
}

}  // namespace pmt
