// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace pmt {

using nd::Tensor;

void TrainConfig::validate() const {
  require(epochs >= 1, ErrorKind::Config, "train.epochs must be at least 1");
  require(batch_size >= 1, ErrorKind::Config, "train.batch_size must be at least 1");
  require(checkpoint_every >= 0, ErrorKind::Config, "train.checkpoint_every must be >= 0");
  require(clip_norm > 0.0, ErrorKind::Config, "train.clip_norm must be positive");
  schedule.validate();
  distill.validate();
}

TrainState make_train_state(Model<float>& model, const TrainConfig& cfg) {
  TrainState s;
  s.rng.seed(mix_seed(cfg.seed, 0x747261696eULL));
  std::vector<bool> decay;
  for (const auto& spec : model.params().specs()) decay.push_back(spec.decay);
  s.opt = AdamW(model.params().tensors(), std::move(decay), cfg.optim);
  return s;
}

double EpochMetrics::get(const std::string& name) const {
  for (const auto& [k, v] : values)
    if (k == name) return v;
  fail(ErrorKind::Contract, "metrics: no value named \"" + name + "\"");
}

bool EpochMetrics::has(const std::string& name) const {
  return std::any_of(values.begin(), values.end(), [&](const auto& kv) { return kv.first == name; });
}

std::string EpochMetrics::json_line() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  for (const auto& [k, v] : values) j[k] = v;
  return j.dump();
}

namespace {

struct Batch {
  std::vector<const PatchSet*> patches;
  std::vector<std::uint64_t> ids;
  std::vector<int> labels;
};

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 g(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), g);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

PatchSet scaled(const PatchSet& ps, float s) {
  PatchSet out = ps;
  for (auto& c : out.centers)
    for (float& v : c) v *= s;
  for (auto& p : out.patches)
    for (float& v : p) v *= s;
  return out;
}

const TeacherRecord& teacher_record(const TeacherTable& table, std::uint64_t id) {
  auto it = table.find(id);
  if (it == table.end()) fail(ErrorKind::MissingTeacher, "no teacher record for sample " + std::to_string(id));
  return it->second;
}

std::size_t teacher_width(const ModelConfig& cfg) { return cfg.has_projector() ? cfg.teacher_dim : cfg.dim; }

Tensor<float> teacher_features(const TeacherTable& table, const std::vector<std::uint64_t>& ids,
                               const ModelConfig& cfg) {
  const std::size_t width = teacher_width(cfg);
  std::vector<float> rows;
  std::size_t count = 0;
  for (auto id : ids) {
    const auto& rec = teacher_record(table, id);
    if (rec.feature_dim != width) {
      fail(ErrorKind::Dimension, "teacher record " + std::to_string(id) + " has feature width " +
                                     std::to_string(rec.feature_dim) + ", student projects to " +
                                     std::to_string(width));
    }
    rows.insert(rows.end(), rec.features.begin(), rec.features.end());
    count += rec.visible_count();
  }
  return Tensor<float>::from({count, width}, std::move(rows));
}

Tensor<float> teacher_logits(const TeacherTable& table, const std::vector<std::uint64_t>& ids, std::size_t classes) {
  std::vector<float> rows;
  for (auto id : ids) {
    const auto& rec = teacher_record(table, id);
    if (rec.logits.empty()) fail(ErrorKind::MissingTeacher, "teacher record " + std::to_string(id) + " has no logits");
    if (rec.logits.size() != classes) {
      fail(ErrorKind::Dimension, "teacher record " + std::to_string(id) + " has " + std::to_string(rec.logits.size()) +
                                     " logits, model has " + std::to_string(classes) + " classes");
    }
    rows.insert(rows.end(), rec.logits.begin(), rec.logits.end());
  }
  return Tensor<float>::from({ids.size(), classes}, std::move(rows));
}

void check_finite(double v, const char* stage, int epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    fail(ErrorKind::Numeric, std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch));
  }
}

void emit(const EpochMetrics& m, const TrainHooks& hooks) {
  if (hooks.metric_log.empty()) return;
  const auto parent = std::filesystem::path(hooks.metric_log).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(hooks.metric_log, std::ios::app);
  if (!out) fail(ErrorKind::Io, "cannot append to " + hooks.metric_log);
  out << m.json_line() << '\n';
}

void maybe_checkpoint(const Model<float>& model, const TrainState& state, const TrainConfig& cfg,
                      const TrainHooks& hooks, const char* stage) {
  if (cfg.checkpoint_every <= 0 || hooks.checkpoint_dir.empty()) return;
  if (state.epoch % cfg.checkpoint_every != 0 && state.epoch != cfg.epochs) return;
  auto snap = hooks.config_snapshot.is_null() ? nlohmann::ordered_json::object() : hooks.config_snapshot;
  snap["stage"] = stage;
  save_checkpoint((std::filesystem::path(hooks.checkpoint_dir) / (std::string(stage) + "-epoch" +
                                                                  std::to_string(state.epoch) + ".pmtc"))
                      .string(),
                  capture(model, &state, snap));
}

struct PretrainTerms {
  Tensor<float> total;
  double recon = 0.0;
  double feat = 0.0;
};

PretrainTerms pretrain_terms(const Model<float>& model, const std::vector<const PatchSet*>& batch,
                             const std::vector<std::uint64_t>& ids, const std::vector<MaskPlan>& plans,
                             const TeacherTable* teacher, double alpha) {
  const auto& mc = model.config();
  auto enc = model.encode(batch, plans);
  auto recon = model.decode(enc, batch, plans);
  const std::size_t groups = batch.size() * plans[0].masked.size();
  auto target = masked_patch_targets<float>(batch, plans);
  auto recon_loss = chamfer_l2_patches(nd::reshape(recon, {groups * mc.patch_k, 3}), target, groups);
  PretrainTerms t;
  t.recon = recon_loss.item();
  if (teacher != nullptr) {
    auto feat = feat_distill_loss(model.project(enc.tokens), teacher_features(*teacher, ids, mc), batch.size());
    t.feat = feat.item();
    t.total = pretrain_loss(feat, recon_loss, alpha);
  } else {
    t.total = recon_loss;
  }
  return t;
}

std::vector<MaskPlan> teacher_plans(const TeacherTable& teacher, const std::vector<std::uint64_t>& ids) {
  std::vector<MaskPlan> plans;
  for (auto id : ids) plans.push_back(mask_from_teacher(teacher_record(teacher, id).mask_flags));
  return plans;
}

void check_teacher_coverage(const TeacherTable* teacher, const std::vector<PatchedSample>& samples) {
  if (teacher == nullptr) return;
  for (const auto& s : samples) teacher_record(*teacher, s.id);
}

}  // namespace

std::vector<int> predict(const Tensor<float>& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows);
  auto d = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (d[r * cols + c] > d[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<EpochMetrics> pretrain(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                                   TrainState& state, const TrainHooks& hooks) {
  cfg.validate();
  require(data.train != nullptr && !data.train->empty(), ErrorKind::Contract, "pretrain: empty training set");
  check_teacher_coverage(data.teacher, *data.train);
  if (data.heldout != nullptr) check_teacher_coverage(data.teacher, *data.heldout);
  const auto& mc = model.config();
  auto params = model.params().tensors();
  std::uniform_real_distribution<float> scale(0.8f, 1.2f);

  std::vector<EpochMetrics> log;
  while (state.epoch < cfg.epochs) {
    const int epoch = state.epoch + 1;
    const double lr = cosine_lr(epoch - 1, cfg.schedule);
    double sum_total = 0.0, sum_recon = 0.0, sum_feat = 0.0;
    std::size_t seen = 0, bi = 0;
    for (const auto& idx : epoch_batches(data.train->size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<PatchSet> augmented;
      std::vector<const PatchSet*> batch;
      std::vector<std::uint64_t> ids;
      augmented.reserve(idx.size());
      for (auto i : idx) {
        const auto& s = (*data.train)[i];
        if (cfg.augment) {
          augmented.push_back(scaled(s.patches, scale(state.rng)));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s.patches);
        }
        ids.push_back(s.id);
      }
      std::vector<MaskPlan> plans;
      if (data.teacher != nullptr) {
        plans = teacher_plans(*data.teacher, ids);
      } else {
        for (std::size_t b = 0; b < batch.size(); ++b) plans.push_back(make_mask(mc.num_patches, mc.mask_ratio, state.rng()));
      }
      auto terms = pretrain_terms(model, batch, ids, plans, data.teacher, cfg.distill.alpha);
      const double total = terms.total.item();
      check_finite(total, "pretrain", epoch, bi);
      nd::backward(terms.total);
      if (cfg.clip) clip_grad_norm(params, cfg.clip_norm);
      state.opt.step(lr);
      const double n = static_cast<double>(batch.size());
      sum_total += total * n;
      sum_recon += terms.recon * n;
      sum_feat += terms.feat * n;
      seen += batch.size();
      ++bi;
    }
    state.epoch = epoch;
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const double n = static_cast<double>(seen);
    m.values.emplace_back("loss", sum_total / n);
    m.values.emplace_back("recon", sum_recon / n);
    if (data.teacher != nullptr) m.values.emplace_back("feat", sum_feat / n);
    if (data.heldout != nullptr) {
      auto score = score_pretrain(model, *data.heldout, data.teacher, cfg);
      m.values.emplace_back("heldout_recon", score.recon);
      if (data.teacher != nullptr) m.values.emplace_back("heldout_feat", score.feat);
    }
    emit(m, hooks);
    log.push_back(m);
    maybe_checkpoint(model, state, cfg, hooks, "pretrain");
    if (hooks.on_epoch && !hooks.on_epoch(m)) break;
  }
  return log;
}

PretrainScore score_pretrain(const Model<float>& model, const std::vector<PatchedSample>& samples,
                             const TeacherTable* teacher, const TrainConfig& cfg) {
  nd::NoGradGuard ng;
  require(!samples.empty(), ErrorKind::Contract, "score: empty sample set");
  const auto& mc = model.config();
  PretrainScore out;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < samples.size(); i += cfg.batch_size) {
    std::vector<const PatchSet*> batch;
    std::vector<std::uint64_t> ids;
    std::vector<MaskPlan> plans;
    for (std::size_t j = i; j < std::min(samples.size(), i + cfg.batch_size); ++j) {
      batch.push_back(&samples[j].patches);
      ids.push_back(samples[j].id);
      if (teacher == nullptr)
        plans.push_back(make_mask(mc.num_patches, mc.mask_ratio, mix_seed(cfg.seed ^ 0x686f6c64ULL, samples[j].id)));
    }
    if (teacher != nullptr) plans = teacher_plans(*teacher, ids);
    auto terms = pretrain_terms(model, batch, ids, plans, teacher, cfg.distill.alpha);
    const double n = static_cast<double>(batch.size());
    out.recon += terms.recon * n;
    out.feat += terms.feat * n;
    out.total += terms.total.item() * n;
    seen += batch.size();
  }
  out.recon /= static_cast<double>(seen);
  out.feat /= static_cast<double>(seen);
  out.total /= static_cast<double>(seen);
  return out;
}

std::vector<EpochMetrics> finetune(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                                   TrainState& state, const TrainHooks& hooks) {
  cfg.validate();
  require(data.train != nullptr && !data.train->empty(), ErrorKind::Contract, "finetune: empty training set");
  const auto& mc = model.config();
  const bool logit_term = data.teacher != nullptr && cfg.distill.beta > 0.0;
  if (logit_term) {
    for (const auto& s : *data.train) {
      if (teacher_record(*data.teacher, s.id).logits.empty())
        fail(ErrorKind::MissingTeacher, "teacher record " + std::to_string(s.id) + " has no logits");
    }
  }
  for (const auto& s : *data.train) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= mc.num_classes)
      fail(ErrorKind::Contract, "finetune: label " + std::to_string(s.label) + " of sample " + std::to_string(s.id) +
                                    " outside [0, " + std::to_string(mc.num_classes) + ")");
  }
  auto params = model.params().tensors();
  std::uniform_real_distribution<float> scale(0.8f, 1.2f);
  const MaskPlan full = full_visibility(mc.num_patches);

  std::vector<EpochMetrics> log;
  while (state.epoch < cfg.epochs) {
    const int epoch = state.epoch + 1;
    const double lr = cosine_lr(epoch - 1, cfg.schedule);
    double sum_total = 0.0, sum_ce = 0.0, sum_logit = 0.0;
    std::size_t seen = 0, correct = 0, bi = 0;
    for (const auto& idx : epoch_batches(data.train->size(), cfg.batch_size, cfg.seed, epoch)) {
      std::vector<PatchSet> augmented;
      std::vector<const PatchSet*> batch;
      std::vector<std::uint64_t> ids;
      std::vector<int> labels;
      augmented.reserve(idx.size());
      for (auto i : idx) {
        const auto& s = (*data.train)[i];
        if (cfg.augment) {
          augmented.push_back(scaled(s.patches, scale(state.rng)));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s.patches);
        }
        ids.push_back(s.id);
        labels.push_back(s.label);
      }
      const std::vector<MaskPlan> plans(batch.size(), full);
      auto logits = model.classify(model.encode(batch, plans));
      auto ce = ce_loss(logits, std::span<const int>(labels));
      Tensor<float> total = ce;
      double logit_value = 0.0;
      if (logit_term) {
        auto kd = logit_distill_loss(logits, teacher_logits(*data.teacher, ids, mc.num_classes),
                                     cfg.distill.temperature);
        logit_value = kd.item();
        total = finetune_loss(kd, ce, cfg.distill.beta);
      }
      const double tv = total.item();
      check_finite(tv, "finetune", epoch, bi);
      const auto pred = predict(logits);
      for (std::size_t b = 0; b < pred.size(); ++b) correct += pred[b] == labels[b] ? 1 : 0;
      nd::backward(total);
      if (cfg.clip) clip_grad_norm(params, cfg.clip_norm);
      state.opt.step(lr);
      const double n = static_cast<double>(batch.size());
      sum_total += tv * n;
      sum_ce += ce.item() * n;
      sum_logit += logit_value * n;
      seen += batch.size();
      ++bi;
    }
    state.epoch = epoch;
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const double n = static_cast<double>(seen);
    m.values.emplace_back("loss", sum_total / n);
    m.values.emplace_back("ce", sum_ce / n);
    if (logit_term) m.values.emplace_back("logit", sum_logit / n);
    m.values.emplace_back("train_acc", static_cast<double>(correct) / n);
    if (data.heldout != nullptr && !data.heldout->empty()) {
      auto ev = evaluate(model, *data.heldout, cfg.batch_size);
      m.values.emplace_back("test_acc", ev.accuracy);
      m.values.emplace_back("test_ce", ev.ce);
    }
    emit(m, hooks);
    log.push_back(m);
    maybe_checkpoint(model, state, cfg, hooks, "finetune");
    if (hooks.on_epoch && !hooks.on_epoch(m)) break;
  }
  return log;
}

EvalResult evaluate(const Model<float>& model, const std::vector<PatchedSample>& samples, std::size_t batch_size) {
  nd::NoGradGuard ng;
  require(batch_size >= 1, ErrorKind::Contract, "evaluate: batch size must be positive");
  const auto& mc = model.config();
  EvalResult r;
  r.confusion.assign(mc.num_classes, std::vector<std::size_t>(mc.num_classes, 0));
  const MaskPlan full = full_visibility(mc.num_patches);
  std::size_t correct = 0;
  double ce_sum = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    std::vector<const PatchSet*> batch;
    std::vector<int> labels;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j) {
      const auto& s = samples[j];
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= mc.num_classes)
        fail(ErrorKind::Contract, "evaluate: sample " + std::to_string(s.id) + " has no valid label");
      batch.push_back(&s.patches);
      labels.push_back(s.label);
    }
    const std::vector<MaskPlan> plans(batch.size(), full);
    auto logits = model.classify(model.encode(batch, plans));
    ce_sum += ce_loss(logits, std::span<const int>(labels)).item() * static_cast<double>(batch.size());
    const auto pred = predict(logits);
    for (std::size_t b = 0; b < pred.size(); ++b) {
      ++r.confusion[static_cast<std::size_t>(labels[b])][static_cast<std::size_t>(pred[b])];
      correct += pred[b] == labels[b] ? 1 : 0;
    }
  }
  r.total = samples.size();
  r.accuracy = r.total ? static_cast<double>(correct) / static_cast<double>(r.total) : 0.0;
  r.ce = r.total ? ce_sum / static_cast<double>(r.total) : 0.0;
  return r;
}

}  // namespace pmt
