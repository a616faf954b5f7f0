// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/pmtmae.h"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include "pmtmae/analysis.hpp"
#include "pmtmae/binio.hpp"
#include "pmtmae/config.hpp"
#include "pmtmae/data.hpp"
#include "pmtmae/distill.hpp"
#include "pmtmae/gradcheck.hpp"
#include "pmtmae/model.hpp"
#include "pmtmae/train.hpp"

using pmt::FlatConfig;
using json = nlohmann::ordered_json;

struct pmt_dataset {
  pmt::Dataset ds;
};

struct pmt_model {
  FlatConfig config;  // model.* keys describe the architecture
  std::unique_ptr<pmt::Model<float>> model;
  // Training progress; present after training or when loaded from a
  // checkpoint that carried optimizer state.
  std::string stage;
  std::unique_ptr<pmt::TrainState> state;
  std::optional<pmt::Checkpoint> pending;  // state to restore on the next run of `stage`
};

struct pmt_teacher {
  pmt::TeacherTable records;
};

namespace {

thread_local std::string g_last_error;

pmt_status status_for(pmt::ErrorKind k) {
  using K = pmt::ErrorKind;
  switch (k) {
    case K::Contract:
    case K::Config: return PMT_ERR_USAGE;
    case K::Numeric: return PMT_ERR_NUMERIC;
    default: return PMT_ERR_DATA;
  }
}

template <class F>
pmt_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return PMT_OK;
  } catch (const pmt::Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("malformed JSON: ") + e.what();
    return PMT_ERR_USAGE;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return PMT_ERR_DATA;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PMT_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PMT_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  pmt::require(p != nullptr, pmt::ErrorKind::Contract, std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void give(char** out, const json& j) {
  if (out != nullptr) *out = dup(j.dump(2));
}

FlatConfig parse_overrides(const char* text) {
  if (text == nullptr || *text == '\0') return FlatConfig();
  try {
    return FlatConfig::parse(text);
  } catch (const nlohmann::json::exception& e) {
    pmt::fail(pmt::ErrorKind::Config, std::string("configuration is not valid JSON: ") + e.what());
  }
}

FlatConfig resolved(const char* config_json) { return pmt::resolve_config("", parse_overrides(config_json)); }

std::vector<const pmt::Sample*> select(const pmt::Dataset& ds, int split) {
  if (split == 0) return ds.split(pmt::Split::Train);
  if (split == 1) return ds.split(pmt::Split::Test);
  pmt::require(split == -1, pmt::ErrorKind::Contract, "split must be 0 (train), 1 (test) or -1 (all)");
  std::vector<const pmt::Sample*> all;
  for (const auto& s : ds.samples) all.push_back(&s);
  return all;
}

void check_compatible(const pmt::ModelConfig& mc, const pmt::Dataset& ds) {
  pmt::require(ds.num_classes() == mc.num_classes, pmt::ErrorKind::Dimension,
               "dataset has " + std::to_string(ds.num_classes()) + " classes, model expects " +
                   std::to_string(mc.num_classes));
}

json metrics_json(const std::vector<pmt::EpochMetrics>& log) {
  json arr = json::array();
  for (const auto& m : log) arr.push_back(json::parse(m.json_line()));
  return arr;
}

enum class StageKind { Pretrain, Finetune };

pmt_status run_stage(StageKind kind, pmt_model* model, const pmt_dataset* ds, const pmt_teacher* teacher,
                     const char* config_json, const char* metric_log, const char* checkpoint_dir, char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    const auto& mc = model->model->config();
    check_compatible(mc, ds->ds);
    FlatConfig cfg = resolved(config_json);
    const auto stage = kind == StageKind::Pretrain ? pmt::Stage::Pretrain : pmt::Stage::Finetune;
    const std::string stage_name = kind == StageKind::Pretrain ? "pretrain" : "finetune";
    const auto tc = pmt::train_config(cfg, stage);

    auto state = std::make_unique<pmt::TrainState>(pmt::make_train_state(*model->model, tc));
    bool resumed = false;
    if (model->stage == stage_name && model->state) {
      // Continue the in-memory run.
      state = std::move(model->state);
      resumed = true;
    } else if (model->pending && model->stage == stage_name) {
      pmt::restore_state(*state, *model->pending);
      resumed = true;
    }
    model->pending.reset();

    const auto train = pmt::prepare_patches(ds->ds, pmt::Split::Train, mc);
    const auto test = pmt::prepare_patches(ds->ds, pmt::Split::Test, mc);
    pmt::TrainData data;
    data.train = &train;
    data.heldout = test.empty() ? nullptr : &test;
    data.teacher = teacher ? &teacher->records : nullptr;

    FlatConfig snapshot = cfg;
    pmt::store_model_config(snapshot, mc);
    pmt::TrainHooks hooks;
    hooks.config_snapshot = snapshot;
    if (metric_log != nullptr && *metric_log != '\0') {
      hooks.metric_log = metric_log;
      if (!resumed && std::filesystem::exists(metric_log)) std::filesystem::remove(metric_log);
    }
    if (checkpoint_dir != nullptr) hooks.checkpoint_dir = checkpoint_dir;

    model->stage = stage_name;
    model->config = snapshot;
    const auto log = kind == StageKind::Pretrain ? pmt::pretrain(*model->model, data, tc, *state, hooks)
                                                 : pmt::finetune(*model->model, data, tc, *state, hooks);
    model->state = std::move(state);
    give(out_json, metrics_json(log));
  });
}

}  // namespace

extern "C" {

const char* pmt_last_error(void) { return g_last_error.c_str(); }

const char* pmt_version(void) { return "0.1.0"; }

void pmt_string_free(char* s) { std::free(s); }

pmt_status pmt_config_resolve(const char* file, const char* overrides_json, char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    auto cfg = pmt::resolve_config(file ? file : "", parse_overrides(overrides_json));
    // Validate every section so errors surface before any work starts.
    auto mc = pmt::model_config(cfg);
    if (mc.num_classes == 0) mc.num_classes = 1;
    mc.validate();
    pmt::train_config(cfg, pmt::Stage::Pretrain);
    pmt::synthetic_spec(cfg);
    *out_json = dup(cfg.dump(2));
  });
}

pmt_status pmt_dataset_generate(const char* config_json, pmt_dataset** out) {
  return guarded([&] {
    need(out, "out");
    auto ds = std::make_unique<pmt_dataset>();
    ds->ds = pmt::gen_synthetic(pmt::synthetic_spec(resolved(config_json)));
    *out = ds.release();
  });
}

pmt_status pmt_dataset_load(const char* dir, pmt_dataset** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    auto ds = std::make_unique<pmt_dataset>();
    ds->ds = pmt::load_dataset(dir);
    *out = ds.release();
  });
}

pmt_status pmt_dataset_save(const pmt_dataset* ds, const char* dir) {
  return guarded([&] {
    need(ds, "dataset");
    need(dir, "dir");
    pmt::save_dataset(dir, ds->ds);
  });
}

pmt_status pmt_dataset_info(const pmt_dataset* ds, char** out_json) {
  return guarded([&] {
    need(ds, "dataset");
    json j;
    j["classes"] = ds->ds.class_names;
    j["samples"] = ds->ds.samples.size();
    j["train"] = ds->ds.split(pmt::Split::Train).size();
    j["test"] = ds->ds.split(pmt::Split::Test).size();
    j["points"] = ds->ds.samples.empty() ? 0 : ds->ds.samples.front().cloud.points.size();
    give(out_json, j);
  });
}

void pmt_dataset_free(pmt_dataset* ds) { delete ds; }

pmt_status pmt_model_create(const char* config_json, size_t num_classes, pmt_model** out) {
  return guarded([&] {
    need(out, "out");
    auto cfg = resolved(config_json);
    auto mc = pmt::model_config(cfg);
    if (num_classes != 0) mc.num_classes = num_classes;
    pmt::require(mc.num_classes != 0, pmt::ErrorKind::Config,
                 "model.num_classes is unset and no dataset supplied a class count");
    mc.validate();
    pmt::store_model_config(cfg, mc);
    auto m = std::make_unique<pmt_model>();
    m->config = cfg;
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    m->model = std::make_unique<pmt::Model<float>>(mc, pmt::mix_seed(seed, 0x6d6f64656cULL));
    *out = m.release();
  });
}

pmt_status pmt_model_load(const char* checkpoint_path, pmt_model** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    auto ck = pmt::load_checkpoint(checkpoint_path);
    auto mc = pmt::model_config(ck.config);
    mc.validate();
    auto m = std::make_unique<pmt_model>();
    m->model = std::make_unique<pmt::Model<float>>(mc, 0);
    pmt::restore_params(*m->model, ck);
    if (auto it = ck.config.find("stage"); it != ck.config.end()) m->stage = it->get<std::string>();
    m->config = ck.config;
    m->config.erase("stage");
    m->config.erase("optimizer.step");
    m->pending = std::move(ck);
    *out = m.release();
  });
}

pmt_status pmt_model_save(const pmt_model* model, const char* checkpoint_path) {
  return guarded([&] {
    need(model, "model");
    need(checkpoint_path, "checkpoint_path");
    FlatConfig cfg = model->config;
    if (!model->stage.empty()) cfg["stage"] = model->stage;
    if (model->state) {
      pmt::save_checkpoint(checkpoint_path, pmt::capture(*model->model, model->state.get(), cfg));
    } else if (model->pending) {
      // Loaded and not retrained: keep the stored progress intact.
      auto ck = *model->pending;
      auto fresh = pmt::capture(*model->model, nullptr, cfg);
      ck.params = std::move(fresh.params);
      pmt::save_checkpoint(checkpoint_path, ck);
    } else {
      pmt::save_checkpoint(checkpoint_path, pmt::capture(*model->model, nullptr, cfg));
    }
  });
}

pmt_status pmt_model_config(const pmt_model* model, char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(out_json, "out_json");
    *out_json = dup(model->config.dump(2));
  });
}

pmt_status pmt_model_param_count(const pmt_model* model, uint64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model->params().scalar_count();
  });
}

pmt_status pmt_model_param_hash(const pmt_model* model, uint64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model->params().hash();
  });
}

void pmt_model_free(pmt_model* model) { delete model; }

pmt_status pmt_teacher_make(const pmt_dataset* ds, const char* config_json, pmt_teacher** out) {
  return guarded([&] {
    need(ds, "dataset");
    need(out, "out");
    auto cfg = resolved(config_json);
    auto student = pmt::model_config(cfg);
    student.num_classes = ds->ds.num_classes();
    auto tcfg = pmt::teacher_config(cfg, student);
    tcfg.model.validate();
    const bool logits = cfg.at("teacher.logits").get<bool>();
    pmt::SynthTeacher teacher(tcfg);
    auto t = std::make_unique<pmt_teacher>();
    for (const auto& s : pmt::prepare_patches(select(ds->ds, -1), student))
      t->records.emplace(s.id, teacher.record(s.id, s.patches, logits));
    *out = t.release();
  });
}

pmt_status pmt_teacher_load(const char* path, pmt_teacher** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto t = std::make_unique<pmt_teacher>();
    t->records = pmt::load_teacher_records(path);
    *out = t.release();
  });
}

pmt_status pmt_teacher_save(const pmt_teacher* t, const char* path) {
  return guarded([&] {
    need(t, "teacher");
    need(path, "path");
    pmt::save_teacher_records(path, t->records);
  });
}

pmt_status pmt_teacher_info(const pmt_teacher* t, char** out_json) {
  return guarded([&] {
    need(t, "teacher");
    json j;
    j["records"] = t->records.size();
    if (!t->records.empty()) {
      const auto& r = t->records.begin()->second;
      j["tokens"] = r.mask_flags.size();
      j["visible"] = r.visible_count();
      j["feature_dim"] = r.feature_dim;
      j["logits"] = r.logits.size();
    }
    give(out_json, j);
  });
}

void pmt_teacher_free(pmt_teacher* t) { delete t; }

pmt_status pmt_pretrain(pmt_model* model, const pmt_dataset* ds, const pmt_teacher* teacher, const char* config_json,
                        const char* metric_log, const char* checkpoint_dir, char** out_json) {
  return run_stage(StageKind::Pretrain, model, ds, teacher, config_json, metric_log, checkpoint_dir, out_json);
}

pmt_status pmt_finetune(pmt_model* model, const pmt_dataset* ds, const pmt_teacher* teacher, const char* config_json,
                        const char* metric_log, const char* checkpoint_dir, char** out_json) {
  return run_stage(StageKind::Finetune, model, ds, teacher, config_json, metric_log, checkpoint_dir, out_json);
}

pmt_status pmt_evaluate(const pmt_model* model, const pmt_dataset* ds, int split, char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    const auto& mc = model->model->config();
    check_compatible(mc, ds->ds);
    const auto samples = pmt::prepare_patches(select(ds->ds, split), mc);
    const auto r = pmt::evaluate(*model->model, samples);
    json j;
    j["accuracy"] = r.accuracy;
    j["total"] = r.total;
    j["ce"] = r.ce;
    j["classes"] = ds->ds.class_names;
    j["confusion"] = r.confusion;
    give(out_json, j);
  });
}

pmt_status pmt_corr_hist(const pmt_model* model, const pmt_dataset* ds, int split, const char* config_json,
                         const char* jsonl_path, const char* csv_path, char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    auto cfg = resolved(config_json);
    pmt::CorrOptions opt;
    opt.bins = cfg.at("analysis.bins").get<std::size_t>();
    opt.masked = cfg.at("analysis.masked").get<bool>();
    opt.seed = cfg.at("seed").get<std::uint64_t>();
    const auto samples = pmt::prepare_patches(select(ds->ds, split), model->model->config());
    const auto hists = pmt::correlation_histogram(*model->model, samples, opt);
    if (jsonl_path) pmt::binio::write_file(jsonl_path, pmt::corr_jsonl(hists));
    if (csv_path) pmt::binio::write_file(csv_path, pmt::corr_csv(hists));
    json j = json::array();
    for (const auto& h : hists) {
      j.push_back({{"block", h.block},
                   {"total", h.total},
                   {"undefined", h.undefined},
                   {"mean_abs_r", h.mean_abs_r()}});
    }
    give(out_json, j);
  });
}

pmt_status pmt_export_features(const pmt_model* model, const pmt_dataset* ds, int split, const char* csv_path,
                               char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    need(csv_path, "csv_path");
    const auto samples = pmt::prepare_patches(select(ds->ds, split), model->model->config());
    pmt::binio::write_file(csv_path, pmt::export_features(*model->model, samples));
    give(out_json, json{{"rows", samples.size()}, {"columns", 2 + 3 * model->model->config().dim}});
  });
}

pmt_status pmt_reconstruct(const pmt_model* model, const char* cloud_path, uint64_t seed, const char* out_path,
                           char** out_json) {
  return guarded([&] {
    need(model, "model");
    need(cloud_path, "cloud_path");
    const auto cloud = pmt::load_cloud(cloud_path);
    const auto r = pmt::export_reconstruction(*model->model, cloud, seed, out_path ? out_path : "");
    give(out_json, json{{"points", r.ground_truth.size()},
                        {"visible_points", r.visible.size()},
                        {"masked_patches", r.masked},
                        {"reconstructed_points", r.reconstructed.size()},
                        {"chamfer_l2", r.chamfer}});
  });
}

pmt_status pmt_grad_check(uint64_t seed, size_t seeds, char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    json rows = json::array();
    for (const auto& r : pmt::run_grad_check(seed, seeds)) {
      rows.push_back({{"op", r.op},
                      {"max_rel_err", r.max_rel_err},
                      {"seeds", r.seeds},
                      {"scalars", r.scalars},
                      {"pass", r.max_rel_err < pmt::kGradTolerance}});
    }
    give(out_json, json{{"tolerance", pmt::kGradTolerance}, {"step", pmt::kFiniteStep}, {"ops", rows}});
  });
}

pmt_status pmt_param_report(const char* config_json, char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    auto mc = pmt::model_config(resolved(config_json));
    if (mc.num_classes == 0) mc.num_classes = 40;
    mc.validate();
    const std::size_t C = mc.dim;
    const std::size_t analytic = 4 * (C * C + C) + 2 * (C * C + C) + (2 * C * 4 * C + 4 * C) + (4 * C * C + C) + 2 * C;
    auto report_for = [&](std::size_t blocks, double paper_millions) {
      auto cfg = mc;
      cfg.encoder_blocks = blocks;
      const auto c = pmt::count_params(cfg);
      return json{{"encoder_blocks", blocks},
                  {"total", c.total},
                  {"classifier", c.classifier},
                  {"pretrain", c.pretrain},
                  {"classifier_millions", static_cast<double>(c.classifier) / 1e6},
                  {"reference_millions", paper_millions},
                  {"ratio_to_reference", static_cast<double>(c.classifier) / (paper_millions * 1e6)}};
    };
    const auto c = pmt::count_params(mc);
    json j;
    j["config"] = {{"dim", mc.dim},
                   {"heads", mc.heads},
                   {"encoder_blocks", mc.encoder_blocks},
                   {"decoder_blocks", mc.decoder_blocks},
                   {"num_classes", mc.num_classes}};
    j["per_block"] = c.per_block;
    j["per_block_analytic"] = analytic;
    j["per_block_match"] = c.per_block == analytic;
    j["total"] = c.total;
    j["classifier"] = c.classifier;
    j["pretrain"] = c.pretrain;
    j["small"] = report_for(6, 14.0);
    j["large"] = report_for(12, 27.3);
    j["note"] =
        "Reference counts are 14.0M (6 blocks) and 27.3M (12 blocks). The classifier count here covers the "
        "tokenizer, positional MLP, class token, encoder blocks, final norm and a 3C-256-classes head. The "
        "reference tokenizer, head and positional widths are not published, and a dual-branch block adds "
        "2C^2 (token MLP) and 12C^2 (2C-4C-C fusion FFN) on top of the attention projections, so only the "
        "per-block count is checked exactly.";
    give(out_json, j);
  });
}

}  // extern "C"
