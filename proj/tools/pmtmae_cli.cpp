// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Talks to the library only through the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "pmtmae/pmtmae.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric.
int exit_code(pmt_status s) {
  switch (s) {
    case PMT_OK: return 0;
    case PMT_ERR_USAGE: return 1;
    case PMT_ERR_DATA: return 2;
    case PMT_ERR_NUMERIC: return 3;
    default: return 4;
  }
}

struct Failure {
  pmt_status status;
};

void check(pmt_status s, const char* what) {
  if (s != PMT_OK) {
    std::cerr << "error: " << what << ": " << pmt_last_error() << "\n";
    throw Failure{s};
  }
}

struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { pmt_string_free(p); }
  json parse() const { return json::parse(p); }
};

template <class H, void (*Free)(H*)>
struct Handle {
  H* p = nullptr;
  ~Handle() {
    if (p) Free(p);
  }
};
using Dataset = Handle<pmt_dataset, pmt_dataset_free>;
using Model = Handle<pmt_model, pmt_model_free>;
using Teacher = Handle<pmt_teacher, pmt_teacher_free>;

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> alpha, beta, temperature, mask_ratio, lr_max, lr_min;
  std::optional<std::size_t> blocks, dim, heads, patches, patch_k, points, per_class, bins, teacher_dim, teacher_blocks;
  std::optional<double> sigma, variation;
  bool rotate = false, clip = false, augment = false, masked = false;
  std::optional<int> checkpoint_every;
  std::string teacher_records, data, checkpoint, init, cloud, split = "test";
  std::size_t seeds = 20;

  json overrides() const {
    json o = json::object();
    auto set = [&](const char* key, const auto& v) {
      if (v) o[key] = *v;
    };
    set("seed", seed);
    set("train.epochs", epochs);
    set("train.batch_size", batch_size);
    set("train.lr_max", lr_max);
    set("train.lr_min", lr_min);
    set("train.checkpoint_every", checkpoint_every);
    set("distill.alpha", alpha);
    set("distill.beta", beta);
    set("distill.temperature", temperature);
    set("model.mask_ratio", mask_ratio);
    set("model.encoder_blocks", blocks);
    set("model.dim", dim);
    set("model.heads", heads);
    set("model.num_patches", patches);
    set("model.patch_k", patch_k);
    set("data.points", points);
    set("data.per_class", per_class);
    set("data.sigma", sigma);
    set("data.variation", variation);
    set("analysis.bins", bins);
    set("teacher.dim", teacher_dim);
    set("teacher.blocks", teacher_blocks);
    if (rotate) o["data.rotate"] = true;
    if (clip) o["train.clip"] = true;
    if (augment) o["train.augment"] = true;
    if (masked) o["analysis.masked"] = true;
    return o;
  }
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) {
    std::cerr << "error: cannot write " << p.string() << "\n";
    throw Failure{PMT_ERR_DATA};
  }
  out << text;
}

// Resolves the configuration, optionally adjusts it, and records it.
json effective(const Common& c, json extra = json::object()) {
  json o = c.overrides();
  for (auto it = extra.begin(); it != extra.end(); ++it) o[it.key()] = it.value();
  OwnedString s;
  check(pmt_config_resolve(c.config.empty() ? nullptr : c.config.c_str(), o.dump().c_str(), &s.p), "config");
  json cfg = s.parse();
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "effective-config.json", cfg.dump(2) + "\n");
  return cfg;
}

int split_code(const std::string& s) {
  if (s == "train") return 0;
  if (s == "test") return 1;
  return -1;
}

void load_dataset(const Common& c, Dataset& ds) {
  if (c.data.empty()) {
    std::cerr << "error: --data is required\n";
    throw Failure{PMT_ERR_USAGE};
  }
  check(pmt_dataset_load(c.data.c_str(), &ds.p), "loading dataset");
}

void load_model(const std::string& path, Model& m) {
  if (path.empty()) {
    std::cerr << "error: --checkpoint is required\n";
    throw Failure{PMT_ERR_USAGE};
  }
  check(pmt_model_load(path.c_str(), &m.p), "loading checkpoint");
}

std::size_t class_count(const pmt_dataset* ds) {
  OwnedString s;
  check(pmt_dataset_info(ds, &s.p), "dataset info");
  return s.parse().at("classes").size();
}

void print_epochs(const json& log) {
  for (const auto& rec : log) std::cout << rec.dump() << "\n";
}

int cmd_gen_data(const Common& c) {
  const json cfg = effective(c);
  Dataset ds;
  check(pmt_dataset_generate(cfg.dump().c_str(), &ds.p), "generating data");
  check(pmt_dataset_save(ds.p, c.out.c_str()), "saving dataset");
  OwnedString info;
  check(pmt_dataset_info(ds.p, &info.p), "dataset info");
  std::cout << info.parse().dump() << "\n";
  return 0;
}

int cmd_make_teacher(const Common& c) {
  Dataset ds;
  load_dataset(c, ds);
  const json cfg = effective(c);
  Teacher t;
  check(pmt_teacher_make(ds.p, cfg.dump().c_str(), &t.p), "building teacher records");
  const std::string path = c.teacher_records.empty() ? (fs::path(c.out) / "teacher.pmtt").string() : c.teacher_records;
  check(pmt_teacher_save(t.p, path.c_str()), "saving teacher records");
  OwnedString info;
  check(pmt_teacher_info(t.p, &info.p), "teacher info");
  std::cout << info.parse().dump() << "\n";
  return 0;
}

int cmd_train(const Common& c, bool pre) {
  Dataset ds;
  load_dataset(c, ds);
  Teacher t;
  json extra = json::object();
  if (!c.teacher_records.empty()) {
    check(pmt_teacher_load(c.teacher_records.c_str(), &t.p), "loading teacher records");
    OwnedString info;
    check(pmt_teacher_info(t.p, &info.p), "teacher info");
    const json ti = info.parse();
    if (ti.contains("feature_dim")) extra["model.teacher_dim"] = ti.at("feature_dim");
  }
  json cfg = effective(c, extra);
  Model m;
  if (!c.init.empty()) {
    load_model(c.init, m);
  } else {
    check(pmt_model_create(cfg.dump().c_str(), class_count(ds.p), &m.p), "creating model");
  }
  const fs::path out(c.out);
  const std::string log = (out / "metrics.jsonl").string();
  const std::string ckdir = (out / "checkpoints").string();
  OwnedString result;
  auto fn = pre ? pmt_pretrain : pmt_finetune;
  check(fn(m.p, ds.p, t.p, cfg.dump().c_str(), log.c_str(), ckdir.c_str(), &result.p), pre ? "pretrain" : "finetune");
  print_epochs(result.parse());
  check(pmt_model_save(m.p, (out / "model.pmtc").string().c_str()), "saving checkpoint");

  OwnedString mcfg;
  check(pmt_model_config(m.p, &mcfg.p), "model config");
  OwnedString report;
  check(pmt_param_report(mcfg.p, &report.p), "parameter report");
  const json rep = report.parse();
  write_text(out / "params.json", rep.dump(2) + "\n");
  std::cout << "params: total " << rep.at("total") << ", per block " << rep.at("per_block") << " (analytic "
            << rep.at("per_block_analytic") << ")\n";
  return 0;
}

int cmd_init_model(const Common& c) {
  Dataset ds;
  load_dataset(c, ds);
  const json cfg = effective(c);
  Model m;
  check(pmt_model_create(cfg.dump().c_str(), class_count(ds.p), &m.p), "creating model");
  check(pmt_model_save(m.p, (fs::path(c.out) / "model.pmtc").string().c_str()), "saving checkpoint");
  return 0;
}

int cmd_eval(const Common& c) {
  Dataset ds;
  load_dataset(c, ds);
  Model m;
  load_model(c.checkpoint, m);
  effective(c);
  OwnedString r;
  check(pmt_evaluate(m.p, ds.p, split_code(c.split), &r.p), "evaluate");
  const json res = r.parse();
  write_text(fs::path(c.out) / "eval.json", res.dump(2) + "\n");
  std::cout << "accuracy " << res.at("accuracy").get<double>() << " over " << res.at("total") << " samples\n";
  return 0;
}

int cmd_corr_hist(const Common& c) {
  Dataset ds;
  load_dataset(c, ds);
  Model m;
  load_model(c.checkpoint, m);
  const json cfg = effective(c);
  const auto jl = (fs::path(c.out) / "corr_hist.jsonl").string();
  const auto csv = (fs::path(c.out) / "corr_hist.csv").string();
  OwnedString r;
  check(pmt_corr_hist(m.p, ds.p, split_code(c.split), cfg.dump().c_str(), jl.c_str(), csv.c_str(), &r.p),
        "corr-hist");
  for (const auto& b : r.parse())
    std::cout << "block " << b.at("block") << ": tokens " << b.at("total") << ", undefined " << b.at("undefined")
              << ", mean |r| " << b.at("mean_abs_r").get<double>() << "\n";
  return 0;
}

int cmd_export_features(const Common& c) {
  Dataset ds;
  load_dataset(c, ds);
  Model m;
  load_model(c.checkpoint, m);
  effective(c);
  const auto path = (fs::path(c.out) / "features.csv").string();
  OwnedString r;
  check(pmt_export_features(m.p, ds.p, split_code(c.split), path.c_str(), &r.p), "export-features");
  std::cout << r.parse().dump() << "\n";
  return 0;
}

int cmd_reconstruct(const Common& c) {
  if (c.cloud.empty()) {
    std::cerr << "error: --cloud is required\n";
    throw Failure{PMT_ERR_USAGE};
  }
  Model m;
  load_model(c.checkpoint, m);
  const json cfg = effective(c);
  const auto path = (fs::path(c.out) / "reconstruction.pmtp").string();
  OwnedString r;
  check(pmt_reconstruct(m.p, c.cloud.c_str(), cfg.at("seed").get<std::uint64_t>(), path.c_str(), &r.p),
        "reconstruct");
  std::cout << r.parse().dump() << "\n";
  return 0;
}

int cmd_grad_check(const Common& c) {
  OwnedString r;
  check(pmt_grad_check(c.seed.value_or(0), c.seeds, &r.p), "grad-check");
  const json res = r.parse();
  bool ok = true;
  std::printf("%-20s %14s %6s\n", "op", "max rel err", "pass");
  for (const auto& row : res.at("ops")) {
    const bool pass = row.at("pass").get<bool>();
    ok = ok && pass;
    std::printf("%-20s %14.3e %6s\n", row.at("op").get<std::string>().c_str(), row.at("max_rel_err").get<double>(),
                pass ? "yes" : "NO");
  }
  return ok ? 0 : 3;
}

int cmd_param_report(const Common& c) {
  const json cfg = effective(c);
  OwnedString r;
  check(pmt_param_report(cfg.dump().c_str(), &r.p), "param-report");
  std::cout << r.parse().dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pmtmae: dual-branch masked autoencoder for point clouds with two-stage distillation"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "JSON file with flat dotted keys; flags take precedence");
    sub->add_option("--seed", c.seed, "Single source of all randomness");
    sub->add_option("--out", c.out, "Output directory");
  };
  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--mask-ratio", c.mask_ratio, "Pre-training mask ratio");
    sub->add_option("--blocks", c.blocks, "Encoder blocks")->check(CLI::PositiveNumber);
    sub->add_option("--dim", c.dim, "Channel width");
    sub->add_option("--heads", c.heads, "Attention heads");
    sub->add_option("--patches", c.patches, "Patches per cloud");
    sub->add_option("--patch-k", c.patch_k, "Points per patch (0 = 2*points/patches)");
  };
  auto add_train = [&](CLI::App* sub) {
    sub->add_option("--epochs", c.epochs, "Training epochs");
    sub->add_option("--batch-size", c.batch_size, "Batch size");
    sub->add_option("--alpha", c.alpha, "Feature distillation weight");
    sub->add_option("--beta", c.beta, "Logit distillation weight");
    sub->add_option("--temperature", c.temperature, "Distillation temperature");
    sub->add_option("--lr-max", c.lr_max, "Initial learning rate");
    sub->add_option("--lr-min", c.lr_min, "Final learning rate");
    sub->add_option("--checkpoint-every", c.checkpoint_every, "Epochs between checkpoints (0 = final only)");
    sub->add_option("--teacher-records", c.teacher_records, "PMTT teacher record file");
    sub->add_option("--init", c.init, "Initialize from (or resume) a checkpoint");
    sub->add_flag("--clip", c.clip, "Clip gradients at global norm 10");
    sub->add_flag("--augment", c.augment, "Random scaling in [0.8, 1.2]");
  };
  auto add_data = [&](CLI::App* sub) { sub->add_option("--data", c.data, "Dataset directory"); };
  auto add_eval = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", c.checkpoint, "PMTC checkpoint");
    sub->add_option("--split", c.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic labelled shape dataset");
  add_common(gen);
  gen->add_option("--points", c.points, "Points per cloud");
  gen->add_option("--per-class", c.per_class, "Clouds per class");
  gen->add_option("--sigma", c.sigma, "Surface jitter");
  gen->add_option("--variation", c.variation, "Per-cloud aspect stretch");
  gen->add_flag("--rotate", c.rotate, "Random rotation per cloud");

  auto* teacher = app.add_subcommand("make-teacher", "Emit PMTT records from the frozen stand-in teacher");
  add_common(teacher);
  add_data(teacher);
  add_model(teacher);
  teacher->add_option("--teacher-records", c.teacher_records, "Output path (default OUT/teacher.pmtt)");
  teacher->add_option("--teacher-dim", c.teacher_dim, "Teacher channel width");
  teacher->add_option("--teacher-blocks", c.teacher_blocks, "Teacher encoder blocks");

  auto* pre = app.add_subcommand("pretrain", "Masked reconstruction with optional feature distillation");
  auto* fine = app.add_subcommand("finetune", "Classification with optional logit distillation");
  for (auto* sub : {pre, fine}) {
    add_common(sub);
    add_data(sub);
    add_model(sub);
    add_train(sub);
  }

  auto* init = app.add_subcommand("init-model", "Write an untrained checkpoint");
  add_common(init);
  add_data(init);
  add_model(init);

  auto* ev = app.add_subcommand("eval", "Test accuracy and confusion matrix");
  auto* corr = app.add_subcommand("corr-hist", "Pearson correlation of the two branch outputs per block");
  auto* feats = app.add_subcommand("export-features", "Write classifier-input features as CSV");
  for (auto* sub : {ev, corr, feats}) {
    add_common(sub);
    add_data(sub);
    add_eval(sub);
  }
  corr->add_option("--bins", c.bins, "Histogram bins over [-1, 1]");
  corr->add_flag("--masked", c.masked, "Use pre-training masks instead of all tokens");

  auto* rec = app.add_subcommand("reconstruct", "Reconstruct masked patches of one cloud");
  add_common(rec);
  rec->add_option("--checkpoint", c.checkpoint, "PMTC checkpoint");
  rec->add_option("--cloud", c.cloud, ".xyz or PMTP point cloud");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op");
  grad->add_option("--seed", c.seed, "Base seed");
  grad->add_option("--seeds", c.seeds, "Random instances per op")->check(CLI::PositiveNumber);

  auto* params = app.add_subcommand("param-report", "Parameter counts for a configuration");
  add_common(params);
  add_model(params);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(c);
    if (*teacher) return cmd_make_teacher(c);
    if (*pre) return cmd_train(c, true);
    if (*fine) return cmd_train(c, false);
    if (*init) return cmd_init_model(c);
    if (*ev) return cmd_eval(c);
    if (*corr) return cmd_corr_hist(c);
    if (*feats) return cmd_export_features(c);
    if (*rec) return cmd_reconstruct(c);
    if (*grad) return cmd_grad_check(c);
    if (*params) return cmd_param_report(c);
  } catch (const Failure& f) {
    return exit_code(f.status);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 1;
}
