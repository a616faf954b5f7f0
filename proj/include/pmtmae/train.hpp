// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pre-training and fine-tuning loops, evaluation, and the PMTC checkpoint.

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pmtmae/data.hpp"
#include "pmtmae/distill.hpp"
#include "pmtmae/model.hpp"
#include "pmtmae/optim.hpp"

namespace pmt {

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 32;  // 24 for fine-tuning
  Schedule schedule;
  AdamWConfig optim;
  DistillConfig distill;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = none
  bool clip = false;
  double clip_norm = 10.0;
  bool augment = false;  // random isotropic scale in [0.8, 1.2]

  void validate() const;
};

// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  int epoch = 0;  // completed epochs
  std::mt19937_64 rng;
  AdamW opt;
};

TrainState make_train_state(Model<float>& model, const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  std::vector<std::pair<std::string, double>> values;

  double get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::string json_line() const;
};

struct TrainData {
  const std::vector<PatchedSample>* train = nullptr;
  // Scored after every epoch without touching parameters, when set.
  const std::vector<PatchedSample>* heldout = nullptr;
  const TeacherTable* teacher = nullptr;
};

struct TrainHooks {
  std::string metric_log;  // JSON-lines, appended per epoch; empty = off
  std::string checkpoint_dir;  // used with checkpoint_every
  nlohmann::ordered_json config_snapshot;  // stored in checkpoints
  // Called after each epoch; returning false stops the run early.
  std::function<bool(const EpochMetrics&)> on_epoch;
};

// Runs epochs state.epoch+1 .. cfg.epochs.
// Masks follow teacher flags when a teacher table is supplied, else they are
// drawn from the state RNG. The feature term is active only with a teacher.
std::vector<EpochMetrics> pretrain(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                                   TrainState& state, const TrainHooks& hooks = {});

// Full visibility. The logit term is active only with a teacher table and
// beta > 0, in which case every record must carry logits.
std::vector<EpochMetrics> finetune(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                                   TrainState& state, const TrainHooks& hooks = {});

struct PretrainScore {
  double recon = 0.0;
  double feat = 0.0;  // 0 without a teacher
  double total = 0.0;
};

// Mean per-batch losses over `samples` with fixed masks; parameters untouched.
PretrainScore score_pretrain(const Model<float>& model, const std::vector<PatchedSample>& samples,
                             const TeacherTable* teacher, const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double ce = 0.0;
};

EvalResult evaluate(const Model<float>& model, const std::vector<PatchedSample>& samples,
                    std::size_t batch_size = 32);

// Argmax with the lowest index winning ties.
std::vector<int> predict(const nd::Tensor<float>& logits);

// ---- checkpoints --------------------------------------------------------------

struct NamedArray {
  std::string name;
  nd::Shape shape;
  std::vector<float> data;
};

// "PMTC" v1, little-endian:
//   magic | u32 version | u32 length + UTF-8 JSON config | u32 epoch |
//   u32 length + RNG state | u32 count | per parameter:
//     u16 name length + name | u8 rank | rank × u32 dims | f32 data
//   | u32 count | optimizer moments in the same table style
struct Checkpoint {
  nlohmann::ordered_json config;  // flat config; carries "optimizer.step"
  std::uint32_t epoch = 0;
  std::string rng_state;
  std::vector<NamedArray> params;
  std::vector<NamedArray> moments;  // "<param>#m" / "<param>#v"
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint capture(const Model<float>& model, const TrainState* state, const nlohmann::ordered_json& config);

// Copies parameters into `model`. The table must match the model layout
// exactly; a missing, extra or differently shaped entry raises an error
// naming the parameter.
void restore_params(Model<float>& model, const Checkpoint& ck);
// Restores epoch, RNG and optimizer moments into a state built for `model`.
void restore_state(TrainState& state, const Checkpoint& ck);

}  // namespace pmt
