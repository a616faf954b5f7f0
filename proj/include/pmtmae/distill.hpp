// SPDX-License-Identifier: Apache-2.0
#pragma once

// Losses for both training stages and the frozen-teacher record supply.
//
// Pre-training:  total = alpha * feature_loss + reconstruction_loss
// Fine-tuning:   total = beta * logit_loss + cross_entropy
//
// Teacher values are constants everywhere: no gradient reaches them.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pmtmae/model.hpp"

namespace pmt {

struct DistillConfig {
  double alpha = 1.0;
  double beta = 0.01;
  double temperature = 3.0;

  void validate() const;
};

// Sum over tokens of the squared L2 gap between teacher rows and the
// (projected) student rows, averaged over `batch` samples.
// student: rows×C_t after projection, teacher: rows×C_t.
template <class T>
nd::Tensor<T> feat_distill_loss(const nd::Tensor<T>& student, const nd::Tensor<T>& teacher, std::size_t batch);

// (1/B) * sum_i T^2 * KL(softmax(z_tea_i / T) || softmax(z_stu_i / T)).
template <class T>
nd::Tensor<T> logit_distill_loss(const nd::Tensor<T>& z_student, const nd::Tensor<T>& z_teacher, double temperature);

// Mean negative log-likelihood of the labels under softmax(logits).
template <class T>
nd::Tensor<T> ce_loss(const nd::Tensor<T>& logits, std::span<const int> labels);

template <class T>
nd::Tensor<T> pretrain_loss(const nd::Tensor<T>& feat, const nd::Tensor<T>& recon, double alpha);
template <class T>
nd::Tensor<T> finetune_loss(const nd::Tensor<T>& logit, const nd::Tensor<T>& ce, double beta);

double pretrain_loss(double feat, double recon, double alpha);
double finetune_loss(double logit, double ce, double beta);

// Frozen per-sample teacher outputs.
struct TeacherRecord {
  std::uint64_t sample_id = 0;
  std::vector<bool> mask_flags;  // K entries, true = masked
  std::uint32_t feature_dim = 0;
  std::vector<float> features;   // visible_count × feature_dim, ascending visible index
  std::vector<float> logits;     // empty when absent

  std::size_t visible_count() const;
  void validate() const;
};

using TeacherTable = std::map<std::uint64_t, TeacherRecord>;

// "PMTT" v1, little-endian:
//   magic "PMTT" | u32 version | u64 count |
//   per record: u64 sample_id | u32 K | u32 C_t | u32 num_classes (0 = none) |
//               ceil(K/8) bytes mask bitmap (bit i of byte i/8, LSB first, 1 = masked) |
//               K_vis*C_t f32 features | num_classes f32 logits
std::string encode_teacher_records(const TeacherTable& records);
TeacherTable decode_teacher_records(std::string_view bytes, const std::string& what = "teacher records");
void save_teacher_records(const std::string& path, const TeacherTable& records);
TeacherTable load_teacher_records(const std::string& path);

inline constexpr std::uint32_t kTeacherFormatVersion = 1;

// Randomly initialized, frozen model used as a stand-in teacher.
struct SynthTeacherConfig {
  ModelConfig model;
  double mask_ratio = 0.8;
  std::uint64_t seed = 0;
};

class SynthTeacher {
 public:
  explicit SynthTeacher(const SynthTeacherConfig& cfg);

  // Mask flags drawn from (seed, sample_id); features from that masked
  // encoding; logits from a fully visible encoding.
  TeacherRecord record(std::uint64_t sample_id, const PatchSet& patches, bool with_logits) const;

  const Model<float>& model() const { return model_; }
  const SynthTeacherConfig& config() const { return cfg_; }

 private:
  SynthTeacherConfig cfg_;
  Model<float> model_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace pmt
