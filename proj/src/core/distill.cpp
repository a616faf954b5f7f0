// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/distill.hpp"

#include <algorithm>
#include <cmath>

#include "pmtmae/binio.hpp"

namespace pmt {

void DistillConfig::validate() const {
  require(alpha >= 0.0, ErrorKind::Config, "distill.alpha must be >= 0");
  require(beta >= 0.0, ErrorKind::Config, "distill.beta must be >= 0");
  require(temperature > 0.0, ErrorKind::Config, "distill.temperature must be > 0");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <class T>
nd::Tensor<T> feat_distill_loss(const nd::Tensor<T>& student, const nd::Tensor<T>& teacher, std::size_t batch) {
  if (student.rank() != 2 || teacher.rank() != 2 || student.dim(0) != teacher.dim(0)) {
    fail(ErrorKind::Alignment, "feat_distill_loss: student tokens " + nd::shape_str(student.shape()) +
                                   " do not align with teacher tokens " + nd::shape_str(teacher.shape()));
  }
  if (student.dim(1) != teacher.dim(1)) {
    fail(ErrorKind::Dimension, "feat_distill_loss: student width " + std::to_string(student.dim(1)) +
                                   " differs from teacher width " + std::to_string(teacher.dim(1)) +
                                   "; a projector is required");
  }
  require(batch >= 1, ErrorKind::Contract, "feat_distill_loss: batch must be positive");
  const auto s = student.data();
  const auto t = teacher.data();
  T acc = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const T d = t[i] - s[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(batch);
  std::vector<T> tv(t.begin(), t.end());
  return nd::make_result<T>({}, {acc * inv}, {student}, [tv = std::move(tv), inv](nd::Node<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    const T go = self.grad[0] * inv * T(2);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (p->value[i] - tv[i]);
  });
}

namespace {

template <class T>
void log_softmax_row(const T* z, std::size_t n, T inv_temp, T* out) {
  T mx = z[0] * inv_temp;
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j] * inv_temp);
  T s = 0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] * inv_temp - mx);
  const T lz = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = z[j] * inv_temp - lz;
}

}  // namespace

template <class T>
nd::Tensor<T> logit_distill_loss(const nd::Tensor<T>& z_student, const nd::Tensor<T>& z_teacher, double temperature) {
  require(temperature > 0.0, ErrorKind::Contract, "logit_distill_loss: temperature must be positive");
  if (z_student.rank() != 2 || z_student.shape() != z_teacher.shape()) {
    fail(ErrorKind::Dimension, "logit_distill_loss: logits " + nd::shape_str(z_student.shape()) + " vs " +
                                   nd::shape_str(z_teacher.shape()));
  }
  const std::size_t bsz = z_student.dim(0), n = z_student.dim(1);
  const T temp = static_cast<T>(temperature);
  const T inv_t = T(1) / temp;
  std::vector<T> ls(bsz * n), lt(bsz * n);
  T total = 0;
  for (std::size_t b = 0; b < bsz; ++b) {
    log_softmax_row(z_student.data().data() + b * n, n, inv_t, ls.data() + b * n);
    log_softmax_row(z_teacher.data().data() + b * n, n, inv_t, lt.data() + b * n);
    T kl = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T pt = std::exp(lt[b * n + j]);
      kl += pt * (lt[b * n + j] - ls[b * n + j]);
    }
    total += kl;
  }
  const T coef = temp * temp / static_cast<T>(bsz);
  return nd::make_result<T>({}, {total * coef}, {z_student},
                            [ls = std::move(ls), lt = std::move(lt), temp, bsz](nd::Node<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    const T go = self.grad[0] * temp / static_cast<T>(bsz);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (std::exp(ls[i]) - std::exp(lt[i]));
  });
}

template <class T>
nd::Tensor<T> ce_loss(const nd::Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, ErrorKind::Dimension, "ce_loss: logits must be batch x classes");
  const std::size_t bsz = logits.dim(0), n = logits.dim(1);
  require(labels.size() == bsz, ErrorKind::Dimension, "ce_loss: one label per row required");
  std::vector<T> ls(bsz * n);
  T total = 0;
  for (std::size_t b = 0; b < bsz; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= n) {
      fail(ErrorKind::Contract, "ce_loss: label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(n) + ")");
    }
    log_softmax_row(logits.data().data() + b * n, n, T(1), ls.data() + b * n);
    total -= ls[b * n + static_cast<std::size_t>(labels[b])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return nd::make_result<T>({}, {total / static_cast<T>(bsz)}, {logits},
                            [ls = std::move(ls), lab = std::move(lab), bsz, n](nd::Node<T>& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->grad_buffer();
    const T go = self.grad[0] / static_cast<T>(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t j = 0; j < n; ++j) {
        const T onehot = static_cast<std::size_t>(lab[b]) == j ? T(1) : T(0);
        g[b * n + j] += go * (std::exp(ls[b * n + j]) - onehot);
      }
    }
  });
}

template <class T>
nd::Tensor<T> pretrain_loss(const nd::Tensor<T>& feat, const nd::Tensor<T>& recon, double alpha) {
  return nd::add(nd::scale(feat, static_cast<T>(alpha)), recon);
}

template <class T>
nd::Tensor<T> finetune_loss(const nd::Tensor<T>& logit, const nd::Tensor<T>& ce, double beta) {
  return nd::add(nd::scale(logit, static_cast<T>(beta)), ce);
}

double pretrain_loss(double feat, double recon, double alpha) { return alpha * feat + recon; }
double finetune_loss(double logit, double ce, double beta) { return beta * logit + ce; }

// ---- teacher records --------------------------------------------------------

std::size_t TeacherRecord::visible_count() const {
  return static_cast<std::size_t>(std::count(mask_flags.begin(), mask_flags.end(), false));
}

void TeacherRecord::validate() const {
  const std::string who = "teacher record " + std::to_string(sample_id);
  require(!mask_flags.empty(), ErrorKind::Format, who + ": no mask flags");
  require(feature_dim >= 1, ErrorKind::Format, who + ": zero feature width");
  if (features.size() != visible_count() * feature_dim) {
    fail(ErrorKind::Format, who + ": " + std::to_string(features.size()) + " feature values for " +
                                std::to_string(visible_count()) + " visible tokens of width " +
                                std::to_string(feature_dim));
  }
  for (float v : features) require(std::isfinite(v), ErrorKind::Format, who + ": non-finite feature value");
  for (float v : logits) require(std::isfinite(v), ErrorKind::Format, who + ": non-finite logit");
}

std::string encode_teacher_records(const TeacherTable& records) {
  binio::Writer w;
  w.magic("PMTT");
  w.put<std::uint32_t>(kTeacherFormatVersion);
  w.put<std::uint64_t>(records.size());
  for (const auto& [id, r] : records) {
    r.validate();
    const std::size_t k = r.mask_flags.size();
    w.put<std::uint64_t>(id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(k));
    w.put<std::uint32_t>(r.feature_dim);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.logits.size()));
    std::string bitmap((k + 7) / 8, '\0');
    for (std::size_t i = 0; i < k; ++i)
      if (r.mask_flags[i]) bitmap[i / 8] = static_cast<char>(bitmap[i / 8] | (1u << (i % 8)));
    w.bytes(bitmap);
    w.floats(r.features.data(), r.features.size());
    w.floats(r.logits.data(), r.logits.size());
  }
  return std::move(w.buffer());
}

TeacherTable decode_teacher_records(std::string_view bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  r.expect_magic("PMTT");
  const auto version = r.get<std::uint32_t>();
  if (version != kTeacherFormatVersion) {
    fail(ErrorKind::Format, what + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  TeacherTable table;
  for (std::uint64_t n = 0; n < count; ++n) {
    TeacherRecord rec;
    rec.sample_id = r.get<std::uint64_t>();
    const auto k = r.get<std::uint32_t>();
    rec.feature_dim = r.get<std::uint32_t>();
    const auto classes = r.get<std::uint32_t>();
    const auto bitmap = r.bytes((k + 7) / 8);
    rec.mask_flags.resize(k);
    for (std::uint32_t i = 0; i < k; ++i)
      rec.mask_flags[i] = (static_cast<unsigned char>(bitmap[i / 8]) >> (i % 8)) & 1u;
    rec.features.resize(rec.visible_count() * rec.feature_dim);
    r.floats(rec.features.data(), rec.features.size());
    rec.logits.resize(classes);
    r.floats(rec.logits.data(), rec.logits.size());
    rec.validate();
    if (!table.emplace(rec.sample_id, std::move(rec)).second) {
      fail(ErrorKind::Format, what + ": duplicate sample id");
    }
  }
  if (!r.done()) fail(ErrorKind::Format, what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return table;
}

void save_teacher_records(const std::string& path, const TeacherTable& records) {
  binio::write_file(path, encode_teacher_records(records));
}

TeacherTable load_teacher_records(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  return decode_teacher_records(bytes, path);
}

// ---- synthetic teacher ----------------------------------------------------------

SynthTeacher::SynthTeacher(const SynthTeacherConfig& cfg) : cfg_(cfg), model_(cfg.model, cfg.seed) {
  require(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0, ErrorKind::Config, "teacher.mask_ratio must lie in (0, 1)");
}

TeacherRecord SynthTeacher::record(std::uint64_t sample_id, const PatchSet& patches, bool with_logits) const {
  nd::NoGradGuard ng;
  const PatchSet* batch[] = {&patches};
  TeacherRecord rec;
  rec.sample_id = sample_id;
  const MaskPlan plan = make_mask(cfg_.model.num_patches, cfg_.mask_ratio, mix_seed(cfg_.seed, sample_id));
  rec.mask_flags = plan.flags();
  const MaskPlan plans[] = {plan};
  auto enc = model_.encode(batch, plans);
  rec.feature_dim = static_cast<std::uint32_t>(cfg_.model.dim);
  rec.features.assign(enc.tokens.data().begin(), enc.tokens.data().end());
  if (with_logits) {
    const MaskPlan full[] = {full_visibility(cfg_.model.num_patches)};
    auto logits = model_.classify(model_.encode(batch, full));
    rec.logits.assign(logits.data().begin(), logits.data().end());
  }
  return rec;
}

#define PMT_INSTANTIATE(T)                                                                                 \
  template nd::Tensor<T> feat_distill_loss(const nd::Tensor<T>&, const nd::Tensor<T>&, std::size_t);       \
  template nd::Tensor<T> logit_distill_loss(const nd::Tensor<T>&, const nd::Tensor<T>&, double);           \
  template nd::Tensor<T> ce_loss(const nd::Tensor<T>&, std::span<const int>);                              \
  template nd::Tensor<T> pretrain_loss(const nd::Tensor<T>&, const nd::Tensor<T>&, double);                \
  template nd::Tensor<T> finetune_loss(const nd::Tensor<T>&, const nd::Tensor<T>&, double);

PMT_INSTANTIATE(float)
PMT_INSTANTIATE(double)
#undef PMT_INSTANTIATE

}  // namespace pmt
