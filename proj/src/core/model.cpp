// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pmt {

void ModelConfig::validate() const {
  require(dim >= 1, ErrorKind::Config, "model.dim must be positive");
  require(heads >= 1 && dim % heads == 0, ErrorKind::Config,
          "model.dim " + std::to_string(dim) + " is not divisible by model.heads " + std::to_string(heads));
  require(num_patches >= 2, ErrorKind::Config, "model.num_patches must be at least 2");
  require(encoder_blocks >= 1, ErrorKind::Config, "model.encoder_blocks must be positive");
  require(decoder_blocks >= 1, ErrorKind::Config, "model.decoder_blocks must be positive");
  require(mask_ratio > 0.0 && mask_ratio < 1.0, ErrorKind::Config, "model.mask_ratio must lie in (0, 1)");
  require(patch_k >= 1, ErrorKind::Config, "model.patch_k must be positive");
  require(num_classes >= 1, ErrorKind::Config, "model.num_classes must be positive");
  require(points >= num_patches && points >= patch_k, ErrorKind::Config,
          "model.points must cover num_patches and patch_k");
  const std::size_t m = masked_count(num_patches, mask_ratio);
  require(m >= 1 && m < num_patches, ErrorKind::Config, "model.mask_ratio leaves no masked or no visible tokens");
}

std::vector<bool> MaskPlan::flags() const {
  std::vector<bool> f(num_tokens, false);
  for (auto i : masked) f[i] = true;
  return f;
}

std::size_t masked_count(std::size_t num_tokens, double mask_ratio) {
  return static_cast<std::size_t>(std::floor(mask_ratio * static_cast<double>(num_tokens)));
}

MaskPlan make_mask(std::size_t num_tokens, double mask_ratio, std::uint64_t seed) {
  require(num_tokens >= 2, ErrorKind::Contract, "make_mask: need at least 2 tokens");
  require(mask_ratio > 0.0 && mask_ratio < 1.0, ErrorKind::Contract, "make_mask: ratio must lie in (0, 1)");
  const std::size_t m = masked_count(num_tokens, mask_ratio);
  if (m == 0 || m == num_tokens) {
    fail(ErrorKind::Degenerate, "make_mask: ratio " + std::to_string(mask_ratio) + " over " +
                                    std::to_string(num_tokens) + " tokens masks " + std::to_string(m));
  }
  std::vector<std::size_t> perm(num_tokens);
  for (std::size_t i = 0; i < num_tokens; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (num_tokens - i));
    std::swap(perm[i], perm[j]);
  }
  MaskPlan plan;
  plan.num_tokens = num_tokens;
  plan.source = MaskPlan::Source::Random;
  plan.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  plan.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

MaskPlan mask_from_teacher(const std::vector<bool>& flags) {
  MaskPlan plan;
  plan.num_tokens = flags.size();
  plan.source = MaskPlan::Source::Teacher;
  for (std::size_t i = 0; i < flags.size(); ++i) (flags[i] ? plan.masked : plan.visible).push_back(i);
  if (plan.masked.empty() || plan.visible.empty()) {
    fail(ErrorKind::Degenerate, "mask_from_teacher: flags mark " + std::to_string(plan.masked.size()) + " of " +
                                    std::to_string(flags.size()) + " tokens masked");
  }
  return plan;
}

MaskPlan full_visibility(std::size_t num_tokens) {
  MaskPlan plan;
  plan.num_tokens = num_tokens;
  plan.source = MaskPlan::Source::Full;
  plan.visible.resize(num_tokens);
  for (std::size_t i = 0; i < num_tokens; ++i) plan.visible[i] = i;
  return plan;
}

std::vector<ParamSpec> model_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.dim;
  std::vector<ParamSpec> layout;
  add_tokenizer_layout(layout, "tokenizer", c);
  add_pos_embed_layout(layout, "encoder.pos", c);
  layout.push_back({"encoder.cls_token", {1, c}, Init::TokenNormal, false});
  for (std::size_t i = 0; i < cfg.encoder_blocks; ++i)
    add_dual_block_layout(layout, "encoder.blocks." + std::to_string(i), c);
  add_layer_norm(layout, "encoder.norm", c);
  add_pos_embed_layout(layout, "decoder.pos", c);
  layout.push_back({"decoder.mask_token", {1, c}, Init::TokenNormal, false});
  for (std::size_t i = 0; i < cfg.decoder_blocks; ++i)
    add_dual_block_layout(layout, "decoder.blocks." + std::to_string(i), c);
  add_layer_norm(layout, "decoder.norm", c);
  add_linear(layout, "decoder.head", c, cfg.patch_k * 3);
  add_linear(layout, "head.fc1", 3 * c, kHeadHidden);
  add_linear(layout, "head.fc2", kHeadHidden, cfg.num_classes);
  if (cfg.has_projector()) add_linear(layout, "distill.proj", c, cfg.teacher_dim);
  return layout;
}

ParamCounts count_params(const ModelConfig& cfg) {
  ParamCounts pc;
  for (const auto& p : model_layout(cfg)) {
    const std::size_t n = nd::numel(p.shape);
    pc.total += n;
    const bool decoder = p.name.rfind("decoder.", 0) == 0;
    const bool head = p.name.rfind("head.", 0) == 0;
    const bool distill = p.name.rfind("distill.", 0) == 0;
    if (!decoder && !distill) pc.classifier += n;
    if (!head && !distill) pc.pretrain += n;
  }
  pc.per_block = dual_block_param_count(cfg.dim);
  return pc;
}

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(model_layout(cfg), seed) {
  tokenizer_ = TokenizerParams<T>::from(store_, "tokenizer");
  enc_pos_ = PosEmbedParams<T>::from(store_, "encoder.pos");
  dec_pos_ = PosEmbedParams<T>::from(store_, "decoder.pos");
  for (std::size_t i = 0; i < cfg.encoder_blocks; ++i)
    enc_blocks_.push_back(DualBranchParams<T>::from(store_, "encoder.blocks." + std::to_string(i), cfg.heads));
  for (std::size_t i = 0; i < cfg.decoder_blocks; ++i)
    dec_blocks_.push_back(DualBranchParams<T>::from(store_, "decoder.blocks." + std::to_string(i), cfg.heads));
  enc_norm_ = LayerNorm<T>::from(store_, "encoder.norm");
  dec_norm_ = LayerNorm<T>::from(store_, "decoder.norm");
  cls_token_ = store_.get("encoder.cls_token");
  mask_token_ = store_.get("decoder.mask_token");
  dec_head_ = Linear<T>::from(store_, "decoder.head");
  head1_ = Linear<T>::from(store_, "head.fc1");
  head2_ = Linear<T>::from(store_, "head.fc2");
  if (cfg.has_projector()) proj_ = Linear<T>::from(store_, "distill.proj");
}

namespace {

// Checks the batch against the config and returns the common visible count.
std::size_t check_batch(const ModelConfig& cfg, std::span<const PatchSet* const> batch,
                        std::span<const MaskPlan> plans) {
  require(!batch.empty(), ErrorKind::Contract, "model: empty batch");
  require(batch.size() == plans.size(), ErrorKind::Contract, "model: one mask plan per sample required");
  const std::size_t visible = plans[0].visible.size();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ps = *batch[b];
    if (ps.groups() != cfg.num_patches || ps.k != cfg.patch_k) {
      fail(ErrorKind::Dimension, "model: patch set has " + std::to_string(ps.groups()) + " patches of " +
                                     std::to_string(ps.k) + " points, config expects " +
                                     std::to_string(cfg.num_patches) + " of " + std::to_string(cfg.patch_k));
    }
    if (plans[b].num_tokens != cfg.num_patches || plans[b].visible.size() + plans[b].masked.size() != cfg.num_patches) {
      fail(ErrorKind::Alignment, "model: mask plan covers " + std::to_string(plans[b].num_tokens) +
                                     " tokens, patch set has " + std::to_string(cfg.num_patches));
    }
    if (plans[b].visible.size() != visible) {
      fail(ErrorKind::Alignment, "model: samples in one batch must share the visible token count");
    }
  }
  require(visible >= 1, ErrorKind::Degenerate, "model: no visible tokens");
  return visible;
}

template <class T>
void push_point(std::vector<T>& out, const Point3& p) {
  out.push_back(static_cast<T>(p[0]));
  out.push_back(static_cast<T>(p[1]));
  out.push_back(static_cast<T>(p[2]));
}

}  // namespace

template <class T>
EncoderOutput<T> Model<T>::encode(std::span<const PatchSet* const> batch, std::span<const MaskPlan> plans,
                                  bool record_traces) const {
  const std::size_t visible = check_batch(cfg_, batch, plans);
  const std::size_t bsz = batch.size();
  const std::size_t k = cfg_.patch_k;

  std::vector<T> pts, ctr;
  pts.reserve(bsz * visible * k * 3);
  ctr.reserve(bsz * visible * 3);
  for (std::size_t b = 0; b < bsz; ++b) {
    const auto& ps = *batch[b];
    for (std::size_t g : plans[b].visible) {
      push_point(ctr, ps.centers[g]);
      for (std::size_t j = 0; j < k; ++j) push_point(pts, ps.patches[g * k + j]);
    }
  }
  auto points = nd::Tensor<T>::from({bsz * visible * k, 3}, std::move(pts));
  auto centers = nd::Tensor<T>::from({bsz * visible, 3}, std::move(ctr));

  auto tokens = nd::add(embed_patches(points, k, tokenizer_), pos_embed(centers, enc_pos_));

  // Prepend the class token to every sample's sequence.
  const std::size_t seq = visible + 1;
  std::vector<std::size_t> idx;
  idx.reserve(bsz * seq);
  for (std::size_t b = 0; b < bsz; ++b) {
    idx.push_back(0);
    for (std::size_t j = 0; j < visible; ++j) idx.push_back(1 + b * visible + j);
  }
  auto x = nd::gather_rows(nd::concat_rows<T>({cls_token_, tokens}), idx);

  std::vector<std::size_t> cls_rows, tok_rows;
  for (std::size_t b = 0; b < bsz; ++b) {
    cls_rows.push_back(b * seq);
    for (std::size_t j = 0; j < visible; ++j) tok_rows.push_back(b * seq + 1 + j);
  }

  EncoderOutput<T> out;
  out.batch = bsz;
  out.visible = visible;
  for (const auto& blk : enc_blocks_) {
    auto r = dual_block(x, blk, bsz, seq);
    if (record_traces) {
      nd::NoGradGuard ng;
      out.traces.push_back({nd::gather_rows(r.trace.attn_out, tok_rows), nd::gather_rows(r.trace.mlp_out, tok_rows)});
    }
    x = std::move(r.y);
  }
  x = enc_norm_(x);
  out.cls = nd::gather_rows(x, cls_rows);
  out.tokens = nd::gather_rows(x, tok_rows);
  return out;
}

template <class T>
nd::Tensor<T> Model<T>::decode(const EncoderOutput<T>& enc, std::span<const PatchSet* const> batch,
                               std::span<const MaskPlan> plans) const {
  const std::size_t visible = check_batch(cfg_, batch, plans);
  require(visible == enc.visible && batch.size() == enc.batch, ErrorKind::Alignment,
          "decode: mask plans do not match the encoder output");
  const std::size_t bsz = batch.size();
  const std::size_t masked = cfg_.num_patches - visible;
  require(masked >= 1, ErrorKind::Degenerate, "decode: nothing is masked");
  const std::size_t seq = cfg_.num_patches;

  // Sequence per sample: visible features in plan order, then one mask token
  // per masked position.
  std::vector<std::size_t> idx;
  std::vector<T> ctr;
  idx.reserve(bsz * seq);
  ctr.reserve(bsz * seq * 3);
  const std::size_t mask_row = bsz * visible;
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t j = 0; j < visible; ++j) {
      idx.push_back(b * visible + j);
      push_point(ctr, batch[b]->centers[plans[b].visible[j]]);
    }
    for (std::size_t g : plans[b].masked) {
      idx.push_back(mask_row);
      push_point(ctr, batch[b]->centers[g]);
    }
  }
  auto x = nd::gather_rows(nd::concat_rows<T>({enc.tokens, mask_token_}), idx);
  x = nd::add(x, pos_embed(nd::Tensor<T>::from({bsz * seq, 3}, std::move(ctr)), dec_pos_));
  for (const auto& blk : dec_blocks_) x = dual_block(x, blk, bsz, seq).y;
  x = dec_norm_(x);

  std::vector<std::size_t> rows;
  rows.reserve(bsz * masked);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t j = 0; j < masked; ++j) rows.push_back(b * seq + visible + j);
  auto pred = dec_head_(nd::gather_rows(x, rows));
  return nd::reshape(pred, {bsz, masked, cfg_.patch_k, 3});
}

template <class T>
nd::Tensor<T> Model<T>::classify_features(const EncoderOutput<T>& enc) const {
  return nd::concat_cols<T>({enc.cls, nd::segment_max(enc.tokens, enc.visible), nd::segment_mean(enc.tokens, enc.visible)});
}

template <class T>
nd::Tensor<T> Model<T>::classify(const EncoderOutput<T>& enc) const {
  return head2_(nd::gelu(head1_(classify_features(enc))));
}

template <class T>
nd::Tensor<T> Model<T>::project(const nd::Tensor<T>& tokens) const {
  return cfg_.has_projector() ? proj_(tokens) : tokens;
}

template <class T>
nd::Tensor<T> masked_patch_targets(std::span<const PatchSet* const> batch, std::span<const MaskPlan> plans) {
  std::vector<T> out;
  std::size_t rows = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ps = *batch[b];
    for (std::size_t g : plans[b].masked) {
      for (std::size_t j = 0; j < ps.k; ++j) push_point(out, ps.patches[g * ps.k + j]);
      rows += ps.k;
    }
  }
  return nd::Tensor<T>::from({rows, 3}, std::move(out));
}

template class Model<float>;
template class Model<double>;
template nd::Tensor<float> masked_patch_targets<float>(std::span<const PatchSet* const>, std::span<const MaskPlan>);
template nd::Tensor<double> masked_patch_targets<double>(std::span<const PatchSet* const>, std::span<const MaskPlan>);

}  // namespace pmt
