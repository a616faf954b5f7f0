// SPDX-License-Identifier: Apache-2.0
#pragma once

// Masked autoencoder and classifier assembled from the tokenizer and
// dual-branch blocks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pmtmae/dualbranch.hpp"
#include "pmtmae/geometry.hpp"
#include "pmtmae/tokenizer.hpp"

namespace pmt {

struct ModelConfig {
  std::size_t dim = 384;
  std::size_t num_patches = 64;
  std::size_t encoder_blocks = 6;  // 6 for S, 12 for L
  std::size_t decoder_blocks = 4;
  double mask_ratio = 0.7;
  std::size_t heads = 6;
  std::size_t patch_k = 32;
  std::size_t num_classes = 40;
  std::size_t points = 1024;
  // Teacher feature width for distillation; 0 or == dim means no projector.
  std::size_t teacher_dim = 0;

  void validate() const;
  bool has_projector() const { return teacher_dim != 0 && teacher_dim != dim; }
};

inline constexpr std::size_t kHeadHidden = 256;

// Visible/masked partition of the K token positions. Both lists ascending.
struct MaskPlan {
  enum class Source { Random, Teacher, Full };

  std::size_t num_tokens = 0;
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
  Source source = Source::Random;

  // true = masked
  std::vector<bool> flags() const;
};

MaskPlan make_mask(std::size_t num_tokens, double mask_ratio, std::uint64_t seed);
MaskPlan mask_from_teacher(const std::vector<bool>& flags);
// Every token visible; used for fine-tuning and evaluation.
MaskPlan full_visibility(std::size_t num_tokens);
std::size_t masked_count(std::size_t num_tokens, double mask_ratio);

// Parameter table for a config. The model owns exactly these entries, in
// this order.
std::vector<ParamSpec> model_layout(const ModelConfig& cfg);

struct ParamCounts {
  std::size_t total = 0;       // everything in model_layout
  std::size_t classifier = 0;  // tokenizer + encoder + head (fine-tuned network)
  std::size_t pretrain = 0;    // tokenizer + encoder + decoder
  std::size_t per_block = 0;
};

ParamCounts count_params(const ModelConfig& cfg);

template <class T>
struct EncoderOutput {
  nd::Tensor<T> cls;     // batch×C
  nd::Tensor<T> tokens;  // (batch·visible)×C, visible positions in ascending order
  std::size_t batch = 0;
  std::size_t visible = 0;
  // One per encoder block when requested; class-token rows excluded.
  std::vector<BranchTrace<T>> traces;
};

template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // Tokenizes only the visible patches of each sample; masked patch contents
  // never enter the computation.
  EncoderOutput<T> encode(std::span<const PatchSet* const> batch, std::span<const MaskPlan> plans,
                          bool record_traces = false) const;

  // Predicted center-relative points for every masked patch, shaped
  // [batch, masked, k, 3].
  nd::Tensor<T> decode(const EncoderOutput<T>& enc, std::span<const PatchSet* const> batch,
                       std::span<const MaskPlan> plans) const;

  // concat(cls, max-pool, mean-pool) over the encoded tokens: batch×3C.
  nd::Tensor<T> classify_features(const EncoderOutput<T>& enc) const;
  nd::Tensor<T> classify(const EncoderOutput<T>& enc) const;

  // Maps student tokens to teacher width; identity when no projector.
  nd::Tensor<T> project(const nd::Tensor<T>& tokens) const;

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  TokenizerParams<T> tokenizer_;
  PosEmbedParams<T> enc_pos_;
  PosEmbedParams<T> dec_pos_;
  std::vector<DualBranchParams<T>> enc_blocks_;
  std::vector<DualBranchParams<T>> dec_blocks_;
  LayerNorm<T> enc_norm_;
  LayerNorm<T> dec_norm_;
  nd::Tensor<T> cls_token_;
  nd::Tensor<T> mask_token_;
  Linear<T> dec_head_;
  Linear<T> head1_;
  Linear<T> head2_;
  Linear<T> proj_;
};

// Ground-truth center-relative points of each sample's masked patches,
// in plan order: (batch·masked·k)×3.
template <class T>
nd::Tensor<T> masked_patch_targets(std::span<const PatchSet* const> batch, std::span<const MaskPlan> plans);

}  // namespace pmt
