// SPDX-License-Identifier: Apache-2.0
#pragma once

// Patch tokenizer (mini-PointNet) and center positional embedding.

#include <string>
#include <vector>

#include "pmtmae/layers.hpp"

namespace pmt {

inline constexpr std::size_t kPointNetHidden1 = 128;
inline constexpr std::size_t kPointNetHidden2 = 256;
inline constexpr std::size_t kPosHidden = 128;

void add_tokenizer_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim);
void add_pos_embed_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim);

template <class T>
struct TokenizerParams {
  Linear<T> fc1;  // 3 -> 128
  Linear<T> fc2;  // 128 -> 256
  Linear<T> fc3;  // 256 -> C

  static TokenizerParams from(const ParamStore<T>& store, const std::string& prefix);
};

template <class T>
struct PosEmbedParams {
  Linear<T> fc1;  // 3 -> 128
  Linear<T> fc2;  // 128 -> C

  static PosEmbedParams from(const ParamStore<T>& store, const std::string& prefix);
};

// points: (patches·k)×3 center-relative coordinates, grouped by patch.
// Returns patches×C tokens: shared per-point MLP, max-pool over each patch's
// k points, then a projection to C.
template <class T>
nd::Tensor<T> embed_patches(const nd::Tensor<T>& points, std::size_t k, const TokenizerParams<T>& p);

// centers: rows×3. Returns rows×C.
template <class T>
nd::Tensor<T> pos_embed(const nd::Tensor<T>& centers, const PosEmbedParams<T>& p);

}  // namespace pmt
