// SPDX-License-Identifier: Apache-2.0
#pragma once

// The dual-branch block: multi-head self-attention and a token-wise shared
// MLP run side by side on the same normalized input, their outputs are
// concatenated channel-wise and fused by an FFN, and a residual wraps the
// whole thing:
//
//   y = x + fuse(attention_branch(norm(x)), mlp_branch(norm(x)))
//
// Activations are (batch·seq)×C row blocks; `seq` tokens per sample.

#include <string>
#include <vector>

#include "pmtmae/layers.hpp"

namespace pmt {

inline constexpr std::size_t kFfnExpansion = 4;

void add_dual_block_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim);

// Learnable scalars in one block at width `dim`.
std::size_t dual_block_param_count(std::size_t dim);

template <class T>
struct DualBranchParams {
  LayerNorm<T> norm;
  Linear<T> q, k, v, o;     // C×C each
  Linear<T> mlp1, mlp2;     // C×C each
  Linear<T> ffn1;           // 2C×4C
  Linear<T> ffn2;           // 4C×C; zeroing it makes the block the identity
  std::size_t heads = 1;

  static DualBranchParams from(const ParamStore<T>& store, const std::string& prefix, std::size_t heads);
};

// Both branch outputs before fusion. Pure observations.
template <class T>
struct BranchTrace {
  nd::Tensor<T> attn_out;
  nd::Tensor<T> mlp_out;
};

template <class T>
struct BlockOutput {
  nd::Tensor<T> y;
  BranchTrace<T> trace;
};

template <class T>
nd::Tensor<T> attention_branch(const nd::Tensor<T>& x, const DualBranchParams<T>& p, std::size_t batch,
                               std::size_t seq);

template <class T>
nd::Tensor<T> mlp_branch(const nd::Tensor<T>& x, const DualBranchParams<T>& p);

template <class T>
nd::Tensor<T> fuse(const nd::Tensor<T>& attn_out, const nd::Tensor<T>& mlp_out, const DualBranchParams<T>& p);

template <class T>
BlockOutput<T> dual_block(const nd::Tensor<T>& x, const DualBranchParams<T>& p, std::size_t batch, std::size_t seq);

}  // namespace pmt
