// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/dualbranch.hpp"

namespace pmt {

void add_dual_block_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim) {
  add_layer_norm(layout, prefix + ".norm", dim);
  for (const char* name : {"q", "k", "v", "o"}) add_linear(layout, prefix + ".attn." + name, dim, dim);
  add_linear(layout, prefix + ".mlp.fc1", dim, dim);
  add_linear(layout, prefix + ".mlp.fc2", dim, dim);
  add_linear(layout, prefix + ".ffn.fc1", 2 * dim, kFfnExpansion * dim);
  add_linear(layout, prefix + ".ffn.fc2", kFfnExpansion * dim, dim);
}

std::size_t dual_block_param_count(std::size_t dim) {
  std::vector<ParamSpec> layout;
  add_dual_block_layout(layout, "b", dim);
  return count_scalars(layout);
}

template <class T>
DualBranchParams<T> DualBranchParams<T>::from(const ParamStore<T>& store, const std::string& prefix,
                                              std::size_t heads) {
  DualBranchParams p;
  p.norm = LayerNorm<T>::from(store, prefix + ".norm");
  p.q = Linear<T>::from(store, prefix + ".attn.q");
  p.k = Linear<T>::from(store, prefix + ".attn.k");
  p.v = Linear<T>::from(store, prefix + ".attn.v");
  p.o = Linear<T>::from(store, prefix + ".attn.o");
  p.mlp1 = Linear<T>::from(store, prefix + ".mlp.fc1");
  p.mlp2 = Linear<T>::from(store, prefix + ".mlp.fc2");
  p.ffn1 = Linear<T>::from(store, prefix + ".ffn.fc1");
  p.ffn2 = Linear<T>::from(store, prefix + ".ffn.fc2");
  p.heads = heads;
  const std::size_t dim = p.q.weight.dim(0);
  require(heads >= 1 && dim % heads == 0, ErrorKind::Config,
          prefix + ": " + std::to_string(heads) + " heads do not divide width " + std::to_string(dim));
  return p;
}

template <class T>
nd::Tensor<T> attention_branch(const nd::Tensor<T>& x, const DualBranchParams<T>& p, std::size_t batch,
                               std::size_t seq) {
  auto q = p.q(x);
  auto k = p.k(x);
  auto v = p.v(x);
  return p.o(nd::multi_head_attention(q, k, v, batch, seq, p.heads));
}

template <class T>
nd::Tensor<T> mlp_branch(const nd::Tensor<T>& x, const DualBranchParams<T>& p) {
  return p.mlp2(nd::gelu(p.mlp1(x)));
}

template <class T>
nd::Tensor<T> fuse(const nd::Tensor<T>& attn_out, const nd::Tensor<T>& mlp_out, const DualBranchParams<T>& p) {
  if (attn_out.shape() != mlp_out.shape()) {
    fail(ErrorKind::Dimension, "fuse: branch shapes differ " + nd::shape_str(attn_out.shape()) + " vs " +
                                   nd::shape_str(mlp_out.shape()));
  }
  auto cat = nd::concat_cols<T>({attn_out, mlp_out});
  return p.ffn2(nd::gelu(p.ffn1(cat)));
}

template <class T>
BlockOutput<T> dual_block(const nd::Tensor<T>& x, const DualBranchParams<T>& p, std::size_t batch, std::size_t seq) {
  auto xn = p.norm(x);
  BlockOutput<T> out;
  out.trace.attn_out = attention_branch(xn, p, batch, seq);
  out.trace.mlp_out = mlp_branch(xn, p);
  out.y = nd::add(x, fuse(out.trace.attn_out, out.trace.mlp_out, p));
  return out;
}

#define PMT_INSTANTIATE(T)                                                                                 \
  template struct DualBranchParams<T>;                                                                    \
  template nd::Tensor<T> attention_branch(const nd::Tensor<T>&, const DualBranchParams<T>&, std::size_t,   \
                                          std::size_t);                                                    \
  template nd::Tensor<T> mlp_branch(const nd::Tensor<T>&, const DualBranchParams<T>&);                     \
  template nd::Tensor<T> fuse(const nd::Tensor<T>&, const nd::Tensor<T>&, const DualBranchParams<T>&);     \
  template BlockOutput<T> dual_block(const nd::Tensor<T>&, const DualBranchParams<T>&, std::size_t, std::size_t);

PMT_INSTANTIATE(float)
PMT_INSTANTIATE(double)
#undef PMT_INSTANTIATE

}  // namespace pmt
