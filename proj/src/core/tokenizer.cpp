// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/tokenizer.hpp"

namespace pmt {

void add_tokenizer_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim) {
  add_linear(layout, prefix + ".fc1", 3, kPointNetHidden1);
  add_linear(layout, prefix + ".fc2", kPointNetHidden1, kPointNetHidden2);
  add_linear(layout, prefix + ".fc3", kPointNetHidden2, dim);
}

void add_pos_embed_layout(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim) {
  add_linear(layout, prefix + ".fc1", 3, kPosHidden);
  add_linear(layout, prefix + ".fc2", kPosHidden, dim);
}

template <class T>
TokenizerParams<T> TokenizerParams<T>::from(const ParamStore<T>& store, const std::string& prefix) {
  return {Linear<T>::from(store, prefix + ".fc1"), Linear<T>::from(store, prefix + ".fc2"),
          Linear<T>::from(store, prefix + ".fc3")};
}

template <class T>
PosEmbedParams<T> PosEmbedParams<T>::from(const ParamStore<T>& store, const std::string& prefix) {
  return {Linear<T>::from(store, prefix + ".fc1"), Linear<T>::from(store, prefix + ".fc2")};
}

template <class T>
nd::Tensor<T> embed_patches(const nd::Tensor<T>& points, std::size_t k, const TokenizerParams<T>& p) {
  require(points.rank() == 2 && points.dim(1) == 3, ErrorKind::Dimension,
          "embed_patches: expected (patches*k)x3 points, got " + nd::shape_str(points.shape()));
  auto h = nd::gelu(p.fc1(points));
  return p.fc3(nd::linear_segment_max(h, p.fc2.weight, p.fc2.bias, k));
}

template <class T>
nd::Tensor<T> pos_embed(const nd::Tensor<T>& centers, const PosEmbedParams<T>& p) {
  return p.fc2(nd::gelu(p.fc1(centers)));
}

template struct TokenizerParams<float>;
template struct TokenizerParams<double>;
template struct PosEmbedParams<float>;
template struct PosEmbedParams<double>;
template nd::Tensor<float> embed_patches(const nd::Tensor<float>&, std::size_t, const TokenizerParams<float>&);
template nd::Tensor<double> embed_patches(const nd::Tensor<double>&, std::size_t, const TokenizerParams<double>&);
template nd::Tensor<float> pos_embed(const nd::Tensor<float>&, const PosEmbedParams<float>&);
template nd::Tensor<double> pos_embed(const nd::Tensor<double>&, const PosEmbedParams<double>&);

}  // namespace pmt
