// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/layers.hpp"

#include <cmath>
#include <cstring>

namespace pmt {

std::size_t count_scalars(const std::vector<ParamSpec>& layout) {
  std::size_t n = 0;
  for (const auto& p : layout) n += nd::numel(p.shape);
  return n;
}

void add_linear(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t in, std::size_t out) {
  layout.push_back({prefix + ".weight", {in, out}, Init::XavierUniform, true});
  layout.push_back({prefix + ".bias", {out}, Init::Zeros, false});
}

void add_layer_norm(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim) {
  layout.push_back({prefix + ".weight", {dim}, Init::Ones, false});
  layout.push_back({prefix + ".bias", {dim}, Init::Zeros, false});
}

template <class T>
ParamStore<T>::ParamStore(const std::vector<ParamSpec>& layout, std::uint64_t seed) : specs_(layout) {
  std::mt19937_64 rng(seed);
  tensors_.reserve(layout.size());
  for (const auto& spec : layout) {
    require(!index_.count(spec.name), ErrorKind::Contract, "duplicate parameter name " + spec.name);
    std::vector<T> v(nd::numel(spec.shape));
    switch (spec.init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case Init::XavierUniform: {
        const double fan_in = static_cast<double>(spec.shape.front());
        const double fan_out = static_cast<double>(spec.shape.back());
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& x : v) x = static_cast<T>(dist(rng));
        break;
      }
      case Init::TokenNormal: {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& x : v) x = static_cast<T>(dist(rng));
        break;
      }
    }
    index_[spec.name] = tensors_.size();
    tensors_.push_back(nd::Tensor<T>::from(spec.shape, std::move(v), true));
  }
}

template <class T>
const nd::Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::Contract, "unknown parameter " + name);
  return tensors_[it->second];
}

template <class T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& t : tensors_) const_cast<nd::Tensor<T>&>(t).zero_grad();
}

template <class T>
std::uint64_t ParamStore<T>::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors_) {
    const auto d = t.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

template <class T>
Linear<T> Linear<T>::from(const ParamStore<T>& store, const std::string& prefix) {
  return {store.get(prefix + ".weight"), store.get(prefix + ".bias")};
}

template <class T>
LayerNorm<T> LayerNorm<T>::from(const ParamStore<T>& store, const std::string& prefix) {
  return {store.get(prefix + ".weight"), store.get(prefix + ".bias")};
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;

}  // namespace pmt
