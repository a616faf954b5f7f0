// SPDX-License-Identifier: Apache-2.0
#pragma once

// Named parameter storage and the two primitive layers everything else is
// assembled from.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pmtmae/ndcore.hpp"

namespace pmt {

enum class Init { XavierUniform, Zeros, Ones, TokenNormal };

// One entry of a model's parameter table, independent of storage.
struct ParamSpec {
  std::string name;
  nd::Shape shape;
  Init init;
  bool decay;  // subject to AdamW weight decay
};

std::size_t count_scalars(const std::vector<ParamSpec>& layout);

// Ordered table of named learnable tensors. Iteration order is insertion
// order, which is also the checkpoint order.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  // Allocates and initializes every entry of `layout` from a seeded stream.
  ParamStore(const std::vector<ParamSpec>& layout, std::uint64_t seed);

  const nd::Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  const std::vector<nd::Tensor<T>>& tensors() const { return tensors_; }
  std::size_t scalar_count() const;

  void zero_grad();
  // FNV-1a over the raw parameter bytes, in table order.
  std::uint64_t hash() const;

 private:
  std::vector<ParamSpec> specs_;
  std::vector<nd::Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Linear {
  nd::Tensor<T> weight;  // in×out
  nd::Tensor<T> bias;    // out

  nd::Tensor<T> operator()(const nd::Tensor<T>& x) const { return nd::linear(x, weight, bias); }
  static Linear from(const ParamStore<T>& store, const std::string& prefix);
};

template <class T>
struct LayerNorm {
  nd::Tensor<T> weight;
  nd::Tensor<T> bias;

  nd::Tensor<T> operator()(const nd::Tensor<T>& x) const { return nd::layer_norm(x, weight, bias, T(1e-5)); }
  static LayerNorm from(const ParamStore<T>& store, const std::string& prefix);
};

// Layout helpers: append the entries a Linear / LayerNorm needs.
void add_linear(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t in, std::size_t out);
void add_layer_norm(std::vector<ParamSpec>& layout, const std::string& prefix, std::size_t dim);

}  // namespace pmt
