// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pmtmae/dualbranch.hpp"
#include "pmtmae/geometry.hpp"
#include "pmtmae/layers.hpp"
#include "pmtmae/ndcore.hpp"

namespace fixture {

template <class T>
pmt::nd::Tensor<T> randn(pmt::nd::Shape s, std::mt19937_64& rng, double sd = 1.0, bool grad = true) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<T> v(pmt::nd::numel(s));
  for (T& x : v) x = static_cast<T>(g(rng));
  return pmt::nd::Tensor<T>::from(std::move(s), std::move(v), grad);
}

// One dual block with every parameter, biases included, drawn generically.
template <class T>
struct Block {
  pmt::ParamStore<T> store;
  pmt::DualBranchParams<T> params;

  Block(std::size_t dim, std::size_t heads, std::mt19937_64& rng) {
    std::vector<pmt::ParamSpec> layout;
    pmt::add_dual_block_layout(layout, "b", dim);
    store = pmt::ParamStore<T>(layout, rng());
    std::normal_distribution<double> g(0.0, 0.3);
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto t = store.tensors()[i];
      const bool gain = store.specs()[i].name == "b.norm.weight";
      for (T& x : t.mutable_data()) x = static_cast<T>(g(rng) + (gain ? 1.0 : 0.0));
    }
    params = pmt::DualBranchParams<T>::from(store, "b", heads);
  }

  void zero(const std::string& name) {
    auto t = store.get(name);
    for (T& x : t.mutable_data()) x = T(0);
  }
};

inline pmt::PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  pmt::PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) p = {g(rng), g(rng), g(rng)};
  return c;
}

}  // namespace fixture
