// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/gradcheck.hpp"

#include <cmath>
#include <random>

#include "pmtmae/distill.hpp"
#include "pmtmae/dualbranch.hpp"
#include "pmtmae/geometry.hpp"

namespace pmt {

using nd::Tensor;
using T64 = Tensor<double>;

double grad_rel_error(const std::vector<T64>& inputs, const std::function<T64()>& f, double h) {
  for (auto in : inputs) in.zero_grad();
  nd::backward(f());
  std::vector<double> analytic, numeric;
  for (auto in : inputs) {
    auto g = in.grad();
    if (in.has_grad()) analytic.insert(analytic.end(), g.begin(), g.end());
    else analytic.insert(analytic.end(), in.numel(), 0.0);
  }
  nd::NoGradGuard ng;
  for (auto in : inputs) {
    auto d = in.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x0 = d[i];
      d[i] = x0 + h;
      const double fp = f().item();
      d[i] = x0 - h;
      const double fm = f().item();
      d[i] = x0;
      numeric.push_back((fp - fm) / (2.0 * h));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

std::vector<std::string> grad_check_ops() {
  return {"matmul",         "softmax", "layer_norm", "gelu",      "attention_branch",  "mlp_branch",
          "fuse",           "dual_block", "chamfer_l2", "feat_distill_loss", "logit_distill_loss", "ce_loss"};
}

namespace {

struct Case {
  std::vector<T64> inputs;
  std::function<T64()> f;
};

T64 randn(nd::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  std::vector<double> v(nd::numel(shape));
  for (double& x : v) x = g(rng);
  return T64::from(std::move(shape), std::move(v), true);
}

T64 constant(nd::Shape shape, std::mt19937_64& rng) {
  auto t = randn(std::move(shape), rng);
  t.set_requires_grad(false);
  return t;
}

struct BlockFixture {
  ParamStore<double> store;
  DualBranchParams<double> params;
  std::vector<T64> tensors;
};

BlockFixture block_fixture(std::mt19937_64& rng) {
  constexpr std::size_t C = 8, H = 2;
  std::vector<ParamSpec> layout;
  add_dual_block_layout(layout, "b", C);
  BlockFixture fx{ParamStore<double>(layout, rng()), {}, {}};
  // Generic values everywhere, including biases and norm affine terms.
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto t : fx.store.tensors()) {
    for (double& x : t.mutable_data()) x = g(rng);
    fx.tensors.push_back(t);
  }
  for (std::size_t i = 0; i < fx.store.size(); ++i) {
    const auto& name = fx.store.specs()[i].name;
    if (name.find("norm.weight") != std::string::npos) {
      auto t = fx.store.tensors()[i];
      for (double& x : t.mutable_data()) x += 1.0;
    }
  }
  fx.params = DualBranchParams<double>::from(fx.store, "b", H);
  return fx;
}

std::vector<T64> subset(const BlockFixture& fx, std::initializer_list<const char*> prefixes) {
  std::vector<T64> out;
  for (std::size_t i = 0; i < fx.store.size(); ++i) {
    for (const char* p : prefixes) {
      if (fx.store.specs()[i].name.rfind(p, 0) == 0) {
        out.push_back(fx.tensors[i]);
        break;
      }
    }
  }
  return out;
}

Case make_case(const std::string& op, std::mt19937_64& rng) {
  constexpr std::size_t B = 2, S = 3, C = 8;
  if (op == "matmul") {
    auto a = randn({3, 4}, rng), b = randn({4, 5}, rng);
    auto r = constant({3, 5}, rng);
    return {{a, b}, [=] { return nd::sum(nd::mul(nd::matmul(a, b), r)); }};
  }
  if (op == "softmax") {
    auto x = randn({3, 5}, rng);
    auto r = constant({3, 5}, rng);
    return {{x}, [=] { return nd::sum(nd::mul(nd::softmax(x, -1), r)); }};
  }
  if (op == "layer_norm") {
    auto x = randn({4, 8}, rng), gamma = randn({8}, rng), beta = randn({8}, rng);
    auto r = constant({4, 8}, rng);
    return {{x, gamma, beta}, [=] { return nd::sum(nd::mul(nd::layer_norm(x, gamma, beta, 1e-5), r)); }};
  }
  if (op == "gelu") {
    auto x = randn({4, 6}, rng, 1.5);
    auto r = constant({4, 6}, rng);
    return {{x}, [=] { return nd::sum(nd::mul(nd::gelu(x), r)); }};
  }
  if (op == "chamfer_l2") {
    auto a = randn({5, 3}, rng), b = randn({6, 3}, rng);
    return {{a, b}, [=] { return chamfer_l2(a, b); }};
  }
  if (op == "feat_distill_loss") {
    auto s = randn({6, 4}, rng);
    auto t = constant({6, 4}, rng);
    return {{s}, [=] { return feat_distill_loss(s, t, 2); }};
  }
  if (op == "logit_distill_loss") {
    auto s = randn({3, 5}, rng, 2.0);
    auto t = constant({3, 5}, rng);
    return {{s}, [=] { return logit_distill_loss(s, t, 3.0); }};
  }
  if (op == "ce_loss") {
    auto z = randn({4, 5}, rng, 2.0);
    std::vector<int> labels(4);
    for (int& l : labels) l = static_cast<int>(rng() % 5);
    return {{z}, [=] { return ce_loss(z, std::span<const int>(labels)); }};
  }

  auto fx = std::make_shared<BlockFixture>(block_fixture(rng));
  auto x = randn({B * S, C}, rng);
  auto r = constant({B * S, C}, rng);
  if (op == "attention_branch") {
    auto in = subset(*fx, {"b.attn."});
    in.push_back(x);
    return {in, [=] { return nd::sum(nd::mul(attention_branch(x, fx->params, B, S), r)); }};
  }
  if (op == "mlp_branch") {
    auto in = subset(*fx, {"b.mlp."});
    in.push_back(x);
    return {in, [=] { return nd::sum(nd::mul(mlp_branch(x, fx->params), r)); }};
  }
  if (op == "fuse") {
    auto y = randn({B * S, C}, rng);
    auto in = subset(*fx, {"b.ffn."});
    in.push_back(x);
    in.push_back(y);
    return {in, [=] { return nd::sum(nd::mul(fuse(x, y, fx->params), r)); }};
  }
  if (op == "dual_block") {
    auto in = fx->tensors;
    in.push_back(x);
    return {in, [=] { return nd::sum(nd::mul(dual_block(x, fx->params, B, S).y, r)); }};
  }
  fail(ErrorKind::Contract, "grad-check: unknown op \"" + op + "\"");
}

}  // namespace

std::vector<GradCheckRow> run_grad_check(std::uint64_t base_seed, std::size_t seeds) {
  require(seeds >= 1, ErrorKind::Config, "grad-check: at least one seed required");
  std::vector<GradCheckRow> rows;
  const auto ops = grad_check_ops();
  for (std::size_t oi = 0; oi < ops.size(); ++oi) {
    const auto& op = ops[oi];
    GradCheckRow row;
    row.op = op;
    row.seeds = seeds;
    for (std::size_t s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(mix_seed(base_seed + s, oi));
      auto c = make_case(op, rng);
      std::size_t n = 0;
      for (const auto& t : c.inputs) n += t.numel();
      row.scalars = n;
      const double err = grad_rel_error(c.inputs, c.f);
      row.max_rel_err = std::max(row.max_rel_err, std::isfinite(err) ? err : INFINITY);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace pmt
