// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/optim.hpp"

#include <cmath>
#include <numbers>

namespace pmt {

void Schedule::validate() const {
  require(total_epochs >= 1, ErrorKind::Config, "schedule: total_epochs must be >= 1");
  require(lr_min <= lr_max, ErrorKind::Config, "schedule: lr_min must not exceed lr_max");
  require(lr_min >= 0.0, ErrorKind::Config, "schedule: learning rates must be non-negative");
}

double cosine_lr(int epoch, const Schedule& sched) {
  sched.validate();
  if (epoch < 0 || epoch > sched.total_epochs) {
    fail(ErrorKind::Contract, "cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                                  std::to_string(sched.total_epochs) + "]");
  }
  const double t = static_cast<double>(epoch) / static_cast<double>(sched.total_epochs);
  return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

void adamw_step(std::span<float> param, std::span<const float> grad, MomentBuffers& state, std::uint64_t step,
                double lr, const AdamWConfig& cfg, bool decay) {
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0f);
    state.v.assign(param.size(), 0.0f);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size() || grad.size() != param.size()) {
    fail(ErrorKind::Dimension, "adamw_step: parameter has " + std::to_string(param.size()) + " values, moments " +
                                   std::to_string(state.m.size()) + "/" + std::to_string(state.v.size()) +
                                   ", gradient " + std::to_string(grad.size()));
  }
  require(step >= 1, ErrorKind::Contract, "adamw_step: step count starts at 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg.eps);
  const float shrink = decay ? static_cast<float>(1.0 - lr * cfg.weight_decay) : 1.0f;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
    const float denom = std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps;
    param[i] = param[i] * shrink - step_size * state.m[i] / denom;
  }
}

AdamW::AdamW(std::vector<nd::Tensor<float>> params, std::vector<bool> decay, AdamWConfig cfg)
    : params_(std::move(params)), decay_(std::move(decay)), state_(params_.size()), cfg_(cfg) {
  require(decay_.size() == params_.size(), ErrorKind::Contract, "AdamW: decay mask length mismatch");
}

void AdamW::step(double lr) {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    adamw_step(p.mutable_data(), p.grad(), state_[i], step_, lr, cfg_, decay_[i]);
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(std::span<nd::Tensor<float>> params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto& g = p.node()->grad;
      for (auto& v : g) v *= s;
    }
  }
  return norm;
}

}  // namespace pmt
