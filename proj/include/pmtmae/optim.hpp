// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pmtmae/ndcore.hpp"

namespace pmt {

// Cosine decay from lr_max to lr_min, stepped once per epoch.
struct Schedule {
  double lr_max = 1.0e-3;
  double lr_min = 1.0e-6;
  int total_epochs = 40;

  void validate() const;
};

double cosine_lr(int epoch, const Schedule& sched);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// First and second moment buffers for one parameter.
struct MomentBuffers {
  std::vector<float> m;
  std::vector<float> v;
};

// One decoupled-weight-decay Adam update of `param` in place. `step` is the
// 1-based step count used for bias correction.
void adamw_step(std::span<float> param, std::span<const float> grad, MomentBuffers& state, std::uint64_t step,
                double lr, const AdamWConfig& cfg, bool decay);

// Optimizer over a fixed, ordered parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<nd::Tensor<float>> params, std::vector<bool> decay, AdamWConfig cfg);

  // Applies one update using the current gradients, then clears them.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  void set_steps(std::uint64_t s) { step_ = s; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<MomentBuffers>& state() { return state_; }
  const std::vector<MomentBuffers>& state() const { return state_; }

 private:
  std::vector<nd::Tensor<float>> params_;
  std::vector<bool> decay_;
  std::vector<MomentBuffers> state_;
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(std::span<nd::Tensor<float>> params, double max_norm);

}  // namespace pmt
