// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode gradients against double-precision central differences.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pmtmae/ndcore.hpp"

namespace pmt {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kFiniteStep = 1e-5;

// ‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, 1e-12) over all
// inputs jointly. `f` must rebuild the scalar from the current input values.
double grad_rel_error(const std::vector<nd::Tensor<double>>& inputs,
                      const std::function<nd::Tensor<double>()>& f, double h = kFiniteStep);

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0.0;
  std::size_t seeds = 0;
  std::size_t scalars = 0;  // inputs perturbed per seed
};

std::vector<std::string> grad_check_ops();

// Runs every op over seeds base_seed .. base_seed + seeds - 1.
std::vector<GradCheckRow> run_grad_check(std::uint64_t base_seed, std::size_t seeds = 20);

}  // namespace pmt
