// SPDX-License-Identifier: Apache-2.0
#pragma once

// Branch-correlation histograms, feature export and reconstruction dumps.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pmtmae/data.hpp"
#include "pmtmae/model.hpp"

namespace pmt {

// cov(x, y) / (sigma_x sigma_y) with population moments. Throws Degenerate
// when either vector is constant; Contract when sizes differ or are < 2.
double pearson_r(std::span<const double> x, std::span<const double> y);
double pearson_r(std::span<const float> x, std::span<const float> y);

struct CorrHistogram {
  std::size_t block = 0;
  std::vector<double> edges;  // bins + 1, strictly increasing, edges.front() == -1, edges.back() == 1
  std::vector<std::size_t> counts;
  std::size_t undefined = 0;  // tokens whose r is undefined
  std::size_t total = 0;      // sum(counts) + undefined
  double sum_abs_r = 0.0;     // over defined tokens

  double mean_abs_r() const;
};

std::vector<double> uniform_edges(std::size_t bins);
// r = 1 lands in the last bin.
std::size_t bin_index(double r, std::size_t bins);
void add_sample(CorrHistogram& h, double r);

// Merges groups of `factor` adjacent bins; bins must be divisible by factor.
CorrHistogram rebin(const CorrHistogram& h, std::size_t factor);

struct CorrOptions {
  std::size_t bins = 41;
  bool masked = false;  // pre-training visibility instead of all tokens
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;  // mask draws when masked
};

std::vector<CorrHistogram> correlation_histogram(const Model<float>& model,
                                                 const std::vector<PatchedSample>& samples,
                                                 const CorrOptions& opt);

// One JSON object per block per line.
std::string corr_jsonl(const std::vector<CorrHistogram>& hists);
// block,bin_lo,bin_hi,count rows.
std::string corr_csv(const std::vector<CorrHistogram>& hists);

// CSV: sample_id,label,f0..f{3C-1}; full visibility.
std::string export_features(const Model<float>& model, const std::vector<PatchedSample>& samples,
                            std::size_t batch_size = 16);

struct ReconstructionResult {
  std::vector<Point3> ground_truth;
  std::vector<Point3> visible;        // absolute coordinates of visible patch members
  std::vector<Point3> reconstructed;  // absolute coordinates, masked patches
  std::vector<Point3> target;         // true masked patch members, absolute
  std::size_t masked = 0;
  double chamfer = 0.0;  // mean per-patch chamfer, center-relative
};

// Normalizes `cloud`, patches it per the model config and seed, masks at the
// model's ratio and decodes. Writes three PMTP sections when path is set.
ReconstructionResult export_reconstruction(const Model<float>& model, const PointCloud& cloud, std::uint64_t seed,
                                           const std::string& path);

}  // namespace pmt
