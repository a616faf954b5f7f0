// SPDX-License-Identifier: Apache-2.0
#pragma once

// Point-cloud sampling, local grouping and the Chamfer-L2 reconstruction loss.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pmtmae/ndcore.hpp"

namespace pmt {

using Point3 = std::array<float, 3>;

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
};

// G local patches of k points each. Patch coordinates are stored relative to
// their center; source_indices point back into the parent cloud.
struct PatchSet {
  std::size_t k = 0;
  std::vector<Point3> centers;              // G
  std::vector<Point3> patches;              // G*k, center-relative
  std::vector<std::uint32_t> source_indices;  // G*k

  std::size_t groups() const { return centers.size(); }
};

// Centers the cloud at its centroid and scales the farthest point to norm 1.
PointCloud normalize(const PointCloud& cloud);

// Greedy farthest-point sampling from a fixed start index. Ties go to the
// lowest index.
std::vector<std::size_t> fps_from(const PointCloud& cloud, std::size_t m, std::size_t start);
// Same, with the start index drawn from `seed`.
std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::uint64_t seed);
std::size_t fps_start_index(std::size_t n, std::uint64_t seed);

// k nearest neighbours (Euclidean, center included, ties by lowest index)
// around each of the given center points.
PatchSet knn_group(const PointCloud& cloud, std::span<const std::size_t> center_indices, std::size_t k);

// fps followed by knn_group.
PatchSet make_patches(const PointCloud& cloud, std::size_t groups, std::size_t k, std::uint64_t seed);

// Symmetric Chamfer distance with squared Euclidean terms:
// mean over recon of the nearest squared distance into target plus the
// mean over target of the nearest squared distance into recon.
double chamfer_l2(std::span<const Point3> recon, std::span<const Point3> target);

// Differentiable form; recon is M×3, target is N×3. Gradients reach both.
template <class T>
nd::Tensor<T> chamfer_l2(const nd::Tensor<T>& recon, const nd::Tensor<T>& target);

// Chamfer applied independently to `patches` consecutive point groups and
// averaged. recon rows = patches·k_r, target rows = patches·k_t.
template <class T>
nd::Tensor<T> chamfer_l2_patches(const nd::Tensor<T>& recon, const nd::Tensor<T>& target, std::size_t patches);

}  // namespace pmt
