// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace pmt {

namespace {

double sq_dist(const Point3& a, const Point3& b) {
  const double dx = double(a[0]) - b[0], dy = double(a[1]) - b[1], dz = double(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

PointCloud normalize(const PointCloud& cloud) {
  require(!cloud.points.empty(), ErrorKind::Contract, "normalize: empty point cloud");
  double c[3] = {0, 0, 0};
  for (const auto& p : cloud.points) {
    for (int a = 0; a < 3; ++a) {
      require(std::isfinite(p[a]), ErrorKind::Degenerate, "normalize: non-finite coordinate");
      c[a] += p[a];
    }
  }
  const double n = static_cast<double>(cloud.points.size());
  for (double& v : c) v /= n;
  double far = 0.0;
  for (const auto& p : cloud.points) {
    const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    far = std::max(far, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  if (!(far > 0.0)) fail(ErrorKind::Degenerate, "normalize: all points coincide, scale is zero");
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points) {
    out.points.push_back({static_cast<float>((p[0] - c[0]) / far), static_cast<float>((p[1] - c[1]) / far),
                          static_cast<float>((p[2] - c[2]) / far)});
  }
  return out;
}

std::size_t fps_start_index(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return static_cast<std::size_t>(rng() % n);
}

std::vector<std::size_t> fps_from(const PointCloud& cloud, std::size_t m, std::size_t start) {
  const std::size_t n = cloud.size();
  if (m < 1 || m > n) {
    fail(ErrorKind::Contract, "fps: cannot pick " + std::to_string(m) + " of " + std::to_string(n) + " points");
  }
  require(start < n, ErrorKind::Contract, "fps: start index out of range");
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> out;
  out.reserve(m);
  std::size_t cur = start;
  for (std::size_t it = 0; it < m; ++it) {
    out.push_back(cur);
    taken[cur] = 1;
    if (it + 1 == m) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      mind[i] = std::min(mind[i], sq_dist(cloud.points[i], cloud.points[cur]));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::uint64_t seed) {
  require(!cloud.points.empty(), ErrorKind::Contract, "fps: empty point cloud");
  return fps_from(cloud, m, fps_start_index(cloud.size(), seed));
}

PatchSet knn_group(const PointCloud& cloud, std::span<const std::size_t> center_indices, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) {
    fail(ErrorKind::Contract, "knn_group: k=" + std::to_string(k) + " exceeds cloud size " + std::to_string(n));
  }
  PatchSet ps;
  ps.k = k;
  ps.centers.reserve(center_indices.size());
  ps.patches.reserve(center_indices.size() * k);
  ps.source_indices.reserve(center_indices.size() * k);
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t ci : center_indices) {
    require(ci < n, ErrorKind::Contract, "knn_group: center index out of range");
    const Point3& c = cloud.points[ci];
    for (std::size_t i = 0; i < n; ++i) d[i] = {sq_dist(cloud.points[i], c), i};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    ps.centers.push_back(c);
    for (std::size_t j = 0; j < k; ++j) {
      const Point3& p = cloud.points[d[j].second];
      ps.patches.push_back({p[0] - c[0], p[1] - c[1], p[2] - c[2]});
      ps.source_indices.push_back(static_cast<std::uint32_t>(d[j].second));
    }
  }
  return ps;
}

PatchSet make_patches(const PointCloud& cloud, std::size_t groups, std::size_t k, std::uint64_t seed) {
  const auto centers = fps(cloud, groups, seed);
  return knn_group(cloud, centers, k);
}

double chamfer_l2(std::span<const Point3> recon, std::span<const Point3> target) {
  require(!recon.empty() && !target.empty(), ErrorKind::Contract, "chamfer_l2: empty point set");
  auto directed = [](std::span<const Point3> from, std::span<const Point3> to) {
    double acc = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, sq_dist(p, q));
      acc += best;
    }
    return acc / static_cast<double>(from.size());
  };
  return directed(recon, target) + directed(target, recon);
}

namespace {

// Chamfer for one pair of point groups. Accumulates gradient coefficients
// into gr/gt (scaled by `w`) when they are non-null.
template <class T>
T chamfer_group(const T* r, std::size_t m, const T* t, std::size_t n, T w, T* gr, T* gt) {
  auto d2 = [](const T* a, const T* b) {
    const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  };
  T s1 = 0, s2 = 0;
  const T w1 = w / static_cast<T>(m), w2 = w / static_cast<T>(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    T bd = d2(r + 3 * i, t);
    for (std::size_t j = 1; j < n; ++j) {
      const T dd = d2(r + 3 * i, t + 3 * j);
      if (dd < bd) {
        bd = dd;
        best = j;
      }
    }
    s1 += bd;
    for (int a = 0; a < 3; ++a) {
      const T diff = T(2) * (r[3 * i + a] - t[3 * best + a]) * w1;
      if (gr) gr[3 * i + a] += diff;
      if (gt) gt[3 * best + a] -= diff;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    T bd = d2(t + 3 * j, r);
    for (std::size_t i = 1; i < m; ++i) {
      const T dd = d2(t + 3 * j, r + 3 * i);
      if (dd < bd) {
        bd = dd;
        best = i;
      }
    }
    s2 += bd;
    for (int a = 0; a < 3; ++a) {
      const T diff = T(2) * (t[3 * j + a] - r[3 * best + a]) * w2;
      if (gt) gt[3 * j + a] += diff;
      if (gr) gr[3 * best + a] -= diff;
    }
  }
  return s1 / static_cast<T>(m) + s2 / static_cast<T>(n);
}

template <class T>
void check_points(const char* op, const nd::Tensor<T>& x) {
  if (x.numel() == 0 || x.numel() % 3 != 0 || x.shape().back() != 3) {
    fail(ErrorKind::Contract, std::string(op) + ": expected a non-empty N×3 point set, got " + nd::shape_str(x.shape()));
  }
}

}  // namespace

template <class T>
nd::Tensor<T> chamfer_l2(const nd::Tensor<T>& recon, const nd::Tensor<T>& target) {
  return chamfer_l2_patches(recon, target, 1);
}

template <class T>
nd::Tensor<T> chamfer_l2_patches(const nd::Tensor<T>& recon, const nd::Tensor<T>& target, std::size_t patches) {
  check_points("chamfer_l2", recon);
  check_points("chamfer_l2", target);
  const std::size_t mr = recon.numel() / 3, mt = target.numel() / 3;
  require(patches >= 1 && mr % patches == 0 && mt % patches == 0, ErrorKind::Dimension,
          "chamfer_l2: point counts " + std::to_string(mr) + "/" + std::to_string(mt) + " do not split into " +
              std::to_string(patches) + " patches");
  const std::size_t kr = mr / patches, kt = mt / patches;
  const T inv = T(1) / static_cast<T>(patches);
  T total = 0;
  for (std::size_t p = 0; p < patches; ++p) {
    total += chamfer_group<T>(recon.data().data() + 3 * kr * p, kr, target.data().data() + 3 * kt * p, kt, T(0),
                              nullptr, nullptr);
  }
  total *= inv;
  return nd::make_result<T>({}, {total}, {recon, target}, [patches, kr, kt, inv](nd::Node<T>& self) {
    const T go = self.grad[0];
    T* gr = self.parents[0]->requires_grad ? self.parents[0]->grad_buffer().data() : nullptr;
    T* gt = self.parents[1]->requires_grad ? self.parents[1]->grad_buffer().data() : nullptr;
    const T* r = self.parents[0]->value.data();
    const T* t = self.parents[1]->value.data();
    for (std::size_t p = 0; p < patches; ++p) {
      chamfer_group<T>(r + 3 * kr * p, kr, t + 3 * kt * p, kt, go * inv, gr ? gr + 3 * kr * p : nullptr,
                       gt ? gt + 3 * kt * p : nullptr);
    }
  });
}

template nd::Tensor<float> chamfer_l2<float>(const nd::Tensor<float>&, const nd::Tensor<float>&);
template nd::Tensor<double> chamfer_l2<double>(const nd::Tensor<double>&, const nd::Tensor<double>&);
template nd::Tensor<float> chamfer_l2_patches<float>(const nd::Tensor<float>&, const nd::Tensor<float>&, std::size_t);
template nd::Tensor<double> chamfer_l2_patches<double>(const nd::Tensor<double>&, const nd::Tensor<double>&, std::size_t);

}  // namespace pmt
