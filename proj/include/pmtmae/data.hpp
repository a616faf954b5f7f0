// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic labelled shape datasets and point-cloud file I/O.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pmtmae/geometry.hpp"
#include "pmtmae/model.hpp"

namespace pmt {

enum class ShapeKind { Sphere, Cube, Torus, Cylinder, Cone };

std::string shape_name(ShapeKind kind);
ShapeKind shape_from_name(std::string_view name);

struct SyntheticSpec {
  std::vector<ShapeKind> classes{ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Cylinder,
                                 ShapeKind::Cone};
  std::size_t points = 512;
  double sigma = 0.02;
  std::size_t per_class = 125;
  std::uint64_t seed = 0;
  // Per-cloud random rotation and aspect stretch up to ±variation on the
  // non-sphere shapes. Zero gives canonical, axis-aligned shapes.
  double variation = 0.0;
  bool rotate = false;

  void validate() const;
};

enum class Split { Train, Test };

struct Sample {
  std::uint64_t id = 0;
  PointCloud cloud;  // normalized, label set
  Split split = Split::Train;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(Split s) const;
  std::size_t num_classes() const { return class_names.size(); }
};

// Raw surface samples of one shape, jittered, before normalization.
std::vector<Point3> sample_shape(ShapeKind kind, std::size_t n, double sigma, std::mt19937_64& rng);

// Deterministic per seed; 80/20 split stratified by class.
Dataset gen_synthetic(const SyntheticSpec& spec);

// ".xyz" text (one whitespace-separated triple per line) or "PMTP" binary
// (magic, u32 count, count*3 f32), chosen by extension: ".xyz" is text,
// anything else binary.
PointCloud load_cloud(const std::string& path);
void save_cloud(const std::string& path, const PointCloud& cloud);

std::vector<Point3> parse_xyz(std::string_view text, const std::string& what);
std::string format_xyz(const std::vector<Point3>& points);
std::string encode_pmtp(const std::vector<Point3>& points);
// Reads one PMTP section starting at the reader's cursor.
std::vector<Point3> decode_pmtp(std::string_view bytes, const std::string& what);

// Several PMTP sections back to back in one file.
void save_pmtp_sections(const std::string& path, const std::vector<std::vector<Point3>>& sections);
std::vector<std::vector<Point3>> load_pmtp_sections(const std::string& path);

// Directory layout: manifest.json plus clouds/<id>.pmtp.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// A sample with its patches precomputed. Patch centers depend only on the
// sample id, so teacher and student always see the same patches.
struct PatchedSample {
  std::uint64_t id = 0;
  int label = -1;
  PatchSet patches;
};

std::uint64_t patch_seed(std::uint64_t sample_id);

std::vector<PatchedSample> prepare_patches(const Dataset& ds, Split split, const ModelConfig& cfg);
std::vector<PatchedSample> prepare_patches(const std::vector<const Sample*>& samples, const ModelConfig& cfg);

}  // namespace pmt
