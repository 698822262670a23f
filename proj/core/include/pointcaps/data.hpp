#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pointcaps/tensor.hpp"

namespace pointcaps {

// Synthetic shape catalogue. Each kind carries a fixed set of geometric part
// regions so one dataset serves classification, reconstruction and
// segmentation at once.
enum class ShapeKind { Sphere, Cube, Cylinder, Torus, Plane };

inline constexpr int kShapeKindCount = 5;

std::string shape_kind_name(ShapeKind kind);
ShapeKind shape_kind_from(const std::string& name);

// Number of distinct part labels a freshly sampled cloud of this kind uses.
int64_t shape_part_count(ShapeKind kind);

struct PointCloud {
  int64_t count = 0;
  std::vector<real> points;         // 3 reals per point
  std::vector<real> normals;        // 3 reals per point, may be empty
  std::vector<int64_t> part_labels; // one per point, may be empty; -1 = invalid
  int64_t label = -1;               // class index, -1 when unknown

  bool has_normals() const { return !normals.empty(); }
  bool has_parts() const { return !part_labels.empty(); }
};

// Raw surface sampling: area-uniform points with analytic unit normals and
// geometric part labels, in the shape's canonical pose (not normalized).
PointCloud sample_shape(ShapeKind kind, int64_t n, std::mt19937_64& rng);

// Center the centroid on the origin, then scale the farthest point to radius 1.
void normalize_cloud(PointCloud& cloud);

// sample_shape + normalize_cloud, fully determined by (kind, n, seed).
PointCloud generate_shape(ShapeKind kind, int64_t n, uint64_t seed);

// Adds i.i.d. N(0, sigma^2) per coordinate. Labels and normals untouched;
// sigma = 0 returns an exact copy.
PointCloud perturb_gaussian(const PointCloud& cloud, real sigma, uint64_t seed);

// Replaces `count` distinct points with N(0, sigma^2) draws. Replaced points
// get part label -1 and a zero normal.
PointCloud add_outliers(const PointCloud& cloud, int64_t count, real sigma, uint64_t seed);

// Text format: one point per line, `x y z [nx ny nz] [part]` (3/4/6/7 columns),
// `#` comments. Coordinates round-trip exactly.
void save_cloud(const std::string& path, const PointCloud& cloud);
PointCloud load_cloud(const std::string& path);

Tensor cloud_to_tensor(const PointCloud& cloud, bool with_normals);
Tensor stack_clouds(const std::vector<PointCloud>& clouds, bool with_normals);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int64_t label = -1;
};

struct DatasetManifest {
  std::string split;  // tag of the containing directory, e.g. "train"
  std::vector<ManifestEntry> entries;
};

// Two-column CSV with a `path,label` header.
void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path);

using Dataset = std::vector<PointCloud>;

// Writes `<root>/<split>/<kind>/<id>.xyz` for every kind in `kinds` plus the
// split's manifest; class labels are positions in `kinds`. Deterministic per
// (seed, split, kind, id), independent of generation order.
DatasetManifest generate_dataset(const std::string& root, const std::string& split,
                                 const std::vector<ShapeKind>& kinds, int64_t per_class,
                                 int64_t points, uint64_t seed);

// Loads every cloud listed in `<root>/<split>/manifest.csv`, labels applied.
Dataset load_dataset(const std::string& root, const std::string& split);

// Picks a per-class-balanced subset of about `fraction` of the samples such
// that every part label present in a class remains represented; re-draws with
// a bumped seed until that holds.
std::vector<int64_t> select_labeled_fraction(const Dataset& dataset, real fraction,
                                             uint64_t seed);

}  // namespace pointcaps
