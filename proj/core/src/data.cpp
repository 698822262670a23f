#include "pointcaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pointcaps/errors.hpp"

namespace fs = std::filesystem;

namespace pointcaps {

std::string shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Plane: return "plane";
  }
  throw ConfigError("unknown shape kind");
}

ShapeKind shape_kind_from(const std::string& name) {
  if (name == "sphere") return ShapeKind::Sphere;
  if (name == "cube") return ShapeKind::Cube;
  if (name == "cylinder") return ShapeKind::Cylinder;
  if (name == "torus") return ShapeKind::Torus;
  if (name == "plane") return ShapeKind::Plane;
  throw ConfigError("unknown shape kind '" + name + "'");
}

int64_t shape_part_count(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere: return 8;   // octants
    case ShapeKind::Cube: return 6;     // faces
    case ShapeKind::Cylinder: return 3; // side + two caps
    case ShapeKind::Torus: return 4;    // major-angle quadrants
    case ShapeKind::Plane: return 4;    // quadrants
  }
  throw ConfigError("unknown shape kind");
}

namespace {

constexpr real kPi = real(3.14159265358979323846);

// Hand-rolled draws so generated data is identical under any standard library.
real unit_real(std::mt19937_64& rng) {
  return static_cast<real>(rng() >> 11) * 0x1.0p-53;
}

real uniform_real(std::mt19937_64& rng, real lo, real hi) {
  return lo + (hi - lo) * unit_real(rng);
}

real gaussian(std::mt19937_64& rng, real sigma) {
  const real u1 = real(1) - unit_real(rng);  // (0, 1]
  const real u2 = unit_real(rng);
  return sigma * std::sqrt(real(-2) * std::log(u1)) * std::cos(2 * kPi * u2);
}

int64_t bounded_int(std::mt19937_64& rng, int64_t n) {
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do { x = rng(); } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

void push_point(PointCloud& pc, real x, real y, real z, real nx, real ny, real nz,
                int64_t part) {
  pc.points.insert(pc.points.end(), {x, y, z});
  pc.normals.insert(pc.normals.end(), {nx, ny, nz});
  pc.part_labels.push_back(part);
}

void sample_sphere(PointCloud& pc, int64_t n, std::mt19937_64& rng) {
  for (int64_t i = 0; i < n; ++i) {
    const real z = uniform_real(rng, -1, 1);
    const real phi = uniform_real(rng, 0, 2 * kPi);
    const real r = std::sqrt(std::max(real(0), 1 - z * z));
    const real x = r * std::cos(phi);
    const real y = r * std::sin(phi);
    const int64_t part = (x >= 0 ? 1 : 0) | (y >= 0 ? 2 : 0) | (z >= 0 ? 4 : 0);
    push_point(pc, x, y, z, x, y, z, part);
  }
}

void sample_cube(PointCloud& pc, int64_t n, std::mt19937_64& rng) {
  for (int64_t i = 0; i < n; ++i) {
    const int64_t face = bounded_int(rng, 6);  // equal areas
    const real a = uniform_real(rng, -1, 1);
    const real b = uniform_real(rng, -1, 1);
    const int axis = static_cast<int>(face / 2);
    const real sign = face % 2 == 0 ? real(1) : real(-1);
    real p[3] = {a, b, sign};
    std::swap(p[axis], p[2]);
    real nrm[3] = {0, 0, 0};
    nrm[axis] = sign;
    push_point(pc, p[0], p[1], p[2], nrm[0], nrm[1], nrm[2], face);
  }
}

void sample_cylinder(PointCloud& pc, int64_t n, std::mt19937_64& rng) {
  // Radius 1, height 2: side area 4*pi, each cap pi.
  for (int64_t i = 0; i < n; ++i) {
    const real pick = unit_real(rng) * 6;
    const real phi = uniform_real(rng, 0, 2 * kPi);
    if (pick < 4) {
      const real z = uniform_real(rng, -1, 1);
      push_point(pc, std::cos(phi), std::sin(phi), z, std::cos(phi), std::sin(phi), 0, 0);
    } else {
      const real rho = std::sqrt(unit_real(rng));
      const real z = pick < 5 ? real(1) : real(-1);
      push_point(pc, rho * std::cos(phi), rho * std::sin(phi), z, 0, 0, z, pick < 5 ? 1 : 2);
    }
  }
}

void sample_torus(PointCloud& pc, int64_t n, std::mt19937_64& rng) {
  const real R = real(1), r = real(0.35);
  for (int64_t i = 0; i < n; ++i) {
    const real u = uniform_real(rng, 0, 2 * kPi);
    real v;
    do {  // area weight (R + r cos v) / (R + r)
      v = uniform_real(rng, 0, 2 * kPi);
    } while (unit_real(rng) * (R + r) >= R + r * std::cos(v));
    const real ring = R + r * std::cos(v);
    const int64_t part = std::min<int64_t>(3, static_cast<int64_t>(u / (kPi / 2)));
    push_point(pc, ring * std::cos(u), ring * std::sin(u), r * std::sin(v),
               std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v), part);
  }
}

void sample_plane(PointCloud& pc, int64_t n, std::mt19937_64& rng) {
  for (int64_t i = 0; i < n; ++i) {
    const real x = uniform_real(rng, -1, 1);
    const real y = uniform_real(rng, -1, 1);
    const int64_t part = (x >= 0 ? 1 : 0) | (y >= 0 ? 2 : 0);
    push_point(pc, x, y, 0, 0, 0, 1, part);
  }
}

}  // namespace

PointCloud sample_shape(ShapeKind kind, int64_t n, std::mt19937_64& rng) {
  if (n < 16) throw InputError("sample_shape: need at least 16 points");
  PointCloud pc;
  pc.count = n;
  pc.points.reserve(static_cast<size_t>(3 * n));
  pc.normals.reserve(static_cast<size_t>(3 * n));
  pc.part_labels.reserve(static_cast<size_t>(n));
  switch (kind) {
    case ShapeKind::Sphere: sample_sphere(pc, n, rng); break;
    case ShapeKind::Cube: sample_cube(pc, n, rng); break;
    case ShapeKind::Cylinder: sample_cylinder(pc, n, rng); break;
    case ShapeKind::Torus: sample_torus(pc, n, rng); break;
    case ShapeKind::Plane: sample_plane(pc, n, rng); break;
    default: throw ConfigError("unknown shape kind");
  }
  return pc;
}

void normalize_cloud(PointCloud& cloud) {
  const int64_t n = cloud.count;
  if (n == 0) return;
  real c[3] = {0, 0, 0};
  for (int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) c[k] += cloud.points[static_cast<size_t>(3 * i + k)];
  }
  for (int k = 0; k < 3; ++k) c[k] /= static_cast<real>(n);
  real max_r2 = 0;
  for (int64_t i = 0; i < n; ++i) {
    real r2 = 0;
    for (int k = 0; k < 3; ++k) {
      real& p = cloud.points[static_cast<size_t>(3 * i + k)];
      p -= c[k];
      r2 += p * p;
    }
    max_r2 = std::max(max_r2, r2);
  }
  const real scale = std::sqrt(max_r2);
  if (scale <= 0) return;  // degenerate single-position cloud
  for (real& p : cloud.points) p /= scale;
}

PointCloud generate_shape(ShapeKind kind, int64_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  PointCloud pc = sample_shape(kind, n, rng);
  normalize_cloud(pc);
  return pc;
}

PointCloud perturb_gaussian(const PointCloud& cloud, real sigma, uint64_t seed) {
  if (sigma < 0) throw InputError("perturb_gaussian: sigma must be >= 0");
  PointCloud out = cloud;
  if (sigma == 0) return out;
  std::mt19937_64 rng(seed);
  for (real& p : out.points) p += gaussian(rng, sigma);
  return out;
}

PointCloud add_outliers(const PointCloud& cloud, int64_t count, real sigma, uint64_t seed) {
  if (count < 0 || count > cloud.count) {
    throw InputError("add_outliers: count must be in [0, N]");
  }
  PointCloud out = cloud;
  if (count == 0) return out;
  std::mt19937_64 rng(seed);
  std::vector<int64_t> idx(static_cast<size_t>(cloud.count));
  for (int64_t i = 0; i < cloud.count; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < count; ++i) {  // partial Fisher-Yates
    std::swap(idx[static_cast<size_t>(i)],
              idx[static_cast<size_t>(i + bounded_int(rng, cloud.count - i))]);
  }
  if (out.part_labels.empty() && out.count > 0) out.part_labels.assign(out.points.size() / 3, 0);
  for (int64_t i = 0; i < count; ++i) {
    const size_t p = static_cast<size_t>(idx[static_cast<size_t>(i)]);
    for (int k = 0; k < 3; ++k) out.points[3 * p + k] = gaussian(rng, sigma);
    if (out.has_normals()) {
      for (int k = 0; k < 3; ++k) out.normals[3 * p + k] = 0;
    }
    out.part_labels[p] = -1;
  }
  return out;
}

// ---- text formats --------------------------------------------------------

void save_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  char buf[64];
  for (int64_t i = 0; i < cloud.count; ++i) {
    std::string line;
    for (int k = 0; k < 3; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", cloud.points[static_cast<size_t>(3 * i + k)]);
      if (k) line += ' ';
      line += buf;
    }
    if (cloud.has_normals()) {
      for (int k = 0; k < 3; ++k) {
        std::snprintf(buf, sizeof buf, " %.17g", cloud.normals[static_cast<size_t>(3 * i + k)]);
        line += buf;
      }
    }
    if (cloud.has_parts()) {
      line += ' ';
      line += std::to_string(cloud.part_labels[static_cast<size_t>(i)]);
    }
    f << line << '\n';
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

namespace {

[[noreturn]] void parse_fail(const std::string& path, int64_t line_no, const std::string& what) {
  throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

PointCloud load_cloud(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  PointCloud pc;
  std::string line;
  int64_t line_no = 0;
  int columns = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::vector<std::string> tok;
    std::string t;
    while (ss >> t) tok.push_back(t);
    if (tok.empty()) continue;
    const int n = static_cast<int>(tok.size());
    if (columns == 0) {
      if (n != 3 && n != 4 && n != 6 && n != 7) {
        parse_fail(path, line_no, "expected 3, 4, 6 or 7 columns, got " + std::to_string(n));
      }
      columns = n;
    } else if (n != columns) {
      parse_fail(path, line_no, "expected " + std::to_string(columns) + " columns, got " +
                                    std::to_string(n));
    }
    const bool with_normals = columns >= 6;
    const bool with_part = columns == 4 || columns == 7;
    size_t pos = 0;
    auto next_real = [&]() {
      try {
        size_t used = 0;
        const real v = std::stod(tok[pos], &used);
        if (used != tok[pos].size()) throw std::invalid_argument("");
        ++pos;
        return v;
      } catch (const std::exception&) {
        parse_fail(path, line_no, "bad number '" + tok[pos] + "'");
      }
    };
    for (int k = 0; k < 3; ++k) pc.points.push_back(next_real());
    if (with_normals) {
      for (int k = 0; k < 3; ++k) pc.normals.push_back(next_real());
    }
    if (with_part) {
      try {
        size_t used = 0;
        pc.part_labels.push_back(std::stoll(tok[pos], &used));
        if (used != tok[pos].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        parse_fail(path, line_no, "bad part label '" + tok[pos] + "'");
      }
    }
    ++pc.count;
  }
  if (pc.count == 0) throw ParseError(path + ": no data lines");
  return pc;
}

Tensor cloud_to_tensor(const PointCloud& cloud, bool with_normals) {
  if (with_normals && !cloud.has_normals()) {
    throw InputError("cloud_to_tensor: cloud has no normals");
  }
  const int64_t c = with_normals ? 6 : 3;
  std::vector<real> data(static_cast<size_t>(cloud.count * c));
  for (int64_t i = 0; i < cloud.count; ++i) {
    for (int k = 0; k < 3; ++k) {
      data[static_cast<size_t>(i * c + k)] = cloud.points[static_cast<size_t>(3 * i + k)];
    }
    if (with_normals) {
      for (int k = 0; k < 3; ++k) {
        data[static_cast<size_t>(i * c + 3 + k)] = cloud.normals[static_cast<size_t>(3 * i + k)];
      }
    }
  }
  return Tensor::from({cloud.count, c}, std::move(data));
}

Tensor stack_clouds(const std::vector<PointCloud>& clouds, bool with_normals) {
  if (clouds.empty()) throw InputError("stack_clouds: empty batch");
  const int64_t n = clouds.front().count;
  const int64_t c = with_normals ? 6 : 3;
  std::vector<real> data;
  data.reserve(static_cast<size_t>(static_cast<int64_t>(clouds.size()) * n * c));
  for (const PointCloud& pc : clouds) {
    if (pc.count != n) throw InputError("stack_clouds: clouds differ in point count");
    Tensor t = cloud_to_tensor(pc, with_normals);
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor::from({static_cast<int64_t>(clouds.size()), n, c}, std::move(data));
}

// ---- manifests and datasets ------------------------------------------------

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "path,label\n";
  for (const ManifestEntry& e : manifest.entries) f << e.path << ',' << e.label << '\n';
  if (!f) throw IoError("write to '" + path + "' failed");
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  DatasetManifest m;
  m.split = fs::path(path).parent_path().filename().string();
  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "path,label") parse_fail(path, line_no, "expected 'path,label' header");
      continue;
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) parse_fail(path, line_no, "expected 'path,label' row");
    ManifestEntry e;
    e.path = line.substr(0, comma);
    try {
      size_t used = 0;
      e.label = std::stoll(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      parse_fail(path, line_no, "bad label '" + line.substr(comma + 1) + "'");
    }
    m.entries.push_back(std::move(e));
  }
  if (line_no == 0) throw ParseError(path + ": empty manifest");
  return m;
}

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

DatasetManifest generate_dataset(const std::string& root, const std::string& split,
                                 const std::vector<ShapeKind>& kinds, int64_t per_class,
                                 int64_t points, uint64_t seed) {
  if (kinds.empty()) throw InputError("generate_dataset: no shape kinds");
  if (per_class < 1) throw InputError("generate_dataset: per_class must be >= 1");
  DatasetManifest m;
  m.split = split;
  const uint64_t split_seed = mix_seed(seed, fnv1a(split));
  std::error_code ec;
  for (size_t k = 0; k < kinds.size(); ++k) {
    const std::string kind_name = shape_kind_name(kinds[k]);
    const fs::path dir = fs::path(root) / split / kind_name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    for (int64_t i = 0; i < per_class; ++i) {
      const uint64_t file_seed = mix_seed(mix_seed(split_seed, k), static_cast<uint64_t>(i));
      PointCloud pc = generate_shape(kinds[k], points, file_seed);
      const std::string rel = kind_name + "/" + std::to_string(i) + ".xyz";
      save_cloud((fs::path(root) / split / rel).string(), pc);
      m.entries.push_back({rel, static_cast<int64_t>(k)});
    }
  }
  save_manifest((fs::path(root) / split / "manifest.csv").string(), m);
  return m;
}

Dataset load_dataset(const std::string& root, const std::string& split) {
  const fs::path dir = fs::path(root) / split;
  DatasetManifest m = load_manifest((dir / "manifest.csv").string());
  Dataset out;
  out.reserve(m.entries.size());
  for (const ManifestEntry& e : m.entries) {
    PointCloud pc = load_cloud((dir / e.path).string());
    pc.label = e.label;
    out.push_back(std::move(pc));
  }
  return out;
}

std::vector<int64_t> select_labeled_fraction(const Dataset& dataset, real fraction,
                                             uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) {
    throw InputError("select_labeled_fraction: fraction must be in (0, 1]");
  }
  std::map<int64_t, std::vector<int64_t>> by_class;
  std::map<int64_t, std::set<int64_t>> parts_present;
  for (int64_t i = 0; i < static_cast<int64_t>(dataset.size()); ++i) {
    const PointCloud& pc = dataset[static_cast<size_t>(i)];
    by_class[pc.label].push_back(i);
    for (int64_t p : pc.part_labels) {
      if (p >= 0) parts_present[pc.label].insert(p);
    }
  }
  for (uint64_t attempt = 0; attempt < 1000; ++attempt) {
    std::mt19937_64 rng(seed + attempt);
    std::vector<int64_t> picked;
    bool covered = true;
    for (const auto& [label, members] : by_class) {
      const int64_t n = static_cast<int64_t>(members.size());
      const int64_t want = std::max<int64_t>(
          1, static_cast<int64_t>(std::llround(fraction * static_cast<real>(n))));
      std::vector<int64_t> pool = members;
      for (int64_t i = 0; i < want; ++i) {
        std::swap(pool[static_cast<size_t>(i)],
                  pool[static_cast<size_t>(i + bounded_int(rng, n - i))]);
      }
      std::set<int64_t> seen;
      for (int64_t i = 0; i < want; ++i) {
        picked.push_back(pool[static_cast<size_t>(i)]);
        for (int64_t p : dataset[static_cast<size_t>(pool[static_cast<size_t>(i)])].part_labels) {
          if (p >= 0) seen.insert(p);
        }
      }
      if (seen != parts_present[label]) covered = false;
    }
    if (covered) {
      std::sort(picked.begin(), picked.end());
      return picked;
    }
  }
  throw InputError("select_labeled_fraction: could not cover all part labels");
}

}  // namespace pointcaps
