// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/data.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pmtmae/binio.hpp"
#include "pmtmae/distill.hpp"

namespace pmt {

namespace binio {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) fail(ErrorKind::Io, "short write to " + path);
}

}  // namespace binio

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Cone: return "cone";
  }
  return "unknown";
}

ShapeKind shape_from_name(std::string_view name) {
  for (auto k : {ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Cylinder, ShapeKind::Cone}) {
    if (shape_name(k) == name) return k;
  }
  fail(ErrorKind::Config, "unknown shape kind \"" + std::string(name) + "\"");
}

void SyntheticSpec::validate() const {
  require(!classes.empty(), ErrorKind::Config, "data: at least one class required");
  require(points >= 1, ErrorKind::Config, "data.points must be positive");
  require(sigma >= 0.0, ErrorKind::Config, "data.sigma must be >= 0");
  require(per_class >= 2, ErrorKind::Config, "data.per_class must be at least 2 for a train/test split");
  require(variation >= 0.0 && variation < 1.0, ErrorKind::Config, "data.variation must lie in [0, 1)");
}

std::vector<const Sample*> Dataset::split(Split s) const {
  std::vector<const Sample*> out;
  for (const auto& smp : samples)
    if (smp.split == s) out.push_back(&smp);
  return out;
}

std::vector<Point3> sample_shape(ShapeKind kind, std::size_t n, double sigma, std::mt19937_64& rng) {
  constexpr double pi = std::numbers::pi;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Point3> pts;
  pts.reserve(n);
  auto emit = [&](double x, double y, double z) {
    if (sigma > 0.0) {
      x += sigma * gauss(rng);
      y += sigma * gauss(rng);
      z += sigma * gauss(rng);
    }
    pts.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)});
  };
  while (pts.size() < n) {
    switch (kind) {
      case ShapeKind::Sphere: {
        double x = gauss(rng), y = gauss(rng), z = gauss(rng);
        const double r = std::sqrt(x * x + y * y + z * z);
        if (r < 1e-12) continue;
        emit(x / r, y / r, z / r);
        break;
      }
      case ShapeKind::Cube: {
        const int face = static_cast<int>(rng() % 6);
        const double a = 2.0 * u01(rng) - 1.0, b = 2.0 * u01(rng) - 1.0;
        const double s = (face % 2) ? 1.0 : -1.0;
        if (face < 2) emit(s, a, b);
        else if (face < 4) emit(a, s, b);
        else emit(a, b, s);
        break;
      }
      case ShapeKind::Torus: {
        // Area element is proportional to (R + r cos v); rejection-sample v.
        constexpr double R = 1.0, r = 0.35;
        const double uang = 2.0 * pi * u01(rng), vang = 2.0 * pi * u01(rng);
        if (u01(rng) * (R + r) > R + r * std::cos(vang)) continue;
        emit((R + r * std::cos(vang)) * std::cos(uang), (R + r * std::cos(vang)) * std::sin(uang), r * std::sin(vang));
        break;
      }
      case ShapeKind::Cylinder: {
        constexpr double r = 0.6, h = 2.0;
        const double side = 2.0 * pi * r * h, cap = pi * r * r;
        const double pick = u01(rng) * (side + 2.0 * cap);
        const double ang = 2.0 * pi * u01(rng);
        if (pick < side) {
          emit(r * std::cos(ang), r * std::sin(ang), h * (u01(rng) - 0.5));
        } else {
          const double rr = r * std::sqrt(u01(rng));
          emit(rr * std::cos(ang), rr * std::sin(ang), pick < side + cap ? h / 2 : -h / 2);
        }
        break;
      }
      case ShapeKind::Cone: {
        constexpr double r = 0.8, h = 2.0;
        const double slant = std::sqrt(r * r + h * h);
        const double side = pi * r * slant, base = pi * r * r;
        const double ang = 2.0 * pi * u01(rng);
        if (u01(rng) * (side + base) < side) {
          const double t = std::sqrt(u01(rng));  // fraction of the way from apex to base
          emit(r * t * std::cos(ang), r * t * std::sin(ang), h / 2 - h * t);
        } else {
          const double rr = r * std::sqrt(u01(rng));
          emit(rr * std::cos(ang), rr * std::sin(ang), -h / 2);
        }
        break;
      }
    }
  }
  return pts;
}

namespace {

void random_rotation(std::vector<Point3>& pts, std::mt19937_64& rng) {
  // Uniform rotation from a random unit quaternion.
  std::normal_distribution<double> g(0.0, 1.0);
  double q[4];
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& v : q) {
      v = g(rng);
      norm += v * v;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& v : q) v /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double m[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
                          {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
                          {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
  for (auto& p : pts) {
    const double a = p[0], b = p[1], c = p[2];
    for (int i = 0; i < 3; ++i) p[i] = static_cast<float>(m[i][0] * a + m[i][1] * b + m[i][2] * c);
  }
}

}  // namespace

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (auto kind : spec.classes) ds.class_names.push_back(shape_name(kind));
  const std::size_t n_test = spec.per_class - static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(spec.per_class)));
  std::uint64_t id = 0;
  for (std::size_t c = 0; c < spec.classes.size(); ++c) {
    // Stratified split: a seeded choice of n_test indices per class.
    std::vector<std::size_t> order(spec.per_class);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (order.size() - i));
      std::swap(order[i], order[j]);
    }
    std::vector<char> is_test(spec.per_class, 0);
    for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = 1;

    for (std::size_t i = 0; i < spec.per_class; ++i) {
      auto pts = sample_shape(spec.classes[c], spec.points, spec.sigma, rng);
      if (spec.variation > 0.0 && spec.classes[c] != ShapeKind::Sphere) {
        for (int a = 0; a < 3; ++a) {
          const double s = 1.0 + spec.variation * (2.0 * u01(rng) - 1.0);
          for (auto& p : pts) p[a] = static_cast<float>(p[a] * s);
        }
      }
      if (spec.rotate) random_rotation(pts, rng);
      Sample smp;
      smp.id = id++;
      smp.split = is_test[i] ? Split::Test : Split::Train;
      smp.cloud = normalize(PointCloud{std::move(pts), static_cast<int>(c)});
      ds.samples.push_back(std::move(smp));
    }
  }
  return ds;
}

// ---- cloud files ------------------------------------------------------------

std::vector<Point3> parse_xyz(std::string_view text, const std::string& what) {
  std::vector<Point3> pts;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] == '#') continue;

    // from_chars accepts "nan" and "inf", so those reach the finiteness check below.
    const char* cur = line.data() + first;
    const char* stop = line.data() + line.size();
    auto skip = [&] {
      while (cur < stop && (*cur == ' ' || *cur == '\t')) ++cur;
    };
    double v[3];
    for (double& x : v) {
      skip();
      if (cur < stop && *cur == '+') ++cur;  // from_chars rejects an explicit plus sign
      const auto [next, ec] = std::from_chars(cur, stop, x);
      if (ec != std::errc() || (next < stop && *next != ' ' && *next != '\t'))
        fail(ErrorKind::Parse, what + ":" + std::to_string(line_no) + ": expected three numbers");
      cur = next;
    }
    skip();
    if (cur < stop) {
      const std::string_view rest(cur, static_cast<std::size_t>(stop - cur));
      const std::string extra(rest.substr(0, rest.find_first_of(" \t")));
      fail(ErrorKind::Parse, what + ":" + std::to_string(line_no) + ": unexpected token \"" + extra + "\"");
    }
    for (double x : v) {
      if (!std::isfinite(x)) fail(ErrorKind::Parse, what + ":" + std::to_string(line_no) + ": non-finite coordinate");
    }
    pts.push_back({static_cast<float>(v[0]), static_cast<float>(v[1]), static_cast<float>(v[2])});
  }
  if (pts.empty()) fail(ErrorKind::Parse, what + ": no points");
  return pts;
}

std::string format_xyz(const std::vector<Point3>& points) {
  std::string out;
  char buf[128];
  for (const auto& p : points) {
    const int n = std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", p[0], p[1], p[2]);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

std::string encode_pmtp(const std::vector<Point3>& points) {
  binio::Writer w;
  w.magic("PMTP");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(points.size()));
  for (const auto& p : points) w.floats(p.data(), 3);
  return std::move(w.buffer());
}

namespace {

std::vector<Point3> read_pmtp(binio::Reader& r) {
  r.expect_magic("PMTP");
  const auto count = r.get<std::uint32_t>();
  const std::size_t need = static_cast<std::size_t>(count) * 3 * sizeof(float);
  if (r.remaining() < need) {
    fail(ErrorKind::Format, r.what() + ": truncated point data, expected " + std::to_string(need) +
                                " bytes but " + std::to_string(r.remaining()) + " remain");
  }
  std::vector<Point3> pts(count);
  for (auto& p : pts) {
    r.floats(p.data(), 3);
    for (float v : p) require(std::isfinite(v), ErrorKind::Format, r.what() + ": non-finite coordinate");
  }
  return pts;
}

bool is_xyz(const std::string& path) { return std::filesystem::path(path).extension() == ".xyz"; }

}  // namespace

std::vector<Point3> decode_pmtp(std::string_view bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  auto pts = read_pmtp(r);
  if (!r.done()) fail(ErrorKind::Format, what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return pts;
}

PointCloud load_cloud(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  PointCloud cloud;
  cloud.points = is_xyz(path) ? parse_xyz(bytes, path) : decode_pmtp(bytes, path);
  require(!cloud.points.empty(), ErrorKind::Format, path + ": empty point cloud");
  return cloud;
}

void save_cloud(const std::string& path, const PointCloud& cloud) {
  binio::write_file(path, is_xyz(path) ? format_xyz(cloud.points) : encode_pmtp(cloud.points));
}

void save_pmtp_sections(const std::string& path, const std::vector<std::vector<Point3>>& sections) {
  std::string all;
  for (const auto& s : sections) all += encode_pmtp(s);
  binio::write_file(path, all);
}

std::vector<std::vector<Point3>> load_pmtp_sections(const std::string& path) {
  const std::string bytes = binio::read_file(path);
  binio::Reader r(bytes, path);
  std::vector<std::vector<Point3>> out;
  while (!r.done()) out.push_back(read_pmtp(r));
  return out;
}

// ---- dataset directories --------------------------------------------------------

void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "clouds");
  nlohmann::ordered_json man;
  man["format"] = "pmtmae-dataset";
  man["version"] = 1;
  man["classes"] = ds.class_names;
  auto& arr = man["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : ds.samples) {
    const std::string rel = "clouds/" + std::to_string(s.id) + ".pmtp";
    save_cloud((fs::path(dir) / rel).string(), s.cloud);
    arr.push_back({{"id", s.id},
                   {"label", s.cloud.label.value_or(-1)},
                   {"split", s.split == Split::Train ? "train" : "test"},
                   {"file", rel}});
  }
  binio::write_file((fs::path(dir) / "manifest.json").string(), man.dump(1) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string man_path = (fs::path(dir) / "manifest.json").string();
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(binio::read_file(man_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, man_path + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.class_names = man.at("classes").get<std::vector<std::string>>();
    for (const auto& e : man.at("samples")) {
      Sample s;
      s.id = e.at("id").get<std::uint64_t>();
      const std::string split = e.at("split").get<std::string>();
      require(split == "train" || split == "test", ErrorKind::Parse, man_path + ": bad split \"" + split + "\"");
      s.split = split == "train" ? Split::Train : Split::Test;
      s.cloud = load_cloud((fs::path(dir) / e.at("file").get<std::string>()).string());
      const int label = e.at("label").get<int>();
      if (label >= 0) {
        require(static_cast<std::size_t>(label) < ds.class_names.size(), ErrorKind::Parse,
                man_path + ": label out of range for sample " + std::to_string(s.id));
        s.cloud.label = label;
      }
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, man_path + ": " + e.what());
  }
  return ds;
}

std::uint64_t patch_seed(std::uint64_t sample_id) { return mix_seed(0x70617463685f6b6eULL, sample_id); }

std::vector<PatchedSample> prepare_patches(const std::vector<const Sample*>& samples, const ModelConfig& cfg) {
  std::vector<PatchedSample> out;
  out.reserve(samples.size());
  for (const Sample* s : samples) {
    PatchedSample ps;
    ps.id = s->id;
    ps.label = s->cloud.label.value_or(-1);
    ps.patches = make_patches(s->cloud, cfg.num_patches, cfg.patch_k, patch_seed(s->id));
    out.push_back(std::move(ps));
  }
  return out;
}

std::vector<PatchedSample> prepare_patches(const Dataset& ds, Split split, const ModelConfig& cfg) {
  return prepare_patches(ds.split(split), cfg);
}

}  // namespace pmt
