#include "gcnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <unordered_map>

#include "gcnn/errors.hpp"
#include "gcnn/kernels.hpp"
#include "gcnn/seed.hpp"
#include "gcnn/volume_io.hpp"

namespace gcnn {
namespace {

using Mat3 = std::array<double, 9>;
using Vec3d = std::array<double, 3>;

constexpr std::uint64_t kSaltORotate = 0x4f52;
constexpr std::uint64_t kSaltRotate = 0x5251;

Vec3d normalized(Vec3d v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (n == 0) throw ShapeError("zero-length direction");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3d cross(const Vec3d& a, const Vec3d& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// Columns are the local axes; local x is along `axis`.
Mat3 frame_from_axis(const Vec3d& axis) {
  const Vec3d x = normalized(axis);
  std::size_t least = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (std::abs(x[i]) < std::abs(x[least])) least = i;
  Vec3d e{0, 0, 0};
  e[least] = 1;
  const Vec3d y = normalized(cross(x, e));
  const Vec3d z = cross(x, y);
  return {x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2]};
}

std::array<double, 4> quaternion_from(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::array<double, 4> q{};
  double norm = 0;
  while (norm < 1e-12) {
    for (auto& c : q) c = n01(rng);
    norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  }
  for (auto& c : q) c /= norm;
  if (q[0] < 0)
    for (auto& c : q) c = -c;
  return q;
}

Vec3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Vec3d v{};
  double n = 0;
  while (n < 1e-12) {
    v = {n01(rng), n01(rng), n01(rng)};
    n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  }
  return {v[0] / n, v[1] / n, v[2] / n};
}

std::string instance_id(std::size_t label, std::size_t instance) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%02zu-%03zu", label, instance);
  return buf;
}

void stamp_geometric(const ClassSpec& cs, std::size_t dim, std::mt19937_64& rng, std::vector<float>& vol) {
  const int count = std::uniform_int_distribution<int>(cs.count[0], cs.count[1])(rng);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(dim));
  std::uniform_real_distribution<double> size(cs.size[0], cs.size[1]);
  std::uniform_real_distribution<double> level(cs.intensity[0], cs.intensity[1]);
  const auto d = static_cast<long>(dim);

  for (int p = 0; p < count; ++p) {
    const Vec3d c{pos(rng), pos(rng), pos(rng)};
    const double s = size(rng);
    const auto value = static_cast<float>(level(rng));
    Mat3 frame{1, 0, 0, 0, 1, 0, 0, 0, 1};
    if (cs.primitive != Primitive::sphere)
      frame = cs.orientation ? frame_from_axis(*cs.orientation) : quaternion_matrix(quaternion_from(rng));

    double reach = s;
    if (cs.primitive == Primitive::cube) reach = s * std::sqrt(3.0);
    if (cs.primitive == Primitive::ellipsoid) reach = s * *std::max_element(cs.aspect.begin(), cs.aspect.end());
    auto lo = [&](double v) { return std::max(0L, static_cast<long>(std::floor(v - reach))); };
    auto hi = [&](double v) { return std::min(d - 1, static_cast<long>(std::ceil(v + reach))); };

    for (long z = lo(c[2]); z <= hi(c[2]); ++z)
      for (long y = lo(c[1]); y <= hi(c[1]); ++y)
        for (long x = lo(c[0]); x <= hi(c[0]); ++x) {
          const Vec3d r{x - c[0], y - c[1], z - c[2]};
          // local coordinates: frame^T r
          Vec3d l{};
          for (int i = 0; i < 3; ++i) l[i] = frame[i] * r[0] + frame[3 + i] * r[1] + frame[6 + i] * r[2];
          bool inside = false;
          switch (cs.primitive) {
            case Primitive::sphere:
              inside = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] <= s * s;
              break;
            case Primitive::cube:
              inside = std::max({std::abs(l[0]), std::abs(l[1]), std::abs(l[2])}) <= s;
              break;
            case Primitive::ellipsoid: {
              double q = 0;
              for (int i = 0; i < 3; ++i) q += (l[i] / (s * cs.aspect[i])) * (l[i] / (s * cs.aspect[i]));
              inside = q <= 1.0;
              break;
            }
          }
          if (inside) vol[voxel_index(dim, static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                                      static_cast<std::size_t>(z))] = value;
        }
  }
}

void synthesize_fourier(const ClassSpec& cs, std::size_t dim, std::mt19937_64& rng, std::vector<float>& vol) {
  std::uniform_real_distribution<double> band(cs.band[0], cs.band[1]);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  std::uniform_int_distribution<std::size_t> pick(0, cs.directions.empty() ? 0 : cs.directions.size() - 1);
  std::normal_distribution<double> n01;

  std::vector<double> acc(vol.size(), 0.0);
  for (int comp = 0; comp < cs.components; ++comp) {
    Vec3d dir;
    if (cs.isotropic) {
      dir = random_unit(rng);
    } else {
      const Vec3d mu = normalized(cs.directions[pick(rng)]);
      const Vec3d e{n01(rng), n01(rng), n01(rng)};
      dir = cs.spread == 0 ? mu
                           : normalized({mu[0] + cs.spread * e[0], mu[1] + cs.spread * e[1], mu[2] + cs.spread * e[2]});
    }
    const double w = 2 * std::numbers::pi * band(rng) / static_cast<double>(dim);
    const double phi = phase(rng);
    const Vec3d k{w * dir[0], w * dir[1], w * dir[2]};
    std::size_t i = 0;
    for (std::size_t z = 0; z < dim; ++z)
      for (std::size_t y = 0; y < dim; ++y) {
        const double base = k[1] * static_cast<double>(y) + k[2] * static_cast<double>(z) + phi;
        for (std::size_t x = 0; x < dim; ++x) acc[i++] += std::cos(k[0] * static_cast<double>(x) + base);
      }
  }
  if (cs.noise > 0) {
    std::normal_distribution<double> noise(0.0, cs.noise);
    for (auto& a : acc) a += noise(rng);
  }
  std::transform(acc.begin(), acc.end(), vol.begin(), [](double a) { return static_cast<float>(a); });
}

Dataset generate_with(DatasetConfig cfg) {
  cfg.validate();
  Dataset data;
  auto& m = data.manifest;
  m.name = cfg.name;
  m.classes = cfg.classes.size();
  m.instances_per_class = cfg.instances_per_class;
  m.dim = cfg.dim;
  m.seed = cfg.seed;
  m.generator = cfg.to_json();
  for (std::size_t c = 0; c < m.classes; ++c)
    m.class_names.push_back(cfg.classes[c].name.empty() ? "class" + std::to_string(c) : cfg.classes[c].name);

  const std::size_t n = m.classes * m.instances_per_class;
  data.volumes.resize(n);
  m.records.resize(n);
  const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic) num_threads(kernels::workers())
  for (long i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const std::size_t label = idx / cfg.instances_per_class, inst = idx % cfg.instances_per_class;
    data.volumes[idx] = generate_raw_volume(cfg, label, inst);
    normalize(data.volumes[idx]);
    auto& r = m.records[idx];
    r.id = instance_id(label, inst);
    r.label = label;
    r.set = SetKind::normal;
    r.path = "normal/" + r.id + ".v3d";
  }
  return data;
}

void drop_set(Dataset& data, SetKind s) {
  std::vector<RecordEntry> records;
  std::vector<std::vector<float>> volumes;
  for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
    if (data.manifest.records[i].set == s) continue;
    records.push_back(std::move(data.manifest.records[i]));
    volumes.push_back(std::move(data.volumes[i]));
  }
  data.manifest.records = std::move(records);
  data.volumes = std::move(volumes);
}

template <typename Fn>
void add_rotated_set(Dataset& data, SetKind s, Fn&& make) {
  if (!data.has_set(SetKind::normal)) throw FormatError("dataset has no normal set");
  drop_set(data, s);
  const auto normals = data.select(SetKind::normal);
  const std::size_t base = data.manifest.records.size();
  data.manifest.records.resize(base + normals.size());
  data.volumes.resize(base + normals.size());
  const auto count = static_cast<long>(normals.size());
#pragma omp parallel for schedule(dynamic) num_threads(kernels::workers())
  for (long j = 0; j < count; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    const auto& src = data.manifest.records[normals[jj]];
    auto& r = data.manifest.records[base + jj];
    r.id = src.id;
    r.label = src.label;
    r.fold = src.fold;
    r.set = s;
    r.path = to_string(s) + "/" + src.id + ".v3d";
    data.volumes[base + jj] = make(jj, data.volumes[normals[jj]], r.rotation);
  }
}

Primitive parse_primitive(const std::string& s) {
  if (s == "sphere") return Primitive::sphere;
  if (s == "cube") return Primitive::cube;
  if (s == "ellipsoid") return Primitive::ellipsoid;
  throw std::invalid_argument("unknown primitive: " + s);
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::sphere: return "sphere";
    case Primitive::cube: return "cube";
    case Primitive::ellipsoid: return "ellipsoid";
  }
  return "?";
}

}  // namespace

std::string to_string(SetKind s) {
  switch (s) {
    case SetKind::normal: return "normal";
    case SetKind::o_rotate: return "o_rotate";
    case SetKind::rotate: return "rotate";
  }
  return "?";
}

SetKind parse_set_kind(std::string_view name) {
  if (name == "normal") return SetKind::normal;
  if (name == "o_rotate" || name == "o-rotate") return SetKind::o_rotate;
  if (name == "rotate") return SetKind::rotate;
  throw std::invalid_argument("unknown set: " + std::string(name));
}

nlohmann::json ClassSpec::to_json(GeneratorKind kind) const {
  nlohmann::json j{{"name", name}};
  if (kind == GeneratorKind::geometric) {
    j["primitive"] = primitive_name(primitive);
    j["size"] = size;
    j["count"] = count;
    j["intensity"] = intensity;
    j["aspect"] = aspect;
    j["orientation"] = orientation ? nlohmann::json(*orientation) : nlohmann::json(nullptr);
  } else {
    j["directions"] = directions;
    j["spread"] = spread;
    j["isotropic"] = isotropic;
    j["band"] = band;
    j["components"] = components;
    j["noise"] = noise;
  }
  return j;
}

ClassSpec ClassSpec::from_json(const nlohmann::json& j, GeneratorKind kind) {
  ClassSpec c;
  c.name = j.value("name", "");
  if (kind == GeneratorKind::geometric) {
    c.primitive = parse_primitive(j.value("primitive", "sphere"));
    if (j.contains("size")) c.size = j.at("size").get<std::array<double, 2>>();
    if (j.contains("count")) c.count = j.at("count").get<std::array<int, 2>>();
    if (j.contains("intensity")) c.intensity = j.at("intensity").get<std::array<double, 2>>();
    if (j.contains("aspect")) c.aspect = j.at("aspect").get<std::array<double, 3>>();
    if (j.contains("orientation") && !j.at("orientation").is_null())
      c.orientation = j.at("orientation").get<std::array<double, 3>>();
  } else {
    if (j.contains("directions")) c.directions = j.at("directions").get<std::vector<std::array<double, 3>>>();
    c.spread = j.value("spread", c.spread);
    c.isotropic = j.value("isotropic", c.isotropic);
    if (j.contains("band")) c.band = j.at("band").get<std::array<double, 2>>();
    c.components = j.value("components", c.components);
    c.noise = j.value("noise", c.noise);
  }
  return c;
}

void DatasetConfig::validate() const {
  if (dim < 2) throw ShapeError("volume edge must be >= 2");
  if (instances_per_class == 0) throw ShapeError("instances per class must be >= 1");
  if (classes.empty()) throw ShapeError("no classes");
  for (const auto& c : classes) {
    if (generator == GeneratorKind::geometric) {
      if (!(c.size[0] > 0) || c.size[1] < c.size[0]) throw ShapeError("class " + c.name + ": degenerate size range");
      if (c.count[0] < 1 || c.count[1] < c.count[0]) throw ShapeError("class " + c.name + ": degenerate count range");
      if (c.intensity[1] < c.intensity[0]) throw ShapeError("class " + c.name + ": bad intensity range");
      for (double a : c.aspect)
        if (!(a > 0)) throw ShapeError("class " + c.name + ": aspect must be positive");
    } else {
      if (c.components < 1) throw ShapeError("class " + c.name + ": empty component list");
      if (!c.isotropic && c.directions.empty()) throw ShapeError("class " + c.name + ": no directions");
      if (c.band[0] < 0 || c.band[1] < c.band[0]) throw ShapeError("class " + c.name + ": bad band");
      if (c.spread < 0 || c.noise < 0) throw ShapeError("class " + c.name + ": negative spread or noise");
      for (const auto& d : c.directions)
        if (d[0] == 0 && d[1] == 0 && d[2] == 0) throw ShapeError("class " + c.name + ": zero direction");
    }
  }
}

nlohmann::json DatasetConfig::to_json() const {
  nlohmann::json j{{"name", name},
                   {"generator", generator == GeneratorKind::geometric ? "geometric" : "fourier"},
                   {"dim", dim},
                   {"instances_per_class", instances_per_class},
                   {"seed", seed},
                   {"classes", nlohmann::json::array()}};
  for (const auto& c : classes) j["classes"].push_back(c.to_json(generator));
  return j;
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig cfg;
  cfg.name = j.value("name", cfg.name);
  const auto gen = j.value("generator", std::string("fourier"));
  if (gen == "geometric")
    cfg.generator = GeneratorKind::geometric;
  else if (gen == "fourier")
    cfg.generator = GeneratorKind::fourier;
  else
    throw std::invalid_argument("unknown generator: " + gen);
  cfg.dim = j.value("dim", cfg.dim);
  cfg.instances_per_class = j.value("instances_per_class", cfg.instances_per_class);
  cfg.seed = j.value("seed", cfg.seed);
  for (const auto& c : j.at("classes")) cfg.classes.push_back(ClassSpec::from_json(c, cfg.generator));
  return cfg;
}

DatasetConfig preset_config(std::string_view name) {
  DatasetConfig cfg;
  cfg.name = std::string(name);
  if (name == "fourier" || name == "toy-directional") {
    const bool toy = name == "toy-directional";
    cfg.generator = GeneratorKind::fourier;
    cfg.dim = toy ? 16 : 64;
    cfg.instances_per_class = toy ? 20 : 10;
    cfg.seed = toy ? 7 : 1;
    struct Dir {
      const char* name;
      std::vector<std::array<double, 3>> dirs;
      bool iso;
    };
    const std::vector<Dir> dirs{{"axis", {{1, 0, 0}}, false},
                                {"face-diagonal", {{1, 1, 0}}, false},
                                {"body-diagonal", {{1, 1, 1}}, false},
                                {"cross", {{1, 0, 0}, {0, 1, 0}}, false},
                                {"isotropic", {}, true}};
    const std::vector<std::pair<const char*, std::array<double, 2>>> bands =
        toy ? std::vector<std::pair<const char*, std::array<double, 2>>>{{"", {1.5, 3.5}}}
            : std::vector<std::pair<const char*, std::array<double, 2>>>{
                  {"-low", {2, 4}}, {"-mid", {5, 8}}, {"-high", {9, 14}}};
    for (const auto& [suffix, band] : bands)
      for (const auto& d : dirs) {
        ClassSpec c;
        c.name = std::string(d.name) + suffix;
        c.directions = d.dirs;
        c.isotropic = d.iso;
        c.spread = 0.1;
        c.band = band;
        c.components = toy ? 6 : 8;
        c.noise = 0.3;
        cfg.classes.push_back(c);
      }
  } else if (name == "geometric") {
    cfg.generator = GeneratorKind::geometric;
    cfg.seed = 2;
    struct Form {
      const char* name;
      Primitive p;
      std::optional<std::array<double, 3>> orientation;
    };
    const std::vector<Form> shapes{{"sphere", Primitive::sphere, std::nullopt},
                                    {"cube", Primitive::cube, std::nullopt},
                                    {"ellipsoid", Primitive::ellipsoid, std::nullopt},
                                    {"ellipsoid-x", Primitive::ellipsoid, std::array<double, 3>{1, 0, 0}},
                                    {"ellipsoid-diag", Primitive::ellipsoid, std::array<double, 3>{1, 1, 1}}};
    struct Scale {
      const char* name;
      std::array<double, 2> size;
      std::array<int, 2> count;
    };
    const std::vector<Scale> scales{{"tiny", {2, 3}, {40, 80}},
                                    {"small", {3, 5}, {15, 30}},
                                    {"medium", {5, 8}, {6, 12}},
                                    {"large", {8, 12}, {2, 5}},
                                    {"mixed", {2, 10}, {8, 16}}};
    for (const auto& s : shapes)
      for (const auto& sc : scales) {
        ClassSpec c;
        c.name = std::string(s.name) + "-" + sc.name;
        c.primitive = s.p;
        c.orientation = s.orientation;
        c.size = sc.size;
        c.count = sc.count;
        c.intensity = {0.5, 1.0};
        c.aspect = {1.0, 0.4, 0.4};
        cfg.classes.push_back(c);
      }
  } else {
    throw std::invalid_argument("unknown preset: " + std::string(name));
  }
  return cfg;
}

std::size_t Manifest::folds() const {
  std::size_t k = 0;
  for (const auto& r : records)
    if (r.fold) k = std::max(k, *r.fold + 1);
  return k;
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json j{{"name", name},     {"classes", classes}, {"instances_per_class", instances_per_class},
                   {"dim", dim},       {"seed", seed},       {"class_names", class_names},
                   {"records", nlohmann::json::array()}};
  if (generator) j["generator"] = *generator;
  for (const auto& r : records) {
    nlohmann::json rot;
    switch (r.rotation.kind) {
      case RotationMeta::Kind::none: rot = {{"kind", "none"}, {"value", nullptr}}; break;
      case RotationMeta::Kind::group: rot = {{"kind", "group"}, {"value", r.rotation.element}}; break;
      case RotationMeta::Kind::quat: rot = {{"kind", "quat"}, {"value", r.rotation.quat}}; break;
    }
    j["records"].push_back({{"id", r.id},
                            {"class", r.label},
                            {"set", to_string(r.set)},
                            {"path", r.path},
                            {"rotation", rot},
                            {"fold", r.fold ? nlohmann::json(*r.fold) : nlohmann::json(nullptr)}});
  }
  return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.classes = j.at("classes").get<std::size_t>();
    m.instances_per_class = j.at("instances_per_class").get<std::size_t>();
    m.dim = j.at("dim").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("class_names")) m.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("generator")) m.generator = j.at("generator");
    for (const auto& jr : j.at("records")) {
      RecordEntry r;
      r.id = jr.at("id").get<std::string>();
      r.label = jr.at("class").get<std::size_t>();
      r.set = parse_set_kind(jr.at("set").get<std::string>());
      r.path = jr.at("path").get<std::string>();
      const auto& rot = jr.at("rotation");
      const auto kind = rot.at("kind").get<std::string>();
      if (kind == "group") {
        r.rotation.kind = RotationMeta::Kind::group;
        r.rotation.element = rot.at("value").get<std::size_t>();
      } else if (kind == "quat") {
        r.rotation.kind = RotationMeta::Kind::quat;
        r.rotation.quat = rot.at("value").get<std::array<double, 4>>();
      } else if (kind != "none") {
        throw FormatError("unknown rotation kind: " + kind);
      }
      if (jr.contains("fold") && !jr.at("fold").is_null()) r.fold = jr.at("fold").get<std::size_t>();
      if ((r.set == SetKind::normal) != (r.rotation.kind == RotationMeta::Kind::none))
        throw FormatError("record " + r.id + ": rotation metadata inconsistent with set " + to_string(r.set));
      if (r.label >= m.classes) throw FormatError("record " + r.id + ": class index out of range");
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

bool Dataset::has_set(SetKind s) const {
  return std::any_of(manifest.records.begin(), manifest.records.end(), [&](const auto& r) { return r.set == s; });
}

std::vector<std::size_t> Dataset::select(SetKind s, std::optional<std::size_t> fold, bool exclude_fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.set != s) continue;
    if (fold) {
      if (!r.fold) throw FormatError("record " + r.id + " has no fold assignment");
      if ((*r.fold == *fold) == exclude_fold) continue;
    }
    out.push_back(i);
  }
  return out;
}

void normalize(std::span<float> v) {
  if (v.empty()) return;
  double mean = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double scale = 1.0 / std::sqrt(var + 1e-8);
  for (float& x : v) x = static_cast<float>((x - mean) * scale);
}

std::vector<float> generate_raw_volume(const DatasetConfig& cfg, std::size_t label, std::size_t instance) {
  if (label >= cfg.classes.size()) throw std::out_of_range("class index out of range");
  std::mt19937_64 rng(derive_seed(cfg.seed, {label, instance}));
  std::vector<float> vol(cfg.dim * cfg.dim * cfg.dim, 0.0f);
  if (cfg.generator == GeneratorKind::geometric)
    stamp_geometric(cfg.classes[label], cfg.dim, rng, vol);
  else
    synthesize_fourier(cfg.classes[label], cfg.dim, rng, vol);
  return vol;
}

Dataset generate_geometric(const std::vector<ClassSpec>& classes, std::size_t instances_per_class, std::size_t dim,
                           std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.name = "geometric";
  cfg.generator = GeneratorKind::geometric;
  cfg.classes = classes;
  cfg.instances_per_class = instances_per_class;
  cfg.dim = dim;
  cfg.seed = seed;
  return generate_with(std::move(cfg));
}

Dataset generate_fourier_like(const std::vector<ClassSpec>& classes, std::size_t instances_per_class,
                              std::size_t dim, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.name = "fourier";
  cfg.generator = GeneratorKind::fourier;
  cfg.classes = classes;
  cfg.instances_per_class = instances_per_class;
  cfg.dim = dim;
  cfg.seed = seed;
  return generate_with(std::move(cfg));
}

Dataset generate_dataset(const DatasetConfig& cfg) { return generate_with(cfg); }

std::array<double, 9> quaternion_matrix(const std::array<double, 4>& q) {
  const auto [w, x, y, z] = q;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

std::array<double, 4> random_quaternion(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return quaternion_from(rng);
}

std::vector<float> rotate_volume_trilinear(const std::array<double, 4>& q, std::span<const float> in,
                                           std::size_t dim) {
  if (in.size() != dim * dim * dim) throw std::invalid_argument("volume is not D^3");
  const Mat3 r = quaternion_matrix(q);
  const double c = (static_cast<double>(dim) - 1) / 2;
  const auto d = static_cast<long>(dim);
  std::vector<float> out(in.size());
  auto at = [&](long x, long y, long z) -> double {
    if (x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d) return 0.0;
    return in[static_cast<std::size_t>(x + d * (y + d * z))];
  };
  std::size_t i = 0;
  for (std::size_t z = 0; z < dim; ++z)
    for (std::size_t y = 0; y < dim; ++y)
      for (std::size_t x = 0; x < dim; ++x) {
        const double v[3] = {static_cast<double>(x) - c, static_cast<double>(y) - c, static_cast<double>(z) - c};
        double p[3];
        // R^T v
        for (int a = 0; a < 3; ++a) p[a] = r[a] * v[0] + r[3 + a] * v[1] + r[6 + a] * v[2] + c;
        const long x0 = static_cast<long>(std::floor(p[0])), y0 = static_cast<long>(std::floor(p[1])),
                   z0 = static_cast<long>(std::floor(p[2]));
        const double fx = p[0] - x0, fy = p[1] - y0, fz = p[2] - z0;
        double acc = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
              if (wgt != 0) acc += wgt * at(x0 + dx, y0 + dy, z0 + dz);
            }
        out[i++] = static_cast<float>(acc);
      }
  return out;
}

void make_o_rotated(Dataset& data, std::uint64_t seed) {
  const SymmetryGroup o(GroupKind::o);
  const std::size_t dim = data.manifest.dim;
  add_rotated_set(data, SetKind::o_rotate, [&](std::size_t j, const std::vector<float>& src, RotationMeta& meta) {
    std::mt19937_64 rng(derive_seed(seed, {kSaltORotate, j}));
    meta.kind = RotationMeta::Kind::group;
    meta.element = std::uniform_int_distribution<std::size_t>(0, o.size() - 1)(rng);
    return rotate_volume_exact<float>(o.element(meta.element), src, dim);
  });
}

void make_rotated(Dataset& data, std::uint64_t seed) {
  const std::size_t dim = data.manifest.dim;
  add_rotated_set(data, SetKind::rotate, [&](std::size_t j, const std::vector<float>& src, RotationMeta& meta) {
    meta.kind = RotationMeta::Kind::quat;
    meta.quat = random_quaternion(derive_seed(seed, {kSaltRotate, j}));
    auto out = rotate_volume_trilinear(meta.quat, src, dim);
    normalize(out);
    return out;
  });
}

std::vector<std::size_t> kfold_assignment(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > n) throw ShapeError("fold count must be in 1.." + std::to_string(n));
  std::vector<std::size_t> order(n), fold(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t pos = 0; pos < n; ++pos) fold[order[pos]] = pos % k;
  return fold;
}

void kfold_split(Dataset& data, std::size_t k, std::uint64_t seed) {
  const auto normals = data.select(SetKind::normal);
  if (normals.empty()) throw FormatError("dataset has no normal set");
  const auto fold = kfold_assignment(normals.size(), k, seed);
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t j = 0; j < normals.size(); ++j) by_id[data.manifest.records[normals[j]].id] = fold[j];
  for (auto& r : data.manifest.records) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw FormatError("record " + r.id + " has no normal counterpart");
    r.fold = it->second;
  }
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << m.to_json().dump(1) << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return Manifest::from_json(j);
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  if (data.volumes.size() != data.manifest.records.size()) throw FormatError("volumes and records out of step");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    const auto path = dir / data.manifest.records[i].path;
    std::filesystem::create_directories(path.parent_path());
    write_volume(path, data.volumes[i], data.manifest.dim);
  }
  write_manifest(data.manifest, dir / "manifest.json");
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset data;
  data.manifest = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  data.volumes.reserve(data.manifest.records.size());
  for (const auto& r : data.manifest.records)
    data.volumes.push_back(read_volume(dir / r.path, data.manifest.dim).voxels);
  return data;
}

}  // namespace gcnn
