#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "gcnn/dataset.hpp"
#include "gcnn/kernels.hpp"
#include "gcnn/volume_io.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace gcnn;
namespace fs = std::filesystem;

namespace {

std::pair<double, double> mean_std(std::span<const float> v) {
  double m = 0;
  for (float x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (float x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

// Principal axis of the gradient structure tensor, by power iteration.
std::array<double, 3> principal_gradient_axis(std::span<const float> v, std::size_t d) {
  double j[3][3] = {};
  auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return static_cast<double>(v[x + d * (y + d * z)]); };
  for (std::size_t z = 1; z + 1 < d; ++z)
    for (std::size_t y = 1; y + 1 < d; ++y)
      for (std::size_t x = 1; x + 1 < d; ++x) {
        const double g[3] = {at(x + 1, y, z) - at(x - 1, y, z), at(x, y + 1, z) - at(x, y - 1, z),
                             at(x, y, z + 1) - at(x, y, z - 1)};
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) j[a][b] += g[a] * g[b];
      }
  std::array<double, 3> e{0.3, 0.5, 0.7};
  for (int it = 0; it < 200; ++it) {
    std::array<double, 3> n{};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) n[a] += j[a][b] * e[b];
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    for (int a = 0; a < 3; ++a) e[a] = n[a] / len;
  }
  return e;
}

// Rotation of vector u by unit quaternion q via q u q*.
std::array<double, 3> hamilton_rotate(const std::array<double, 4>& q, const std::array<double, 3>& u) {
  auto mul = [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
    return std::array<double, 4>{a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                                 a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                                 a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                                 a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
  };
  const auto r = mul(mul(q, {0, u[0], u[1], u[2]}), {q[0], -q[1], -q[2], -q[3]});
  return {r[1], r[2], r[3]};
}

// Quaternion of a rotation matrix, signs chosen by matching the action on the basis.
std::array<double, 4> quaternion_of(const std::array<int, 9>& m) {
  const double mags[4] = {std::sqrt(std::max(0.0, 1.0 + m[0] + m[4] + m[8])) / 2,
                          std::sqrt(std::max(0.0, 1.0 + m[0] - m[4] - m[8])) / 2,
                          std::sqrt(std::max(0.0, 1.0 - m[0] + m[4] - m[8])) / 2,
                          std::sqrt(std::max(0.0, 1.0 - m[0] - m[4] + m[8])) / 2};
  for (int signs = 0; signs < 16; ++signs) {
    std::array<double, 4> q{};
    for (int i = 0; i < 4; ++i) q[i] = (signs >> i & 1) ? -mags[i] : mags[i];
    bool ok = true;
    for (int c = 0; c < 3 && ok; ++c) {
      std::array<double, 3> e{0, 0, 0};
      e[c] = 1;
      const auto r = hamilton_rotate(q, e);
      for (int row = 0; row < 3; ++row) ok = ok && std::abs(r[row] - m[3 * row + c]) < 1e-9;
    }
    if (ok) return q;
  }
  throw std::logic_error("no quaternion found");
}

DatasetConfig small_fourier(std::size_t dim = 8, std::size_t per_class = 3) {
  auto cfg = preset_config("toy-directional");
  cfg.dim = dim;
  cfg.instances_per_class = per_class;
  return cfg;
}

}  // namespace

TEST_CASE("v3d round trip and errors") {
  TempDir tmp("v3d");
  const auto vol = oracle::random_tensor<float>({512}, 1, -3, 3);
  const auto path = tmp.path / "a.v3d";
  write_volume(path, vol.values(), 8);
  CHECK(fs::file_size(path) == 12 + 512 * 4);
  const auto back = read_volume(path);
  CHECK(back.dim == 8);
  CHECK(std::memcmp(back.voxels.data(), vol.data(), 512 * sizeof(float)) == 0);
  CHECK(read_volume(path, 8).voxels == back.voxels);

  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(read_volume(path, 16), DimensionMismatchError); }
  SUBCASE("truncated payload") {
    fs::resize_file(path, 12 + 100);
    CHECK_THROWS_AS(read_volume(path), TruncatedError);
    fs::resize_file(path, 6);
    CHECK_THROWS_AS(read_volume(path), TruncatedError);
  }
  SUBCASE("bad magic names the bytes") {
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.write("VOX!", 4);
    }
    try {
      read_volume(path);
      FAIL("expected BadMagicError");
    } catch (const BadMagicError& e) {
      CHECK(std::string(e.what()).find("0x56 0x4f 0x58 0x21") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    {
      std::ofstream f(path, std::ios::app | std::ios::binary);
      f.write("xx", 2);
    }
    CHECK_THROWS_AS(read_volume(path), DimensionMismatchError);
  }
  SUBCASE("error classes are distinct") {
    CHECK_FALSE(std::is_base_of_v<TruncatedError, BadMagicError>);
    CHECK_FALSE(std::is_base_of_v<BadMagicError, DimensionMismatchError>);
    CHECK(std::is_base_of_v<FormatError, TruncatedError>);
  }
  CHECK_THROWS_AS(write_volume(path, vol.values(), 7), DimensionMismatchError);
}

TEST_CASE("normalization") {
  auto v = oracle::random_tensor<float>({4096}, 3, 5, 9).storage();
  normalize(v);
  const auto [m, s] = mean_std(v);
  CHECK(std::abs(m) <= 1e-5);
  CHECK(std::abs(s - 1) <= 1e-4);
  auto twice = v;
  normalize(twice);
  CHECK(oracle::max_abs_dev(twice, v) <= 1e-6);

  std::vector<float> flat(64, 2.5f);
  normalize(flat);
  for (float x : flat) CHECK(x == 0.0f);
}

TEST_CASE("geometric generator") {
  auto cfg = preset_config("geometric");
  cfg.dim = 24;
  cfg.instances_per_class = 2;

  SUBCASE("deterministic per seed") {
    CHECK(generate_raw_volume(cfg, 3, 1) == generate_raw_volume(cfg, 3, 1));
    CHECK(generate_raw_volume(cfg, 3, 1) != generate_raw_volume(cfg, 3, 0));
  }
  SUBCASE("sphere occupancy within the analytic bound") {
    ClassSpec sphere;
    sphere.primitive = Primitive::sphere;
    sphere.size = {1.5, 3.0};
    sphere.count = {2, 6};
    sphere.intensity = {0.5, 1.0};
    DatasetConfig c;
    c.generator = GeneratorKind::geometric;
    c.dim = 32;
    c.classes = {sphere};
    for (std::size_t i = 0; i < 10; ++i) {
      const auto v = generate_raw_volume(c, 0, i);
      const auto nonzero = static_cast<double>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0; }));
      const double bound = 6 * (4.0 / 3.0) * std::numbers::pi * 27.0;
      CHECK(nonzero > 0);
      CHECK(nonzero <= bound);
    }
  }
  SUBCASE("primitive type changes the voxel histogram") {
    ClassSpec a;
    a.primitive = Primitive::sphere;
    a.size = {3, 5};
    a.count = {5, 8};
    ClassSpec b = a;
    b.primitive = Primitive::cube;
    DatasetConfig c;
    c.generator = GeneratorKind::geometric;
    c.dim = 32;
    c.classes = {a, b};
    auto histogram = [&](std::size_t label) {
      std::vector<double> h(11, 0.0);
      for (std::size_t i = 0; i < 4; ++i)
        for (float x : generate_raw_volume(c, label, i)) h[static_cast<std::size_t>(std::lround(x * 10))] += 1;
      return h;
    };
    const auto ha = histogram(0), hb = histogram(1);
    double chi2 = 0;
    for (std::size_t i = 0; i < ha.size(); ++i)
      if (ha[i] + hb[i] > 0) chi2 += (ha[i] - hb[i]) * (ha[i] - hb[i]) / (ha[i] + hb[i]);
    CHECK(chi2 > 0);
  }
  SUBCASE("degenerate specs rejected") {
    auto bad = cfg;
    bad.classes[0].size = {0, 0};
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    bad = cfg;
    bad.classes[0].count = {0, 0};
    CHECK_THROWS_AS(generate_dataset(bad), ShapeError);
  }
}

TEST_CASE("fourier generator") {
  SUBCASE("single z wave is constant over xy planes") {
    ClassSpec c;
    c.directions = {{0, 0, 1}};
    c.spread = 0;
    c.components = 1;
    c.band = {3, 3};
    DatasetConfig cfg;
    cfg.dim = 16;
    cfg.classes = {c};
    const auto v = generate_raw_volume(cfg, 0, 0);
    for (std::size_t z = 0; z < 16; ++z) {
      const auto [m, s] = mean_std(std::span<const float>(v).subspan(z * 256, 256));
      CHECK(s * s <= 1e-6);
    }
  }
  SUBCASE("directional class follows a rotation") {
    ClassSpec c;
    c.directions = {{1, 0, 0}};
    c.spread = 0.05;
    c.components = 6;
    c.band = {2, 4};
    DatasetConfig cfg;
    cfg.dim = 24;
    cfg.classes = {c};
    const auto v = generate_raw_volume(cfg, 0, 0);
    const auto e = principal_gradient_axis(v, 24);
    CHECK(std::abs(e[0]) > 0.95);
    const SymmetryGroup o(GroupKind::o);
    for (const auto& g : o.elements()) {
      const auto r = principal_gradient_axis(rotate_volume_exact<float>(g, v, 24), 24);
      const auto gx = g.apply({1, 0, 0});
      const double dot = r[0] * gx[0] + r[1] * gx[1] + r[2] * gx[2];
      REQUIRE(std::abs(dot) > 0.95);
    }
  }
  SUBCASE("isotropic class balances per-axis energy") {
    ClassSpec c;
    c.isotropic = true;
    c.components = 64;
    c.band = {2, 6};
    DatasetConfig cfg;
    cfg.dim = 24;
    cfg.seed = 5;
    cfg.classes = {c};
    const auto v = generate_raw_volume(cfg, 0, 0);
    double energy[3] = {};
    auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return static_cast<double>(v[x + 24 * (y + 24 * z)]); };
    for (std::size_t z = 0; z + 1 < 24; ++z)
      for (std::size_t y = 0; y + 1 < 24; ++y)
        for (std::size_t x = 0; x + 1 < 24; ++x) {
          energy[0] += std::pow(at(x + 1, y, z) - at(x, y, z), 2);
          energy[1] += std::pow(at(x, y + 1, z) - at(x, y, z), 2);
          energy[2] += std::pow(at(x, y, z + 1) - at(x, y, z), 2);
        }
    const double mean = (energy[0] + energy[1] + energy[2]) / 3;
    for (double e : energy) CHECK(std::abs(e - mean) <= 0.2 * mean);
  }
  SUBCASE("empty component list rejected") {
    auto cfg = small_fourier();
    cfg.classes[1].components = 0;
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
  }
}

TEST_CASE("generated datasets") {
  const auto cfg = small_fourier();
  auto a = generate_dataset(cfg);
  CHECK(a.manifest.records.size() == 15);
  for (const auto& v : a.volumes) {
    const auto [m, s] = mean_std(v);
    CHECK(std::abs(m) <= 1e-5);
    CHECK(std::abs(s - 1) <= 1e-4);
  }
  kernels::set_workers(2);
  const auto b = generate_dataset(cfg);
  kernels::set_workers(1);
  CHECK(a.volumes == b.volumes);
  CHECK(a.manifest.to_json() == b.manifest.to_json());

  CHECK(preset_config("fourier").classes.size() == 15);
  CHECK(preset_config("geometric").classes.size() == 25);
  const auto toy = preset_config("toy-directional");
  CHECK(toy.classes.size() == 5);
  CHECK(toy.dim == 16);
  CHECK(toy.instances_per_class == 20);
  CHECK(DatasetConfig::from_json(toy.to_json()).to_json() == toy.to_json());
  const auto geo = preset_config("geometric");
  CHECK(DatasetConfig::from_json(geo.to_json()).to_json() == geo.to_json());
}

TEST_CASE("o_rotate set") {
  auto data = generate_dataset(small_fourier(6, 8));
  make_o_rotated(data, 11);
  const SymmetryGroup o(GroupKind::o);
  const auto normals = data.select(SetKind::normal);
  const auto rotated = data.select(SetKind::o_rotate);
  REQUIRE(rotated.size() == normals.size());
  bool saw_identity = false;
  for (std::size_t j = 0; j < normals.size(); ++j) {
    const auto& nr = data.manifest.records[normals[j]];
    const auto& rr = data.manifest.records[rotated[j]];
    CHECK(rr.id == nr.id);
    CHECK(rr.label == nr.label);
    REQUIRE(rr.rotation.kind == RotationMeta::Kind::group);
    const auto& src = data.volumes[normals[j]];
    const auto& dst = data.volumes[rotated[j]];
    if (rr.rotation.element == 0) {
      saw_identity = true;
      CHECK(dst == src);
    }
    auto s1 = src, s2 = dst;
    std::sort(s1.begin(), s1.end());
    std::sort(s2.begin(), s2.end());
    CHECK(s1 == s2);
    const auto back = rotate_volume_exact<float>(o.element(o.inverse(rr.rotation.element)), dst, 6);
    CHECK(back == src);
  }
  CHECK(saw_identity);  // 40 draws from 24 elements with this seed

  auto again = generate_dataset(small_fourier(6, 8));
  make_o_rotated(again, 11);
  CHECK(again.volumes == data.volumes);
  make_o_rotated(again, 11);
  CHECK(again.select(SetKind::o_rotate).size() == rotated.size());
}

TEST_CASE("trilinear rotation") {
  const std::size_t d = 12;
  const auto vol = oracle::random_tensor<float>({d * d * d}, 2).storage();

  SUBCASE("identity quaternion is bit-exact") {
    CHECK(rotate_volume_trilinear({1, 0, 0, 0}, vol, d) == vol);
  }
  SUBCASE("matrix agrees with the Hamilton product") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto q = random_quaternion(s);
      const auto m = quaternion_matrix(q);
      for (int c = 0; c < 3; ++c) {
        std::array<double, 3> e{0, 0, 0};
        e[c] = 1;
        const auto r = hamilton_rotate(q, e);
        for (int row = 0; row < 3; ++row) CHECK(std::abs(m[3 * row + c] - r[row]) <= 1e-12);
      }
    }
  }
  SUBCASE("right-angle quaternions match the exact rotation") {
    const SymmetryGroup o(GroupKind::o);
    for (const auto& g : o.elements()) {
      const auto soft = rotate_volume_trilinear(quaternion_of(g.matrix), vol, d);
      const auto hard = rotate_volume_exact<float>(g, vol, d);
      double worst = 0;
      for (std::size_t z = 1; z + 1 < d; ++z)
        for (std::size_t y = 1; y + 1 < d; ++y)
          for (std::size_t x = 1; x + 1 < d; ++x) {
            const auto i = voxel_index(d, x, y, z);
            worst = std::max(worst, static_cast<double>(std::abs(soft[i] - hard[i])));
          }
      REQUIRE(worst <= 1e-6);
    }
  }
  SUBCASE("smooth volumes keep their statistics") {
    const std::size_t n = 32;
    std::vector<float> blob(n * n * n);
    const double c = (n - 1) / 2.0, sigma = n / 8.0;
    for (std::size_t z = 0; z < n; ++z)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          const double r2 = (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c);
          blob[voxel_index(n, x, y, z)] = static_cast<float>(std::exp(-r2 / (2 * sigma * sigma)));
        }
    const auto [m0, s0] = mean_std(blob);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto [m1, s1] = mean_std(rotate_volume_trilinear(random_quaternion(s), blob, n));
      CHECK(std::abs(m1 - m0) <= 0.02 * m0);
      CHECK(std::abs(s1 - s0) <= 0.05 * s0);
    }
  }
}

TEST_CASE("rotate set") {
  auto data = generate_dataset(small_fourier(8, 2));
  make_rotated(data, 5);
  for (auto i : data.select(SetKind::rotate)) {
    const auto& r = data.manifest.records[i];
    REQUIRE(r.rotation.kind == RotationMeta::Kind::quat);
    const auto& q = r.rotation.quat;
    CHECK(std::abs(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] - 1) <= 1e-12);
    const auto [m, s] = mean_std(data.volumes[i]);
    CHECK(std::abs(m) <= 1e-5);
    CHECK(std::abs(s - 1) <= 1e-4);
  }
}

TEST_CASE("k-fold split") {
  SUBCASE("150 instances into 15 folds of 10") {
    const auto f = kfold_assignment(150, 15, 3);
    std::vector<int> counts(15, 0);
    for (auto x : f) ++counts.at(x);
    for (int c : counts) CHECK(c == 10);
    CHECK(f == kfold_assignment(150, 15, 3));
    CHECK(f != kfold_assignment(150, 15, 4));
  }
  SUBCASE("uneven counts differ by at most one") {
    const auto f = kfold_assignment(23, 5, 1);
    std::vector<int> counts(5, 0);
    for (auto x : f) ++counts.at(x);
    CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
  }
  SUBCASE("k = 1") {
    for (auto x : kfold_assignment(9, 1, 0)) CHECK(x == 0);
  }
  SUBCASE("k larger than the instance count") {
    CHECK_THROWS_AS(kfold_assignment(4, 5, 0), ShapeError);
    CHECK_THROWS_AS(kfold_assignment(4, 0, 0), ShapeError);
  }
  SUBCASE("rotated copies share folds; each id once per set") {
    auto data = generate_dataset(small_fourier(6, 4));
    make_o_rotated(data, 1);
    make_rotated(data, 2);
    kfold_split(data, 5, 9);
    CHECK(data.manifest.folds() == 5);
    std::map<std::string, std::size_t> fold_of;
    std::map<SetKind, std::set<std::string>> ids;
    for (const auto& r : data.manifest.records) {
      REQUIRE(r.fold.has_value());
      CHECK(ids[r.set].insert(r.id).second);
      const auto [it, fresh] = fold_of.emplace(r.id, *r.fold);
      if (!fresh) CHECK(it->second == *r.fold);
    }
    CHECK(ids[SetKind::normal] == ids[SetKind::o_rotate]);
    CHECK(ids[SetKind::normal] == ids[SetKind::rotate]);
    std::size_t total = 0;
    for (std::size_t f = 0; f < 5; ++f) total += data.select(SetKind::normal, f).size();
    CHECK(total == 20);
    CHECK(data.select(SetKind::normal, 2, true).size() == 20 - data.select(SetKind::normal, 2).size());
  }
}

TEST_CASE("dataset save and load") {
  TempDir tmp("ds");
  auto data = generate_dataset(small_fourier(8, 2));
  make_o_rotated(data, 1);
  make_rotated(data, 2);
  kfold_split(data, 2, 3);
  save_dataset(data, tmp.path);
  const auto back = load_dataset(tmp.path / "manifest.json");
  CHECK(back.manifest.to_json() == data.manifest.to_json());
  REQUIRE(back.volumes.size() == data.volumes.size());
  for (std::size_t i = 0; i < data.volumes.size(); ++i)
    CHECK(std::memcmp(back.volumes[i].data(), data.volumes[i].data(), data.volumes[i].size() * sizeof(float)) == 0);
  for (std::size_t i = 0; i < data.manifest.records.size(); ++i)
    if (data.manifest.records[i].rotation.kind == RotationMeta::Kind::quat)
      CHECK(back.manifest.records[i].rotation.quat == data.manifest.records[i].rotation.quat);

  SUBCASE("inconsistent rotation metadata rejected") {
    auto j = data.manifest.to_json();
    j["records"][0]["rotation"] = {{"kind", "group"}, {"value", 3}};
    CHECK_THROWS_AS(Manifest::from_json(j), FormatError);
  }
  SUBCASE("missing volume file") {
    fs::remove(tmp.path / data.manifest.records[0].path);
    CHECK_THROWS_AS(load_dataset(tmp.path / "manifest.json"), FormatError);
  }
}
