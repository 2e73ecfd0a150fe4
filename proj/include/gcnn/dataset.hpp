#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnn/groups.hpp"

namespace gcnn {

enum class SetKind { normal, o_rotate, rotate };
std::string to_string(SetKind s);
SetKind parse_set_kind(std::string_view name);

enum class Primitive { sphere, cube, ellipsoid };
enum class GeneratorKind { geometric, fourier };

/// Class description for either generator; fields of the other generator are ignored.
struct ClassSpec {
  std::string name;

  // geometric: primitives stamped on a zero background.
  Primitive primitive = Primitive::sphere;
  std::array<double, 2> size{2, 4};        // radius / half-edge in voxels
  std::array<int, 2> count{4, 8};
  std::array<double, 2> intensity{0.5, 1.0};
  std::array<double, 3> aspect{1.0, 0.5, 0.5};  // ellipsoid semi-axes relative to size
  std::optional<std::array<double, 3>> orientation;  // fixed local x axis; random rotation if absent

  // fourier: sum of plane waves cos(<k, v> + phi).
  std::vector<std::array<double, 3>> directions{{0, 0, 1}};
  double spread = 0.1;                     // std of the direction perturbation
  bool isotropic = false;                  // uniform directions instead
  std::array<double, 2> band{2, 6};        // cycles per volume edge
  int components = 8;
  double noise = 0.0;                      // white noise std added before normalization

  nlohmann::json to_json(GeneratorKind kind) const;
  static ClassSpec from_json(const nlohmann::json& j, GeneratorKind kind);
};

struct DatasetConfig {
  std::string name = "dataset";
  GeneratorKind generator = GeneratorKind::fourier;
  std::size_t dim = 64;
  std::size_t instances_per_class = 10;
  std::uint64_t seed = 0;
  std::vector<ClassSpec> classes;

  /// Throws ShapeError on degenerate settings.
  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// Built-in configurations: "fourier" (15 classes), "geometric" (25 classes),
/// "toy-directional" (5 classes, 16^3, 20 per class).
DatasetConfig preset_config(std::string_view name);

struct RotationMeta {
  enum class Kind { none, group, quat };
  Kind kind = Kind::none;
  std::size_t element = 0;              // index in O
  std::array<double, 4> quat{1, 0, 0, 0};  // (w, x, y, z)
};

struct RecordEntry {
  std::string id;
  std::size_t label = 0;
  SetKind set = SetKind::normal;
  std::string path;  // relative to the manifest directory
  RotationMeta rotation;
  std::optional<std::size_t> fold;
};

struct Manifest {
  std::string name;
  std::size_t classes = 0;
  std::size_t instances_per_class = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::vector<RecordEntry> records;
  std::vector<std::string> class_names;
  std::optional<nlohmann::json> generator;  // config the normal set was built from

  std::size_t folds() const;  // 1 + max fold index, 0 if unassigned
  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

/// Manifest plus in-memory voxels aligned with manifest.records.
struct Dataset {
  Manifest manifest;
  std::vector<std::vector<float>> volumes;

  bool has_set(SetKind s) const;
  /// Record indices of a set, optionally restricted to one fold (or all folds except it).
  std::vector<std::size_t> select(SetKind s, std::optional<std::size_t> fold = std::nullopt,
                                  bool exclude_fold = false) const;
};

/// Zero mean, unit variance: v <- (v - mean) / sqrt(var + 1e-8).
void normalize(std::span<float> v);

/// Volume before normalization for (class, instance); a pure function of the config.
std::vector<float> generate_raw_volume(const DatasetConfig& cfg, std::size_t label, std::size_t instance);

Dataset generate_geometric(const std::vector<ClassSpec>& classes, std::size_t instances_per_class, std::size_t dim,
                           std::uint64_t seed);
Dataset generate_fourier_like(const std::vector<ClassSpec>& classes, std::size_t instances_per_class,
                              std::size_t dim, std::uint64_t seed);
/// Normal set for cfg, normalized, with records in class-major order.
Dataset generate_dataset(const DatasetConfig& cfg);

/// Rotation matrix of a unit quaternion (w, x, y, z), row-major.
std::array<double, 9> quaternion_matrix(const std::array<double, 4>& q);
/// Uniform quaternion on S^3 from a seed.
std::array<double, 4> random_quaternion(std::uint64_t seed);
/// out(v) = in(R^T (v - c) + c) with c the volume center, trilinear, zero outside.
std::vector<float> rotate_volume_trilinear(const std::array<double, 4>& q, std::span<const float> in,
                                           std::size_t dim);

/// Adds (or replaces) the o_rotate set: one seeded element of O per normal record.
void make_o_rotated(Dataset& data, std::uint64_t seed);
/// Adds (or replaces) the rotate set: one seeded uniform rotation per normal
/// record, resampled trilinearly and normalized again.
void make_rotated(Dataset& data, std::uint64_t seed);

/// Seeded shuffle of the normal instances, fold = position mod k; rotated
/// copies inherit the fold of their normal record. Throws ShapeError if
/// k is 0 or exceeds the instance count.
void kfold_split(Dataset& data, std::size_t k, std::uint64_t seed);
std::vector<std::size_t> kfold_assignment(std::size_t n, std::size_t k, std::uint64_t seed);

/// Writes volumes under dir/<set>/<id>.v3d and dir/manifest.json.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Loads a manifest and every volume it references.
Dataset load_dataset(const std::filesystem::path& manifest_path);

void write_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace gcnn
