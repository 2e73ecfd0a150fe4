#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gcnn/gconv.hpp"

namespace gcnn {

enum class Precision { f32, f64 };
std::string to_string(Precision p);
Precision parse_precision(std::string_view name);

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::f32 : Precision::f64;
}

// Layout: "GCNNCKP1", u64 LE header length, UTF-8 JSON header, then each
// parameter's raw LE buffer in declaration order.
struct CheckpointHeader {
  NetworkSpec spec;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::vector<std::pair<std::string, Shape>> parameters;
  nlohmann::json extra;  // free-form (training config, log summary)

  nlohmann::json to_json() const;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net, std::uint64_t seed,
                     const nlohmann::json& extra = nlohmann::json::object());

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

/// Rebuilds the network and copies every buffer. Throws FormatError on a
/// precision or layout mismatch.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace gcnn
