#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gcnn/errors.hpp"

namespace gcnn {

// .v3d layout: "V3D1", u32 LE edge length D, 4 zero bytes, then D^3 LE
// float32 voxels with x fastest.

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DimensionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct Volume {
  std::size_t dim = 0;
  std::vector<float> voxels;
};

/// Throws FormatError if the file cannot be written.
void write_volume(const std::filesystem::path& path, std::span<const float> voxels, std::size_t dim);

/// Reads a .v3d file. When expected_dim is set, a different header edge
/// length is a DimensionMismatchError; so are trailing bytes after the payload.
Volume read_volume(const std::filesystem::path& path, std::optional<std::size_t> expected_dim = std::nullopt);

}  // namespace gcnn
