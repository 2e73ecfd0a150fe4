#include "gcnn/volume_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gcnn {
namespace {

constexpr std::array<char, 4> kMagic{'V', '3', 'D', '1'};
constexpr std::size_t kHeaderBytes = 12;

static_assert(std::endian::native == std::endian::little, "little-endian host assumed");

std::string describe_bytes(const char* bytes, std::size_t n) {
  std::ostringstream os;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) os << ' ';
    os << "0x" << std::hex << std::setw(2) << std::setfill('0')
       << static_cast<unsigned>(static_cast<unsigned char>(bytes[i]));
  }
  return os.str();
}

}  // namespace

void write_volume(const std::filesystem::path& path, std::span<const float> voxels, std::size_t dim) {
  if (voxels.size() != dim * dim * dim) throw DimensionMismatchError("voxel count does not match D^3");
  if (dim > UINT32_MAX) throw DimensionMismatchError("volume edge too large");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  char header[kHeaderBytes] = {};
  std::memcpy(header, kMagic.data(), 4);
  const auto d32 = static_cast<std::uint32_t>(dim);
  std::memcpy(header + 4, &d32, 4);
  out.write(header, kHeaderBytes);
  out.write(reinterpret_cast<const char*>(voxels.data()), static_cast<std::streamsize>(voxels.size_bytes()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Volume read_volume(const std::filesystem::path& path, std::optional<std::size_t> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  char header[kHeaderBytes];
  in.read(header, kHeaderBytes);
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got >= 4 && std::memcmp(header, kMagic.data(), 4) != 0)
    throw BadMagicError(path.string() + ": bad magic " + describe_bytes(header, 4) + ", expected \"V3D1\"");
  if (got < kHeaderBytes) throw TruncatedError(path.string() + ": truncated header");

  std::uint32_t d32;
  std::memcpy(&d32, header + 4, 4);
  const std::size_t dim = d32;
  if (expected_dim && *expected_dim != dim)
    throw DimensionMismatchError(path.string() + ": edge length " + std::to_string(dim) + ", expected " +
                                 std::to_string(*expected_dim));

  Volume v{dim, std::vector<float>(dim * dim * dim)};
  const auto want = static_cast<std::streamsize>(v.voxels.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(v.voxels.data()), want);
  if (in.gcount() != want)
    throw TruncatedError(path.string() + ": payload has " + std::to_string(in.gcount()) + " of " +
                         std::to_string(want) + " bytes");
  if (in.peek() != std::char_traits<char>::eof())
    throw DimensionMismatchError(path.string() + ": trailing bytes after D^3 payload");
  return v;
}

}  // namespace gcnn
