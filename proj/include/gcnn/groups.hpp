#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace gcnn {

/// The cube symmetry groups supported as orientation groups.
enum class GroupKind { trivial, o, oh, d4, d4h };

std::string to_string(GroupKind kind);
/// Accepts "trivial", "o", "oh", "d4", "d4h" (case-insensitive).
GroupKind parse_group_kind(std::string_view name);

using Vec3 = std::array<int, 3>;

/// A signed permutation matrix, stored row-major, plus its position in the
/// owning group's canonical ordering.
struct GroupElement {
  std::array<int, 9> matrix{};
  std::size_t index = 0;

  Vec3 apply(const Vec3& c) const;
  int determinant() const;
  bool is_identity() const;
};

std::array<int, 9> multiply(const std::array<int, 9>& a, const std::array<int, 9>& b);
std::array<int, 9> transpose(const std::array<int, 9>& a);

/// Finite subgroup of O_h with precomputed Cayley and inverse tables.
///
/// Ordering: identity at index 0, remaining elements sorted lexicographically
/// by their row-major flattened matrix. Immutable after construction.
class SymmetryGroup {
 public:
  explicit SymmetryGroup(GroupKind kind);

  GroupKind kind() const { return kind_; }
  std::size_t size() const { return elements_.size(); }
  const GroupElement& element(std::size_t i) const;
  const std::vector<GroupElement>& elements() const { return elements_; }

  /// Index of elements[i] * elements[j]. Throws std::out_of_range.
  std::size_t compose(std::size_t i, std::size_t j) const;
  std::size_t inverse(std::size_t i) const;

  /// Index of the element with this matrix, or size() if not a member.
  std::size_t find(const std::array<int, 9>& matrix) const;

  /// pi[j] = index of g^-1 * elements[j]. Throws std::out_of_range.
  std::vector<std::size_t> left_perm(std::size_t g) const;

  const std::vector<std::vector<std::size_t>>& cayley() const { return cayley_; }
  const std::vector<std::size_t>& inverse_table() const { return inverse_; }

  nlohmann::json to_json() const;

 private:
  GroupKind kind_;
  std::vector<GroupElement> elements_;
  std::vector<std::vector<std::size_t>> cayley_;
  std::vector<std::size_t> inverse_;
};

SymmetryGroup enumerate_group(GroupKind kind);

/// matrix(g) * c.
inline Vec3 act_on_offset(const GroupElement& g, const Vec3& c) { return g.apply(c); }

/// Voxel (x, y, z) of a D^3 volume lives at x + D*(y + D*z).
inline std::size_t voxel_index(std::size_t d, std::size_t x, std::size_t y, std::size_t z) {
  return x + d * (y + d * z);
}

/// Gather map for the exact action of g on a D^3 grid centred at (D-1)/2:
/// out[v] = in[map[v]]. A permutation of 0..D^3-1.
std::vector<std::size_t> rotation_gather_map(const GroupElement& g, std::size_t d);

/// out(c) = kernel(g^-1 c) for offsets c in {-(k-1)/2..(k-1)/2}^3.
/// Throws std::invalid_argument for even k or size mismatch.
template <typename T>
std::vector<T> rotate_kernel(const GroupElement& g, std::span<const T> kernel, std::size_t k);

/// out(v) = vol(r^-1 v), r(v) = g (v - ctr) + ctr, ctr = (D-1)/2.
/// Throws std::invalid_argument when vol.size() != d^3.
template <typename T>
std::vector<T> rotate_volume_exact(const GroupElement& g, std::span<const T> vol, std::size_t d);

}  // namespace gcnn
