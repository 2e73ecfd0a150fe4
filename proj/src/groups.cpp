#include "gcnn/groups.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace gcnn {

std::string to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::trivial: return "trivial";
    case GroupKind::o: return "o";
    case GroupKind::oh: return "oh";
    case GroupKind::d4: return "d4";
    case GroupKind::d4h: return "d4h";
  }
  return "?";
}

GroupKind parse_group_kind(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (s == "trivial" || s == "z3") return GroupKind::trivial;
  if (s == "o") return GroupKind::o;
  if (s == "oh" || s == "o_h") return GroupKind::oh;
  if (s == "d4") return GroupKind::d4;
  if (s == "d4h" || s == "d4_h") return GroupKind::d4h;
  throw std::invalid_argument("unknown group kind '" + std::string(name) + "'");
}

Vec3 GroupElement::apply(const Vec3& c) const {
  const auto& m = matrix;
  return {m[0] * c[0] + m[1] * c[1] + m[2] * c[2],
          m[3] * c[0] + m[4] * c[1] + m[5] * c[2],
          m[6] * c[0] + m[7] * c[1] + m[8] * c[2]};
}

int GroupElement::determinant() const {
  const auto& m = matrix;
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

bool GroupElement::is_identity() const { return matrix == std::array<int, 9>{1, 0, 0, 0, 1, 0, 0, 0, 1}; }

std::array<int, 9> multiply(const std::array<int, 9>& a, const std::array<int, 9>& b) {
  std::array<int, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return r;
}

std::array<int, 9> transpose(const std::array<int, 9>& a) {
  return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

namespace {

bool keep(GroupKind kind, const GroupElement& e) {
  const bool proper = e.determinant() == 1;
  // g e_z = +-e_z  <=>  third column is (0, 0, +-1)
  const bool fixes_z_line = e.matrix[2] == 0 && e.matrix[5] == 0;
  switch (kind) {
    case GroupKind::trivial: return e.is_identity();
    case GroupKind::o: return proper;
    case GroupKind::oh: return true;
    case GroupKind::d4: return proper && fixes_z_line;
    case GroupKind::d4h: return fixes_z_line;
  }
  return false;
}

std::vector<GroupElement> all_signed_permutations() {
  std::vector<GroupElement> out;
  std::array<int, 3> perm{0, 1, 2};
  do {
    for (int signs = 0; signs < 8; ++signs) {
      GroupElement e;
      for (int row = 0; row < 3; ++row) e.matrix[3 * row + perm[row]] = (signs >> row) & 1 ? -1 : 1;
      out.push_back(e);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

}  // namespace

SymmetryGroup::SymmetryGroup(GroupKind kind) : kind_(kind) {
  for (auto& e : all_signed_permutations())
    if (keep(kind, e)) elements_.push_back(e);

  std::sort(elements_.begin(), elements_.end(), [](const GroupElement& a, const GroupElement& b) {
    if (a.is_identity() != b.is_identity()) return a.is_identity();
    return a.matrix < b.matrix;
  });
  for (std::size_t i = 0; i < elements_.size(); ++i) elements_[i].index = i;

  const std::size_t n = elements_.size();
  cayley_.assign(n, std::vector<std::size_t>(n));
  inverse_.assign(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = find(gcnn::multiply(elements_[i].matrix, elements_[j].matrix));
      if (k == n) throw std::logic_error("group not closed under composition");
      cayley_[i][j] = k;
      if (k == 0) inverse_[i] = j;
    }
    if (inverse_[i] == n) throw std::logic_error("group element without inverse");
  }
}

const GroupElement& SymmetryGroup::element(std::size_t i) const {
  if (i >= elements_.size()) throw std::out_of_range("group element index out of range");
  return elements_[i];
}

std::size_t SymmetryGroup::compose(std::size_t i, std::size_t j) const {
  if (i >= size() || j >= size()) throw std::out_of_range("group element index out of range");
  return cayley_[i][j];
}

std::size_t SymmetryGroup::inverse(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("group element index out of range");
  return inverse_[i];
}

std::size_t SymmetryGroup::find(const std::array<int, 9>& matrix) const {
  for (const auto& e : elements_)
    if (e.matrix == matrix) return e.index;
  return elements_.size();
}

std::vector<std::size_t> SymmetryGroup::left_perm(std::size_t g) const {
  const std::size_t g_inv = inverse(g);
  std::vector<std::size_t> pi(size());
  for (std::size_t j = 0; j < size(); ++j) pi[j] = cayley_[g_inv][j];
  return pi;
}

nlohmann::json SymmetryGroup::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind_);
  auto elems = nlohmann::json::array();
  for (const auto& e : elements_) elems.push_back(e.matrix);
  j["elements"] = elems;
  j["cayley"] = cayley_;
  j["inverse"] = inverse_;
  return j;
}

SymmetryGroup enumerate_group(GroupKind kind) { return SymmetryGroup(kind); }

std::vector<std::size_t> rotation_gather_map(const GroupElement& g, std::size_t d) {
  // Doubled coordinates keep the half-integer centre exact: w = 2v - (D-1).
  const int span = static_cast<int>(d) - 1;
  GroupElement inv;
  inv.matrix = transpose(g.matrix);
  std::vector<std::size_t> map(d * d * d);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < d; ++y)
      for (std::size_t x = 0; x < d; ++x) {
        const Vec3 w{2 * static_cast<int>(x) - span, 2 * static_cast<int>(y) - span,
                     2 * static_cast<int>(z) - span};
        const Vec3 u = inv.apply(w);
        map[voxel_index(d, x, y, z)] =
            voxel_index(d, static_cast<std::size_t>((u[0] + span) / 2),
                        static_cast<std::size_t>((u[1] + span) / 2),
                        static_cast<std::size_t>((u[2] + span) / 2));
      }
  return map;
}

template <typename T>
std::vector<T> rotate_volume_exact(const GroupElement& g, std::span<const T> vol, std::size_t d) {
  if (vol.size() != d * d * d) throw std::invalid_argument("rotate_volume_exact: volume is not cubic");
  const auto map = rotation_gather_map(g, d);
  std::vector<T> out(vol.size());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = vol[map[v]];
  return out;
}

template <typename T>
std::vector<T> rotate_kernel(const GroupElement& g, std::span<const T> kernel, std::size_t k) {
  if (k % 2 == 0) throw std::invalid_argument("rotate_kernel: kernel size must be odd");
  if (kernel.size() != k * k * k) throw std::invalid_argument("rotate_kernel: kernel is not k^3");
  return rotate_volume_exact<T>(g, kernel, k);
}

template std::vector<float> rotate_volume_exact<float>(const GroupElement&, std::span<const float>, std::size_t);
template std::vector<double> rotate_volume_exact<double>(const GroupElement&, std::span<const double>, std::size_t);
template std::vector<float> rotate_kernel<float>(const GroupElement&, std::span<const float>, std::size_t);
template std::vector<double> rotate_kernel<double>(const GroupElement&, std::span<const double>, std::size_t);

}  // namespace gcnn
