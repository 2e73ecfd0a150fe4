#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnn/autodiff.hpp"
#include "gcnn/groups.hpp"
#include "gcnn/tensor.hpp"

namespace gcnn {

// G-feature maps are tensors of shape [B, M, |H|, D, D, D]: M filters, each
// with one orientation channel per group element. Orientation channel h of a
// transformed map L_g F is F(g^-1 x, g^-1 h).

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

/// Gather map turning filters [M, C, k, k, k] into the stacked bank
/// [M*|H|, C, k, k, k] whose slice (m, h) is rotate_kernel(h, filters[m]).
IndexMap lifting_index_map(const SymmetryGroup& group, std::size_t filters, std::size_t in_channels, std::size_t k);

/// Gather map turning filters [Mo, Mi, |H|, k, k, k] into the bank
/// [Mo*|H|, Mi*|H|, k, k, k] with W[(m,g),(c,h)](x) = psi[m,c](g^-1 x, g^-1 h).
IndexMap gconv_index_map(const SymmetryGroup& group, std::size_t out_filters, std::size_t in_filters, std::size_t k);

/// [B,C,D,D,D] x filters [M,C,k,k,k] -> [B,M,|H|,D,D,D], same padding, no bias.
template <typename T>
ad::Var<T> lifting_conv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group);
template <typename T>
ad::Var<T> lifting_conv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group,
                        const IndexMap& map);

/// [B,Mi,|H|,D,D,D] x filters [Mo,Mi,|H|,k,k,k] -> [B,Mo,|H|,D,D,D], same padding, no bias.
template <typename T>
ad::Var<T> gconv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group);
template <typename T>
ad::Var<T> gconv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group,
                 const IndexMap& map);

/// Reduction over the orientation axis: [B,M,|H|,...] -> [B,M,...].
template <typename T>
ad::Var<T> g_pool(const ad::Var<T>& input, ad::PoolMode mode);

/// Spatial action of group element g on every channel of [B,C,D,D,D]
/// (or any tensor whose last three extents form a cube).
template <typename T>
Tensor<T> rotate_channels(const GroupElement& g, const Tensor<T>& t);

/// L_g on a G-feature map [B,M,|H|,D,D,D] (trailing spatial extents may be
/// absent): spatial rotation plus orientation permutation new[h] = old[pi_g[h]].
template <typename T>
Tensor<T> transform_gfeature(const SymmetryGroup& group, std::size_t g, const Tensor<T>& t);

enum class Variant { z3, g_fc, g_max, g_avg };
enum class ChannelProfile { table1, text, custom };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);
std::string to_string(ChannelProfile p);
ChannelProfile parse_profile(std::string_view name);

/// Declarative description of one of the network variants:
/// conv1 -> pool -> conv2 -> pool -> conv3 -> GAP -> fc(relu) -> fc -> softmax.
struct NetworkSpec {
  Variant variant = Variant::z3;
  GroupKind group = GroupKind::trivial;
  std::array<std::size_t, 3> channels{24, 48, 96};
  bool conv_bias = true;
  // Position of the orientation pooling for g_max/g_avg: 1..3 right after the
  // ReLU of that conv stage, 4 after global average pooling. Stages following
  // an early pooling lift again and are pooled once more after GAP.
  int gpool_depth = 4;
  std::size_t fc_width = 1024;
  std::size_t classes = 15;
  std::size_t in_channels = 1;
  ChannelProfile profile = ChannelProfile::table1;

  /// Throws ShapeError on inconsistent settings.
  void validate() const;
  bool pools_orientations() const { return variant == Variant::g_max || variant == Variant::g_avg; }

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
};

/// Channel widths for a variant/group under a profile.
/// table1: Z3 (24,48,96), O (5,10,20), O_h (4,8,16); D4/D4h use the Z3 widths
/// divided by sqrt|H|, rounded. text: (48,96,192) divided by sqrt|H|, rounded.
std::array<std::size_t, 3> profile_channels(ChannelProfile profile, GroupKind group);

/// Spec with profile widths, conv bias only for Z3, and default remaining fields.
NetworkSpec make_spec(Variant variant, GroupKind group, std::size_t classes,
                      ChannelProfile profile = ChannelProfile::table1);

/// Closed-form number of trainable scalars.
std::size_t count_parameters(const NetworkSpec& spec);

template <typename T>
struct ForwardTrace {
  ad::Var<T> logits;         // [B, N]
  Tensor<T> stage1;          // first conv output after ReLU, [B,M,|H|,D,D,D] or [B,C,D,D,D]
  Tensor<T> pooled_features; // global-average-pooled features, [B,M,|H|] if oriented else [B,M]
  bool stage1_oriented = false;
  bool features_oriented = false;
};

/// A network built from a NetworkSpec with Xavier-initialized weights and
/// zero biases. Parameters are listed in declaration order.
template <typename T>
class Network {
 public:
  Network(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }
  const SymmetryGroup& group() const { return group_; }

  /// input [B, in_channels, D, D, D] -> logits [B, classes].
  ad::Var<T> forward(const Tensor<T>& input) const;
  ForwardTrace<T> forward_trace(const Tensor<T>& input) const;

  std::vector<ad::Var<T>>& parameters() { return params_; }
  const std::vector<ad::Var<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  struct Stage {
    ad::Var<T> weight;
    ad::Var<T> bias;  // null when absent
    IndexMap map;     // null for plain conv
    bool oriented_input = false;
  };

  ad::Var<T> add_param(Tensor<T> value, std::string name);

  NetworkSpec spec_;
  SymmetryGroup group_;
  std::vector<Stage> stages_;
  ad::Var<T> fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  std::vector<ad::Var<T>> params_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace gcnn
