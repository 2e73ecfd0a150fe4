#include "gcnn/gconv.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "gcnn/errors.hpp"
#include "gcnn/optim.hpp"
#include "gcnn/seed.hpp"

namespace gcnn {

namespace {

constexpr std::size_t kKernel = 3;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

IndexMap lifting_index_map(const SymmetryGroup& group, std::size_t filters, std::size_t in_channels, std::size_t k) {
  const std::size_t h = group.size(), k3 = k * k * k;
  auto map = std::make_shared<std::vector<std::size_t>>(filters * h * in_channels * k3);
  std::size_t at = 0;
  for (std::size_t m = 0; m < filters; ++m)
    for (std::size_t g = 0; g < h; ++g) {
      const auto spatial = rotation_gather_map(group.element(g), k);
      for (std::size_t c = 0; c < in_channels; ++c)
        for (std::size_t v = 0; v < k3; ++v) (*map)[at++] = (m * in_channels + c) * k3 + spatial[v];
    }
  return map;
}

IndexMap gconv_index_map(const SymmetryGroup& group, std::size_t out_filters, std::size_t in_filters, std::size_t k) {
  const std::size_t h = group.size(), k3 = k * k * k;
  auto map = std::make_shared<std::vector<std::size_t>>(out_filters * h * in_filters * h * k3);
  std::size_t at = 0;
  for (std::size_t m = 0; m < out_filters; ++m)
    for (std::size_t g = 0; g < h; ++g) {
      const auto spatial = rotation_gather_map(group.element(g), k);
      const auto perm = group.left_perm(g);
      for (std::size_t c = 0; c < in_filters; ++c)
        for (std::size_t hp = 0; hp < h; ++hp)
          for (std::size_t v = 0; v < k3; ++v) (*map)[at++] = ((m * in_filters + c) * h + perm[hp]) * k3 + spatial[v];
    }
  return map;
}

template <typename T>
ad::Var<T> lifting_conv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group,
                        const IndexMap& map) {
  const Shape& fs = filters->value.shape();
  const Shape& xs = input->value.shape();
  if (fs.size() != 5 || xs.size() != 5) throw ShapeError("lifting_conv: expected [B,C,D,D,D] input and [M,C,k,k,k] filters");
  if (fs[1] != xs[1]) throw ShapeError("lifting_conv: filter/input channel mismatch");
  const std::size_t h = group.size();
  auto bank = ad::gather<T>(filters, map, {fs[0] * h, fs[1], fs[2], fs[3], fs[4]});
  auto out = ad::conv3d<T>(input, bank, nullptr, ad::Padding::same);
  const Shape& os = out->value.shape();
  return ad::reshape<T>(out, {os[0], fs[0], h, os[2], os[3], os[4]});
}

template <typename T>
ad::Var<T> lifting_conv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group) {
  const Shape& fs = filters->value.shape();
  if (fs.size() != 5 || fs[2] != fs[3] || fs[2] != fs[4]) throw ShapeError("lifting_conv: filters must be [M,C,k,k,k]");
  if (fs[2] % 2 == 0) throw ShapeError("lifting_conv: kernel size must be odd");
  return lifting_conv<T>(input, filters, group, lifting_index_map(group, fs[0], fs[1], fs[2]));
}

template <typename T>
ad::Var<T> gconv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group, const IndexMap& map) {
  const Shape& fs = filters->value.shape();
  const Shape& xs = input->value.shape();
  const std::size_t h = group.size();
  if (xs.size() != 6 || fs.size() != 6) throw ShapeError("gconv: expected [B,M,H,D,D,D] input and [Mo,Mi,H,k,k,k] filters");
  if (xs[2] != h || fs[2] != h)
    throw ShapeError("gconv: orientation axis " + std::to_string(xs[2]) + " does not match group of order " +
                     std::to_string(h));
  if (fs[1] != xs[1]) throw ShapeError("gconv: filter/input channel mismatch");
  auto flat = ad::reshape<T>(input, {xs[0], xs[1] * h, xs[3], xs[4], xs[5]});
  auto bank = ad::gather<T>(filters, map, {fs[0] * h, fs[1] * h, fs[3], fs[4], fs[5]});
  auto out = ad::conv3d<T>(flat, bank, nullptr, ad::Padding::same);
  const Shape& os = out->value.shape();
  return ad::reshape<T>(out, {os[0], fs[0], h, os[2], os[3], os[4]});
}

template <typename T>
ad::Var<T> gconv(const ad::Var<T>& input, const ad::Var<T>& filters, const SymmetryGroup& group) {
  const Shape& fs = filters->value.shape();
  if (fs.size() != 6 || fs[3] != fs[4] || fs[3] != fs[5]) throw ShapeError("gconv: filters must be [Mo,Mi,H,k,k,k]");
  if (fs[3] % 2 == 0) throw ShapeError("gconv: kernel size must be odd");
  if (fs[2] != group.size()) throw ShapeError("gconv: filter orientation axis does not match group");
  return gconv<T>(input, filters, group, gconv_index_map(group, fs[0], fs[1], fs[3]));
}

template <typename T>
ad::Var<T> g_pool(const ad::Var<T>& input, ad::PoolMode mode) {
  return ad::orientation_pool<T>(input, mode);
}

template <typename T>
Tensor<T> rotate_channels(const GroupElement& g, const Tensor<T>& t) {
  const Shape& s = t.shape();
  if (s.size() < 3) throw ShapeError("rotate_channels: need three trailing spatial extents");
  const std::size_t d = s[s.size() - 1];
  if (s[s.size() - 2] != d || s[s.size() - 3] != d) throw ShapeError("rotate_channels: spatial extents must be cubic");
  const auto map = rotation_gather_map(g, d);
  const std::size_t plane = d * d * d;
  Tensor<T> out(s);
  for (std::size_t p = 0; p < t.size() / plane; ++p)
    for (std::size_t v = 0; v < plane; ++v) out[p * plane + v] = t[p * plane + map[v]];
  return out;
}

template <typename T>
Tensor<T> transform_gfeature(const SymmetryGroup& group, std::size_t g, const Tensor<T>& t) {
  const Shape& s = t.shape();
  const std::size_t h = group.size();
  if (s.size() < 3 || s[2] != h) throw ShapeError("transform_gfeature: expected [B,M,|H|,...] with matching group");
  const Tensor<T> spatial = s.size() == 6 ? rotate_channels(group.element(g), t) : t;
  const auto perm = group.left_perm(g);
  const std::size_t outer = s[0] * s[1];
  const std::size_t inner = t.size() / (outer * h);
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < h; ++r)
      std::copy_n(spatial.data() + (o * h + perm[r]) * inner, inner, out.data() + (o * h + r) * inner);
  return out;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::z3: return "z3";
    case Variant::g_fc: return "g_fc";
    case Variant::g_max: return "g_max";
    case Variant::g_avg: return "g_avg";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  const std::string s = lower(name);
  if (s == "z3") return Variant::z3;
  if (s == "g_fc" || s == "fc") return Variant::g_fc;
  if (s == "g_max" || s == "max") return Variant::g_max;
  if (s == "g_avg" || s == "avg") return Variant::g_avg;
  throw std::invalid_argument("unknown network variant '" + std::string(name) + "'");
}

std::string to_string(ChannelProfile p) {
  switch (p) {
    case ChannelProfile::table1: return "table1";
    case ChannelProfile::text: return "text";
    case ChannelProfile::custom: return "custom";
  }
  return "?";
}

ChannelProfile parse_profile(std::string_view name) {
  const std::string s = lower(name);
  if (s == "table1") return ChannelProfile::table1;
  if (s == "text") return ChannelProfile::text;
  if (s == "custom") return ChannelProfile::custom;
  throw std::invalid_argument("unknown channel profile '" + std::string(name) + "'");
}

std::array<std::size_t, 3> profile_channels(ChannelProfile profile, GroupKind group) {
  const double root = std::sqrt(static_cast<double>(SymmetryGroup(group).size()));
  auto divided = [root](std::array<std::size_t, 3> base) {
    for (auto& c : base) c = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(c / root)));
    return base;
  };
  if (profile == ChannelProfile::text) return divided({48, 96, 192});
  switch (group) {
    case GroupKind::trivial: return {24, 48, 96};
    case GroupKind::o: return {5, 10, 20};
    case GroupKind::oh: return {4, 8, 16};
    default: return divided({24, 48, 96});
  }
}

NetworkSpec make_spec(Variant variant, GroupKind group, std::size_t classes, ChannelProfile profile) {
  NetworkSpec spec;
  spec.variant = variant;
  spec.group = variant == Variant::z3 ? GroupKind::trivial : group;
  spec.profile = profile;
  if (profile != ChannelProfile::custom) spec.channels = profile_channels(profile, spec.group);
  spec.conv_bias = variant == Variant::z3;
  spec.classes = classes;
  return spec;
}

void NetworkSpec::validate() const {
  if (variant == Variant::z3 && group != GroupKind::trivial) throw ShapeError("z3 variant requires the trivial group");
  for (std::size_t c : channels)
    if (c == 0) throw ShapeError("channel widths must be >= 1");
  if (fc_width == 0) throw ShapeError("fc_width must be >= 1");
  if (classes == 0) throw ShapeError("classes must be >= 1");
  if (in_channels == 0) throw ShapeError("in_channels must be >= 1");
  if (gpool_depth < 1 || gpool_depth > 4) throw ShapeError("gpool_depth must be in 1..4");
}

nlohmann::json NetworkSpec::to_json() const {
  return {{"variant", to_string(variant)}, {"group", to_string(group)},   {"channels", channels},
          {"conv_bias", conv_bias},        {"gpool_depth", gpool_depth},  {"fc_width", fc_width},
          {"classes", classes},            {"profile", to_string(profile)}, {"in_channels", in_channels}};
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.variant = parse_variant(j.value("variant", std::string("z3")));
  s.group = s.variant == Variant::z3 ? GroupKind::trivial : parse_group_kind(j.value("group", std::string("o")));
  s.profile = parse_profile(j.value("profile", std::string("table1")));
  s.classes = j.value("classes", std::size_t{15});
  if (j.contains("channels")) {
    s.channels = j.at("channels").get<std::array<std::size_t, 3>>();
  } else {
    s.channels = profile_channels(s.profile, s.group);
  }
  s.conv_bias = j.value("conv_bias", s.variant == Variant::z3);
  s.gpool_depth = j.value("gpool_depth", 4);
  s.fc_width = j.value("fc_width", std::size_t{1024});
  s.in_channels = j.value("in_channels", std::size_t{1});
  s.validate();
  return s;
}

std::size_t count_parameters(const NetworkSpec& spec) {
  spec.validate();
  const std::size_t h = SymmetryGroup(spec.group).size();
  const std::size_t k3 = kKernel * kKernel * kKernel;
  const bool grouped = spec.variant != Variant::z3;
  std::size_t total = 0, in = spec.in_channels;
  bool oriented = false;
  for (int l = 0; l < 3; ++l) {
    const std::size_t c = spec.channels[l];
    total += k3 * (oriented ? h : 1) * in * c;
    if (spec.conv_bias) total += c;
    oriented = grouped;
    if (spec.pools_orientations() && spec.gpool_depth == l + 1) oriented = false;
    in = c;
  }
  const std::size_t dense_in = in * (oriented && !spec.pools_orientations() ? h : 1);
  total += dense_in * spec.fc_width + spec.fc_width;
  total += spec.fc_width * spec.classes + spec.classes;
  return total;
}

template <typename T>
ad::Var<T> Network<T>::add_param(Tensor<T> value, std::string name) {
  auto p = ad::parameter<T>(std::move(value), std::move(name));
  params_.push_back(p);
  return p;
}

template <typename T>
Network<T>::Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)), group_(spec_.group) {
  spec_.validate();
  const std::size_t h = group_.size();
  const std::size_t k3 = kKernel * kKernel * kKernel;
  const bool grouped = spec_.variant != Variant::z3;
  std::uint64_t salt = 0;

  std::size_t in = spec_.in_channels;
  bool oriented = false;
  for (int l = 0; l < 3; ++l) {
    const std::size_t c = spec_.channels[l];
    const std::string prefix = "conv" + std::to_string(l + 1);
    Stage st;
    st.oriented_input = oriented;
    if (oriented) {
      st.weight = add_param(xavier_init<T>({c, in, h, kKernel, kKernel, kKernel}, in * h * k3, c * h * k3,
                                           derive_seed(seed, {salt++})),
                            prefix + ".weight");
      st.map = gconv_index_map(group_, c, in, kKernel);
    } else {
      st.weight = add_param(
          xavier_init<T>({c, in, kKernel, kKernel, kKernel}, in * k3, c * k3, derive_seed(seed, {salt++})),
          prefix + ".weight");
      if (grouped) st.map = lifting_index_map(group_, c, in, kKernel);
    }
    if (spec_.conv_bias) st.bias = add_param(Tensor<T>({c}), prefix + ".bias");
    stages_.push_back(std::move(st));

    oriented = grouped;
    if (spec_.pools_orientations() && spec_.gpool_depth == l + 1) oriented = false;
    in = c;
  }

  const std::size_t dense_in = in * (oriented && !spec_.pools_orientations() ? h : 1);
  fc1_w_ = add_param(xavier_init<T>({dense_in, spec_.fc_width}, dense_in, spec_.fc_width, derive_seed(seed, {salt++})),
                     "fc1.weight");
  fc1_b_ = add_param(Tensor<T>({spec_.fc_width}), "fc1.bias");
  fc2_w_ = add_param(
      xavier_init<T>({spec_.fc_width, spec_.classes}, spec_.fc_width, spec_.classes, derive_seed(seed, {salt++})),
      "fc2.weight");
  fc2_b_ = add_param(Tensor<T>({spec_.classes}), "fc2.bias");
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
ForwardTrace<T> Network<T>::forward_trace(const Tensor<T>& input) const {
  const Shape& s = input.shape();
  if (s.size() != 5 || s[1] != spec_.in_channels)
    throw ShapeError("network input must be [B," + std::to_string(spec_.in_channels) + ",D,D,D], got " +
                     shape_string(s));
  const std::size_t h = group_.size();
  const bool grouped = spec_.variant != Variant::z3;
  const auto mode = spec_.variant == Variant::g_avg ? ad::PoolMode::avg : ad::PoolMode::max;

  ForwardTrace<T> trace;
  ad::Var<T> x = ad::constant<T>(input);
  bool oriented = false;
  for (std::size_t l = 0; l < stages_.size(); ++l) {
    const Stage& st = stages_[l];
    if (!grouped) {
      x = ad::conv3d<T>(x, st.weight, st.bias, ad::Padding::same);
    } else {
      x = st.oriented_input ? gconv<T>(x, st.weight, group_, st.map) : lifting_conv<T>(x, st.weight, group_, st.map);
      // One bias per filter, shared by its orientation channels.
      if (st.bias) x = ad::add_bias<T>(x, st.bias);
      oriented = true;
    }
    x = ad::relu<T>(x);
    if (l == 0) {
      trace.stage1 = x->value;
      trace.stage1_oriented = oriented;
    }
    if (oriented && spec_.pools_orientations() && spec_.gpool_depth == static_cast<int>(l) + 1) {
      x = g_pool<T>(x, mode);
      oriented = false;
    }
    if (l + 1 < stages_.size()) {
      const Shape xs = x->value.shape();
      if (oriented) {
        auto pooled = ad::maxpool3d<T>(ad::reshape<T>(x, {xs[0], xs[1] * h, xs[3], xs[4], xs[5]}));
        const std::size_t d = pooled->value.dim(2);
        x = ad::reshape<T>(pooled, {xs[0], xs[1], h, d, d, d});
      } else {
        x = ad::maxpool3d<T>(x);
      }
    }
  }

  const Shape xs = x->value.shape();
  if (oriented) {
    x = ad::reshape<T>(ad::global_avg_pool<T>(ad::reshape<T>(x, {xs[0], xs[1] * h, xs[3], xs[4], xs[5]})),
                       {xs[0], xs[1], h});
    trace.pooled_features = x->value;
    trace.features_oriented = true;
    if (spec_.pools_orientations()) {
      x = g_pool<T>(x, mode);
    } else {
      x = ad::reshape<T>(x, {xs[0], xs[1] * h});
    }
  } else {
    x = ad::global_avg_pool<T>(x);
    trace.pooled_features = x->value;
  }

  x = ad::relu<T>(ad::dense<T>(x, fc1_w_, fc1_b_));
  trace.logits = ad::dense<T>(x, fc2_w_, fc2_b_);
  return trace;
}

template <typename T>
ad::Var<T> Network<T>::forward(const Tensor<T>& input) const {
  return forward_trace(input).logits;
}

template class Network<float>;
template class Network<double>;

#define GCNN_INSTANTIATE(T)                                                                                  \
  template ad::Var<T> lifting_conv<T>(const ad::Var<T>&, const ad::Var<T>&, const SymmetryGroup&);          \
  template ad::Var<T> lifting_conv<T>(const ad::Var<T>&, const ad::Var<T>&, const SymmetryGroup&,           \
                                      const IndexMap&);                                                      \
  template ad::Var<T> gconv<T>(const ad::Var<T>&, const ad::Var<T>&, const SymmetryGroup&);                 \
  template ad::Var<T> gconv<T>(const ad::Var<T>&, const ad::Var<T>&, const SymmetryGroup&, const IndexMap&); \
  template ad::Var<T> g_pool<T>(const ad::Var<T>&, ad::PoolMode);                                           \
  template Tensor<T> rotate_channels<T>(const GroupElement&, const Tensor<T>&);                              \
  template Tensor<T> transform_gfeature<T>(const SymmetryGroup&, std::size_t, const Tensor<T>&);

GCNN_INSTANTIATE(float)
GCNN_INSTANTIATE(double)

#undef GCNN_INSTANTIATE

}  // namespace gcnn
