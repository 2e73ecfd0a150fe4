#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gcnn/errors.hpp"
#include "gcnn/gconv.hpp"
#include "oracles.hpp"

using namespace gcnn;

namespace {

Tensor<double> isotropic_kernel_bank(std::size_t m, std::size_t c) {
  // Value depends only on the squared radius of the offset.
  Tensor<double> t({m, c, 3, 3, 3});
  for (std::size_t f = 0; f < m * c; ++f)
    for (int z = 0; z < 3; ++z)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          const int r2 = (x - 1) * (x - 1) + (y - 1) * (y - 1) + (z - 1) * (z - 1);
          t[f * 27 + static_cast<std::size_t>((z * 3 + y) * 3 + x)] = 0.3 * static_cast<double>(f + 1) - 0.1 * r2;
        }
  return t;
}

}  // namespace

TEST_CASE("lifting_conv") {
  const SymmetryGroup o(GroupKind::o);
  const auto x = oracle::random_tensor<double>({2, 2, 8, 8, 8}, 1);
  const auto psi = oracle::random_tensor<double>({3, 2, 3, 3, 3}, 2);

  SUBCASE("trivial group reduces to conv3d") {
    const SymmetryGroup e(GroupKind::trivial);
    auto lifted = lifting_conv<double>(ad::constant(x), ad::constant(psi), e);
    auto plain = ad::conv3d<double>(ad::constant(x), ad::constant(psi), nullptr, ad::Padding::same);
    CHECK(lifted->value.shape() == Shape{2, 3, 1, 8, 8, 8});
    CHECK(lifted->value.storage() == plain->value.storage());
  }
  SUBCASE("isotropic kernels give identical orientation channels") {
    auto out = lifting_conv<double>(ad::constant(x), ad::constant(isotropic_kernel_bank(3, 2)), o)->value;
    const std::size_t plane = 512;
    for (std::size_t bm = 0; bm < 6; ++bm)
      for (std::size_t h = 1; h < 24; ++h)
        for (std::size_t v = 0; v < plane; ++v)
          REQUIRE(out[(bm * 24 + h) * plane + v] == doctest::Approx(out[bm * 24 * plane + v]).epsilon(1e-13));
  }
  SUBCASE("equivariance for every g in O") {
    const auto base = lifting_conv<double>(ad::constant(x), ad::constant(psi), o)->value;
    for (std::size_t g = 0; g < o.size(); ++g) {
      const auto lhs = lifting_conv<double>(ad::constant(rotate_channels(o.element(g), x)), ad::constant(psi), o)->value;
      const auto rhs = transform_gfeature(o, g, base);
      REQUIRE(oracle::max_rel_dev(lhs.storage(), rhs.storage()) <= 1e-12);
    }
  }
  SUBCASE("equivariance for O_h and D4h") {
    for (auto kind : {GroupKind::oh, GroupKind::d4h}) {
      const SymmetryGroup grp(kind);
      const auto base = lifting_conv<double>(ad::constant(x), ad::constant(psi), grp)->value;
      for (std::size_t g = 0; g < grp.size(); g += 3) {
        const auto lhs =
            lifting_conv<double>(ad::constant(rotate_channels(grp.element(g), x)), ad::constant(psi), grp)->value;
        REQUIRE(oracle::max_rel_dev(lhs.storage(), transform_gfeature(grp, g, base).storage()) <= 1e-12);
      }
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(lifting_conv<double>(ad::constant(x), ad::constant(Tensor<double>({3, 1, 3, 3, 3})), o),
                    ShapeError);
    CHECK_THROWS_AS(lifting_conv<double>(ad::constant(x), ad::constant(Tensor<double>({3, 2, 2, 2, 2})), o),
                    ShapeError);
  }
}

TEST_CASE("gconv") {
  const SymmetryGroup o(GroupKind::o);

  SUBCASE("trivial group reduces to conv3d") {
    const SymmetryGroup e(GroupKind::trivial);
    const auto x = oracle::random_tensor<double>({1, 3, 1, 6, 6, 6}, 3);
    const auto psi = oracle::random_tensor<double>({2, 3, 1, 3, 3, 3}, 4);
    auto out = gconv<double>(ad::constant(x), ad::constant(psi), e)->value;
    auto plain = ad::conv3d<double>(ad::constant(x.reshaped({1, 3, 6, 6, 6})),
                                    ad::constant(psi.reshaped({2, 3, 3, 3, 3})), nullptr, ad::Padding::same)
                     ->value;
    CHECK(out.storage() == plain.storage());
  }
  SUBCASE("orientation-constant isotropic filters give identical channels") {
    const auto x = oracle::random_tensor<double>({1, 2, 24, 4, 4, 4}, 5);
    const auto iso = isotropic_kernel_bank(2 * 2, 1);
    Tensor<double> psi({2, 2, 24, 3, 3, 3});
    for (std::size_t mc = 0; mc < 4; ++mc)
      for (std::size_t h = 0; h < 24; ++h) std::copy_n(iso.data() + mc * 27, 27, psi.data() + (mc * 24 + h) * 27);
    auto out = gconv<double>(ad::constant(x), ad::constant(psi), o)->value;
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t h = 1; h < 24; ++h)
        for (std::size_t v = 0; v < 64; ++v)
          REQUIRE(out[(m * 24 + h) * 64 + v] == doctest::Approx(out[m * 24 * 64 + v]).epsilon(1e-12));
  }
  SUBCASE("equivariance for every g in O") {
    const auto x = oracle::random_tensor<double>({1, 2, 24, 8, 8, 8}, 6);
    const auto psi = oracle::random_tensor<double>({2, 2, 24, 3, 3, 3}, 7);
    const auto map = gconv_index_map(o, 2, 2, 3);
    const auto base = gconv<double>(ad::constant(x), ad::constant(psi), o, map)->value;
    for (std::size_t g = 0; g < o.size(); ++g) {
      const auto lhs = gconv<double>(ad::constant(transform_gfeature(o, g, x)), ad::constant(psi), o, map)->value;
      REQUIRE(oracle::max_rel_dev(lhs.storage(), transform_gfeature(o, g, base).storage()) <= 1e-12);
    }
  }
  SUBCASE("group mismatch rejected") {
    const auto x = oracle::random_tensor<double>({1, 2, 48, 4, 4, 4}, 6);
    const auto psi = oracle::random_tensor<double>({2, 2, 24, 3, 3, 3}, 7);
    CHECK_THROWS_AS(gconv<double>(ad::constant(x), ad::constant(psi), o), ShapeError);
  }
}

TEST_CASE("g_pool") {
  const SymmetryGroup o(GroupKind::o);
  const auto f = oracle::random_tensor<double>({2, 3, 24, 4, 4, 4}, 8);

  SUBCASE("single orientation is the identity") {
    const auto one = oracle::random_tensor<double>({2, 3, 1, 4, 4, 4}, 9);
    for (auto mode : {ad::PoolMode::max, ad::PoolMode::avg})
      CHECK(g_pool<double>(ad::constant(one), mode)->value.storage() == one.storage());
  }
  SUBCASE("equal channels: max and avg agree with any channel") {
    Tensor<double> eq({1, 1, 24, 2, 2, 2});
    for (std::size_t h = 0; h < 24; ++h)
      for (std::size_t v = 0; v < 8; ++v) eq[h * 8 + v] = 0.5 * static_cast<double>(v) - 1.0;
    const auto mx = g_pool<double>(ad::constant(eq), ad::PoolMode::max)->value;
    const auto av = g_pool<double>(ad::constant(eq), ad::PoolMode::avg)->value;
    for (std::size_t v = 0; v < 8; ++v) {
      CHECK(mx[v] == eq[v]);
      CHECK(av[v] == doctest::Approx(eq[v]).epsilon(1e-14));
    }
  }
  SUBCASE("orientation permutation is absorbed") {
    for (auto mode : {ad::PoolMode::max, ad::PoolMode::avg}) {
      const auto base = g_pool<double>(ad::constant(f), mode)->value;
      for (std::size_t g = 0; g < o.size(); ++g) {
        const auto lhs = g_pool<double>(ad::constant(transform_gfeature(o, g, f)), mode)->value;
        REQUIRE(oracle::max_rel_dev(lhs.storage(), rotate_channels(o.element(g), base).storage()) <= 1e-12);
      }
    }
  }
}

TEST_CASE("parameter counts reproduce the published table") {
  CHECK(count_parameters(make_spec(Variant::z3, GroupKind::trivial, 15)) == 271039);
  CHECK(count_parameters(make_spec(Variant::g_fc, GroupKind::o, 15)) == 670054);
  CHECK(count_parameters(make_spec(Variant::g_max, GroupKind::o, 15)) == 199014);
  CHECK(count_parameters(make_spec(Variant::g_avg, GroupKind::o, 15)) == 199014);
  CHECK(count_parameters(make_spec(Variant::g_fc, GroupKind::oh, 25)) == 1020549);
  CHECK(count_parameters(make_spec(Variant::g_max, GroupKind::oh, 25)) == 250501);
  CHECK(count_parameters(make_spec(Variant::g_avg, GroupKind::oh, 25)) == 250501);
}

TEST_CASE("closed-form count equals the built network") {
  for (auto variant : {Variant::z3, Variant::g_fc, Variant::g_max, Variant::g_avg})
    for (auto kind : {GroupKind::o, GroupKind::oh, GroupKind::d4})
      for (int depth : {1, 2, 3, 4})
        for (bool bias : {false, true}) {
          auto spec = make_spec(variant, kind, 5);
          spec.channels = {2, 3, 4};
          spec.profile = ChannelProfile::custom;
          spec.fc_width = 8;
          spec.gpool_depth = depth;
          spec.conv_bias = bias;
          const Network<float> net(spec, 1);
          CAPTURE(spec.to_json().dump());
          REQUIRE(net.parameter_count() == count_parameters(spec));
        }
}

TEST_CASE("profiles and spec json") {
  CHECK(profile_channels(ChannelProfile::table1, GroupKind::o) == std::array<std::size_t, 3>{5, 10, 20});
  CHECK(profile_channels(ChannelProfile::table1, GroupKind::oh) == std::array<std::size_t, 3>{4, 8, 16});
  CHECK(profile_channels(ChannelProfile::text, GroupKind::trivial) == std::array<std::size_t, 3>{48, 96, 192});
  CHECK(profile_channels(ChannelProfile::text, GroupKind::o) == std::array<std::size_t, 3>{10, 20, 39});

  auto spec = make_spec(Variant::g_avg, GroupKind::d4h, 7, ChannelProfile::text);
  spec.gpool_depth = 3;
  const auto back = NetworkSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());

  auto z3 = make_spec(Variant::z3, GroupKind::o, 3);
  CHECK(z3.group == GroupKind::trivial);
  z3.group = GroupKind::o;
  CHECK_THROWS_AS(z3.validate(), ShapeError);
  auto bad = make_spec(Variant::g_max, GroupKind::o, 3);
  bad.gpool_depth = 5;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad.gpool_depth = 4;
  bad.channels[1] = 0;
  CHECK_THROWS_AS(count_parameters(bad), ShapeError);
}

TEST_CASE("z3 network on a 64^3 volume emits a probability vector") {
  const Network<float> net(make_spec(Variant::z3, GroupKind::trivial, 15), 3);
  const auto x = oracle::random_tensor<float>({1, 1, 64, 64, 64}, 4);
  const auto logits = net.forward(x)->value;
  CHECK(logits.shape() == Shape{1, 15});
  const auto p = ad::softmax(logits);
  CHECK(std::accumulate(p.values().begin(), p.values().end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("orientation-pooled networks are invariant to the cube group") {
  const auto x = oracle::random_tensor<float>({1, 1, 16, 16, 16}, 5);
  for (auto variant : {Variant::g_max, Variant::g_avg})
    for (int depth : {3, 4}) {
      auto spec = make_spec(variant, GroupKind::o, 15);
      spec.gpool_depth = depth;
      const Network<float> net(spec, 6);
      const SymmetryGroup& o = net.group();
      const auto base = net.forward(x)->value;
      double worst = 0;
      for (const auto& g : o.elements())
        worst = std::max(worst, oracle::max_abs_dev(net.forward(rotate_channels(g, x))->value.storage(), base.storage()));
      CAPTURE(to_string(variant));
      CAPTURE(depth);
      CHECK(worst <= 1e-4);
    }
}

TEST_CASE("early orientation pooling with re-lifting stays invariant") {
  auto spec = make_spec(Variant::g_max, GroupKind::o, 4);
  spec.channels = {2, 2, 3};
  spec.fc_width = 16;
  spec.gpool_depth = 1;
  spec.conv_bias = true;
  const Network<double> net(spec, 8);
  const auto x = oracle::random_tensor<double>({1, 1, 8, 8, 8}, 9);
  const auto base = net.forward(x)->value;
  for (const auto& g : net.group().elements())
    REQUIRE(oracle::max_abs_dev(net.forward(rotate_channels(g, x))->value.storage(), base.storage()) <= 1e-12);
}

TEST_CASE("unpooled variants are not invariant") {
  // Unit-variance input with a bar near one face and a tilted ramp; uniform
  // noise carries too little directional structure for a clear witness.
  Tensor<float> x({1, 1, 16, 16, 16});
  for (std::size_t z = 0; z < 16; ++z)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t i = 0; i < 16; ++i)
        x[voxel_index(16, i, y, z)] =
            (i < 4 && y > 5 && y < 10 ? 3.0f : 0.0f) + 0.1f * static_cast<float>(i + 2 * y + 3 * z) / 16.0f;
  double mean = 0, sq = 0;
  for (float v : x.values()) mean += v;
  mean /= static_cast<double>(x.size());
  for (float v : x.values()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(x.size()));
  for (auto& v : x.values()) v = static_cast<float>((v - mean) / sd);

  const SymmetryGroup o(GroupKind::o);
  for (auto variant : {Variant::g_fc, Variant::z3}) {
    const Network<float> net(make_spec(variant, GroupKind::o, 15), 6);
    const auto base = net.forward(x)->value;
    double worst = 0;
    for (const auto& g : o.elements())
      worst = std::max(worst, oracle::max_abs_dev(net.forward(rotate_channels(g, x))->value.storage(), base.storage()));
    CAPTURE(to_string(variant));
    CHECK(worst > 1e-2);
  }
}

TEST_CASE("g_fc features are equivariant: aligned GAP features match") {
  const Network<double> net(make_spec(Variant::g_fc, GroupKind::o, 15), 2);
  const auto x = oracle::random_tensor<double>({1, 1, 8, 8, 8}, 3);
  const auto base = net.forward_trace(x);
  REQUIRE(base.features_oriented);
  for (std::size_t g = 0; g < 24; ++g) {
    const auto t = net.forward_trace(rotate_channels(net.group().element(g), x));
    REQUIRE(oracle::max_rel_dev(t.pooled_features.storage(), transform_gfeature(net.group(), g, base.pooled_features).storage()) <=
            1e-12);
  }
}

TEST_CASE("network gradients match finite differences") {
  const auto x = oracle::random_tensor<double>({2, 1, 8, 8, 8}, 10);
  const std::vector<std::size_t> labels{0, 2};
  for (auto variant : {Variant::z3, Variant::g_max}) {
    auto spec = make_spec(variant, GroupKind::o, 3);
    spec.channels = {2, 2, 2};
    spec.profile = ChannelProfile::custom;
    spec.fc_width = 8;
    Network<double> net(spec, 11);
    auto loss = [&] { return ad::softmax_xent<double>(net.forward(x), labels); };
    for (auto& p : net.parameters()) {
      CAPTURE(p->name);
      const auto r = ad::grad_check(loss, p, 12, 1e-5, 12);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}
