#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "gcnn/gconv.hpp"
#include "gcnn/kernels.hpp"

using namespace gcnn;

namespace {

// Second conv stage of the Z3 network on a 64^3 input after one pooling.
kernels::Conv3dGeometry stage_geometry() { return kernels::make_conv3d_geometry(1, 24, 48, 32, 3, true); }

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1, 1);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

struct ConvData {
  kernels::Conv3dGeometry g = stage_geometry();
  std::vector<float> in = random_values(g.input_size(), 1);
  std::vector<float> w = random_values(g.weight_size(), 2);
  std::vector<float> b = random_values(g.out_channels, 3);
  std::vector<float> out = std::vector<float>(g.output_size());
  std::vector<float> gout = random_values(g.output_size(), 4);
};

void set_macs(benchmark::State& state, const kernels::Conv3dGeometry& g) {
  const double macs = static_cast<double>(g.output_size()) * g.in_channels * g.kernel * g.kernel * g.kernel;
  state.counters["MAC/s"] = benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ForwardSerial(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    kernels::serial::conv3d_forward<float>(d.g, d.in, d.w, d.b, d.out);
    benchmark::DoNotOptimize(d.out.data());
  }
  set_macs(state, d.g);
}

void BM_ForwardParallel(benchmark::State& state) {
  kernels::set_workers(static_cast<int>(state.range(0)));
  ConvData d;
  for (auto _ : state) {
    kernels::parallel::conv3d_forward<float>(d.g, d.in, d.w, d.b, d.out);
    benchmark::DoNotOptimize(d.out.data());
  }
  set_macs(state, d.g);
}

void BM_BackwardInputSerial(benchmark::State& state) {
  ConvData d;
  std::vector<float> gin(d.g.input_size());
  for (auto _ : state) {
    kernels::serial::conv3d_backward_input<float>(d.g, d.gout, d.w, gin);
    benchmark::DoNotOptimize(gin.data());
  }
  set_macs(state, d.g);
}

void BM_BackwardInputParallel(benchmark::State& state) {
  kernels::set_workers(static_cast<int>(state.range(0)));
  ConvData d;
  std::vector<float> gin(d.g.input_size());
  for (auto _ : state) {
    kernels::parallel::conv3d_backward_input<float>(d.g, d.gout, d.w, gin);
    benchmark::DoNotOptimize(gin.data());
  }
  set_macs(state, d.g);
}

void BM_BackwardWeightSerial(benchmark::State& state) {
  ConvData d;
  std::vector<float> gw(d.g.weight_size()), gb(d.g.out_channels);
  for (auto _ : state) {
    kernels::serial::conv3d_backward_weight<float>(d.g, d.in, d.gout, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
  set_macs(state, d.g);
}

void BM_BackwardWeightParallel(benchmark::State& state) {
  kernels::set_workers(static_cast<int>(state.range(0)));
  ConvData d;
  std::vector<float> gw(d.g.weight_size()), gb(d.g.out_channels);
  for (auto _ : state) {
    kernels::parallel::conv3d_backward_weight<float>(d.g, d.in, d.gout, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
  set_macs(state, d.g);
}

// Full forward pass of a table-width network on one 32^3 volume.
void BM_NetworkForward(benchmark::State& state) {
  kernels::set_workers(1);
  const auto variant = static_cast<Variant>(state.range(0));
  const Network<float> net(make_spec(variant, variant == Variant::z3 ? GroupKind::trivial : GroupKind::o, 15), 5);
  Tensor<float> x({1, 1, 32, 32, 32}, random_values(32 * 32 * 32, 6));
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x)->value.data());
  state.SetLabel(to_string(variant));
}

}  // namespace

BENCHMARK(BM_ForwardSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ForwardParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BackwardInputSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BackwardInputParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BackwardWeightSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BackwardWeightParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_NetworkForward)
    ->Arg(static_cast<int>(Variant::z3))
    ->Arg(static_cast<int>(Variant::g_max))
    ->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
