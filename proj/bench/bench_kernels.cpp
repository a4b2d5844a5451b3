// Serial reference kernels against their OpenMP counterparts, plus one
// attack-gradient workload that exercises the per-example parallel loop.

#include <benchmark/benchmark.h>

#include <vector>

#include "bnnlab/attacks.hpp"
#include "bnnlab/kernels.hpp"
#include "bnnlab/rng.hpp"

using namespace bnnlab;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(-1, 1);
  return v;
}

kernels::ConvGeometry geometry(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  return {32, c, 16, 16, c, 3, 1};
}

template <auto Kernel>
void conv_forward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto in = filled(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = filled(g.out_channels * g.in_channels * g.kernel * g.kernel, 2);
  std::vector<double> out(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    Kernel(g, in, w, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(out.size()));
}

template <auto Kernel>
void conv_backward_weight(benchmark::State& state) {
  const auto g = geometry(state);
  const auto in = filled(g.batch * g.in_channels * g.height * g.width, 1);
  const auto go = filled(g.batch * g.out_channels * g.out_height() * g.out_width(), 2);
  std::vector<double> gw(g.out_channels * g.in_channels * g.kernel * g.kernel);
  for (auto _ : state) {
    Kernel(g, in, go, gw);
    benchmark::DoNotOptimize(gw.data());
  }
}

template <auto Kernel>
void matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void attack_gradient(benchmark::State& state) {
  kernels::set_max_threads(static_cast<int>(state.range(0)));
  const Model m = build_model(mini_dense_spec(1, 8, 4, true, {8, 6, 2, 1}), 1);
  Tensor x({64, 1, 8, 8}, 0.5);
  std::vector<std::size_t> y(64, 1);
  for (auto _ : state) benchmark::DoNotOptimize(input_gradient(m, x, y, 4, 7));
}

}  // namespace

BENCHMARK(conv_forward<kernels::serial::conv2d_forward>)->Name("conv_forward/serial")->Arg(8)->Arg(32);
BENCHMARK(conv_forward<kernels::parallel::conv2d_forward>)->Name("conv_forward/parallel")->Arg(8)->Arg(32);
BENCHMARK(conv_backward_weight<kernels::serial::conv2d_backward_weight>)
    ->Name("conv_backward_weight/serial")
    ->Arg(8)
    ->Arg(32);
BENCHMARK(conv_backward_weight<kernels::parallel::conv2d_backward_weight>)
    ->Name("conv_backward_weight/parallel")
    ->Arg(8)
    ->Arg(32);
BENCHMARK(matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(attack_gradient)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
