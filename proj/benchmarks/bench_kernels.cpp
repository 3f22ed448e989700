#include <benchmark/benchmark.h>

#include <random>

#include "patnet/fusion.hpp"
#include "patnet/kernels.hpp"

using namespace patnet;

namespace {

std::mt19937_64& gen() {
  static std::mt19937_64 g(1234);
  return g;
}

Tensor4 random_tensor(int n, int c, int h, int w) {
  Tensor4 t(n, c, h, w);
  std::normal_distribution<float> d;
  for (float& v : t.values()) v = d(gen());
  return t;
}

Matrix random_matrix(int r, int c) {
  Matrix m(r, c);
  std::normal_distribution<float> d;
  for (float& v : m.data) v = d(gen());
  return m;
}

ConvParams random_conv(int out, int in, int k, int groups = 1) {
  ConvParams p;
  p.weight = random_tensor(out, in / groups, k, k);
  p.padding = k / 2;
  p.groups = groups;
  return p;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = int(state.range(0)), hw = int(state.range(1));
  const Tensor4 x = random_tensor(1, c, hw, hw);
  const ConvParams p = random_conv(c, c, 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
  state.SetItemsProcessed(state.iterations() * std::int64_t(c) * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv3x3)->Args({16, 56})->Args({40, 28})->Args({80, 14});

void BM_Conv1x1(benchmark::State& state) {
  const int c = int(state.range(0)), hw = int(state.range(1));
  const Tensor4 x = random_tensor(1, c, hw, hw);
  const ConvParams p = random_conv(2 * c, c, 1);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
  state.SetItemsProcessed(state.iterations() * std::int64_t(2) * c * c * hw * hw);
}
BENCHMARK(BM_Conv1x1)->Args({64, 56})->Args({256, 14});

void BM_DepthwiseConv(benchmark::State& state) {
  const int c = int(state.range(0));
  const Tensor4 x = random_tensor(1, c, 28, 28);
  const ConvParams p = random_conv(c, c, 3, c);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
}
BENCHMARK(BM_DepthwiseConv)->Arg(128);

void BM_Softmax(benchmark::State& state) {
  const Matrix m = random_matrix(int(state.range(0)), int(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(softmax_rows(m));
}
BENCHMARK(BM_Softmax)->Arg(49)->Arg(196);

void BM_Matmul(benchmark::State& state) {
  const int n = int(state.range(0));
  const Matrix a = random_matrix(n, n), b = random_matrix(n, n);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * std::int64_t(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_T0Forward(benchmark::State& state) {
  const ModelSpec spec = build_variant("T0");
  const ParamStore store = init_params(spec, 0);
  const PatNet net = PatNet::compile(spec, state.range(0) ? fuse_model(store, spec).store : store);
  const Tensor4 x = random_tensor(1, 3, 224, 224);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x));
  state.SetLabel(state.range(0) ? "fused" : "unfused");
}
BENCHMARK(BM_T0Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
