#include "patnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "patnet/fusion.hpp"

namespace patnet {

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
  return samples[std::clamp<std::size_t>(rank, 1, samples.size()) - 1];
}

BenchReport bench_run(const BenchOptions& o) {
  const ModelSpec spec = build_variant(o.variant, o.input_size, o.input_size);
  ParamStore store = init_params(spec, o.seed);
  if (o.fused) store = fuse_model(store, spec).store;
  return bench_run(PatNet::compile(spec, store), o);
}

BenchReport bench_run(const PatNet& net, const BenchOptions& o) {
  if (o.iters < 1) throw std::invalid_argument("bench: --iters must be at least 1");
  if (o.warmup < 0) throw std::invalid_argument("bench: --warmup must not be negative");
  if (o.batch_size < 1) throw std::invalid_argument("bench: --batch must be at least 1");
  if (o.threads < 1) throw std::invalid_argument("bench: --threads must be at least 1");

  const ModelSpec& spec = net.spec();
  Tensor4 input(o.batch_size, 3, spec.input_h, spec.input_w);
  std::mt19937_64 rng(o.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (float& v : input.values()) v = normal(rng);

  auto step = [&] {
    if (o.threads == 1) {
      net.forward(input);
      return;
    }
    std::vector<std::jthread> workers;
    workers.reserve(o.threads);
    for (int t = 0; t < o.threads; ++t) workers.emplace_back([&] { net.forward(input); });
  };

  using clock = std::chrono::steady_clock;
  for (int i = 0; i < o.warmup; ++i) step();
  std::vector<double> latencies;
  latencies.reserve(o.iters);
  for (int i = 0; i < o.iters; ++i) {
    const auto t0 = clock::now();
    step();
    latencies.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
  }

  BenchReport r;
  r.variant = spec.config.name;
  r.batch_size = o.batch_size;
  r.warmup_iters = o.warmup;
  r.measured_iters = o.iters;
  r.threads = o.threads;
  const double total_ms = std::accumulate(latencies.begin(), latencies.end(), 0.0);
  r.mean_latency_ms = total_ms / o.iters;
  r.p50_latency_ms = percentile(latencies, 0.50);
  r.p95_latency_ms = percentile(latencies, 0.95);
  const double images = static_cast<double>(o.batch_size) * o.threads * o.iters;
  r.images_per_sec = images / std::max(total_ms, 1e-6) * 1000.0;
  return r;
}

}  // namespace patnet
