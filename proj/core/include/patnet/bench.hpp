#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patnet/model.hpp"

namespace patnet {

struct BenchOptions {
  std::string variant = "T0";
  int batch_size = 1;
  int iters = 10;
  int warmup = 2;
  int threads = 1;
  bool fused = false;
  int input_size = 224;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::string variant;
  int batch_size = 0;
  int warmup_iters = 0;
  int measured_iters = 0;
  double images_per_sec = 0.0;
  double mean_latency_ms = 0.0;
  double p50_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
  int threads = 1;
};

/// Nearest-rank percentile of an unsorted sample, q in [0, 1].
double percentile(std::vector<double> samples, double q);

/// Times `iters` steady-state iterations after `warmup` discarded ones. Each
/// iteration runs one batch forward on every one of `threads` workers sharing
/// the same immutable network; latency is the wall time of an iteration.
BenchReport bench_run(const BenchOptions& options);
/// Same, for an already compiled network.
BenchReport bench_run(const PatNet& net, const BenchOptions& options);

}  // namespace patnet
