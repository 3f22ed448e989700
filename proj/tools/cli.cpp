#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "patnet/gradcheck.hpp"
#include "patnet/image.hpp"
#include "patnet/weights.hpp"

namespace patnet::cli {

namespace {

template <class... Args>
std::string printf_string(const char* format, Args... args) {
  const int n = std::snprintf(nullptr, 0, format, args...);
  std::string s(static_cast<std::size_t>(n), '\0');
  std::snprintf(s.data(), s.size() + 1, format, args...);
  return s;
}

struct SummaryArgs {
  std::string variant;
  int input_size = 224;
  std::vector<std::string> ablations;
  bool fused = false;
};

struct InitArgs {
  std::string variant;
  std::uint64_t seed = 0;
  std::string out;
  int input_size = 224;
};

struct FuseArgs {
  std::string weights, out;
  bool json = false;
};

struct InferArgs {
  std::string weights, image, labels;
  int topk = 5;
};

struct GradArgs {
  std::string block = "all";
  std::uint64_t seed = 0;
  int seeds = 1;
  bool float64 = false;
  bool inject_fault = false;
};

void cmd_summary(const SummaryArgs& a, std::ostream& out) {
  ModelSpec spec = build_variant(a.variant, a.input_size, a.input_size);
  for (const auto& name : a.ablations) spec = build_ablation(spec, parse_ablation(name));
  const auto rows = cost_breakdown(spec, a.input_size, a.input_size, a.fused);

  out << spec.label() << (a.fused ? " (fused)" : "") << "  input " << a.input_size << "x" << a.input_size << "\n";
  out << printf_string("  widths %d/%d/%d/%d  depths %d/%d/%d/%d  activation %s\n", spec.stages[0].channels,
                       spec.stages[1].channels, spec.stages[2].channels, spec.stages[3].channels,
                       static_cast<int>(spec.stages[0].blocks.size()), static_cast<int>(spec.stages[1].blocks.size()),
                       static_cast<int>(spec.stages[2].blocks.size()), static_cast<int>(spec.stages[3].blocks.size()),
                       std::string(to_string(spec.config.activation)).c_str());
  out << printf_string("  %-8s %14s %16s\n", "layer", "params", "flops (MAC)");
  for (const auto& r : rows) {
    out << printf_string("  %-8s %14lld %16lld\n", r.name.c_str(), static_cast<long long>(r.params),
                         static_cast<long long>(r.flops));
  }
  const std::int64_t params = count_params(spec);
  const std::int64_t flops = count_flops(spec, a.input_size, a.input_size, a.fused);
  out << printf_string("  params %.3f M (%lld)\n", params / 1e6, static_cast<long long>(params));
  out << printf_string("  flops  %.3f G (%lld)\n", flops / 1e9, static_cast<long long>(flops));
}

void cmd_init(const InitArgs& a, std::ostream& out) {
  const ModelSpec spec = build_variant(a.variant, a.input_size, a.input_size);
  const ParamStore store = init_params(spec, a.seed);
  save_weights(store, a.out);
  out << "wrote " << a.out << ": " << spec.label() << ", " << store.tensor_count() << " tensors, "
      << store.param_count() << " parameters\n";
}

void cmd_fuse(const FuseArgs& a, std::ostream& out) {
  const ParamStore store = load_weights(a.weights);
  const ModelSpec spec = infer_spec(store);
  const FusionResult result = fuse_model(store, spec);
  save_weights(result.store, a.out);
  const FusionReport& r = result.report;
  if (a.json) {
    out << to_json(r) << "\n";
    return;
  }
  std::size_t folds = 0;
  for (const auto& w : r.rewrites) folds += w.kind == "fold_bn";
  out << "fused " << spec.label() << " -> " << a.out << "\n";
  out << printf_string("  rewrites          %zu (fold_bn %zu, merge_patsp %zu)\n", r.rewrites.size(), folds,
                       r.rewrites.size() - folds);
  out << printf_string("  tensors_removed   %zu\n", r.tensors_removed);
  out << printf_string("  worst_deviation   %.3e\n", r.worst_deviation());
}

void cmd_infer(const InferArgs& a, std::ostream& out) {
  const ParamStore store = load_weights(a.weights);
  const ModelSpec spec = infer_spec(store);
  if (spec.input_h != spec.input_w) throw std::runtime_error("infer needs a model built for a square input");
  std::vector<std::string> labels;
  if (!a.labels.empty()) {
    labels = load_labels(a.labels);
    if (static_cast<int>(labels.size()) < spec.config.num_classes) {
      throw std::runtime_error("labels file has " + std::to_string(labels.size()) + " lines, the model has " +
                               std::to_string(spec.config.num_classes) + " classes");
    }
  }
  const Tensor4 x = preprocess(load_ppm(a.image), spec.input_h);
  const Matrix logits = PatNet::compile(spec, store).forward(x);

  const std::size_t finite = static_cast<std::size_t>(
      std::count_if(logits.data.begin(), logits.data.end(), [](float v) { return std::isfinite(v); }));
  out << "logits " << logits.cols << " (" << finite << " finite)\n";

  Matrix probs = logits;
  softmax_rows_inplace(probs);
  std::vector<int> order(logits.cols);
  std::iota(order.begin(), order.end(), 0);
  const int k = std::min(a.topk, logits.cols);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int i, int j) {
    return logits(0, i) > logits(0, j) || (logits(0, i) == logits(0, j) && i < j);
  });
  for (int r = 0; r < k; ++r) {
    const int id = order[r];
    const std::string name = labels.empty() ? "class_" + std::to_string(id) : labels[id];
    out << printf_string("%2d  %4d  %10.5f  %.5f  %s\n", r + 1, id, logits(0, id), probs(0, id), name.c_str());
  }
}

bool cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  std::vector<BlockKind> kinds;
  if (a.block == "all") {
    kinds = {BlockKind::pat_ch, BlockKind::pat_sp, BlockKind::pat_sf};
  } else {
    kinds = {parse_block_kind(a.block)};
  }
  GradCheckOptions options;
  options.float64 = a.float64;
  options.inject_fault = a.inject_fault;
  bool all_pass = true;
  for (BlockKind kind : kinds) {
    for (int i = 0; i < a.seeds; ++i) {
      const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(i);
      const GradReport r = gradcheck_block(kind, seed, default_probe_sizes(kind), options);
      all_pass = all_pass && r.pass;
      out << printf_string("%-7s seed %-4llu %s  h=%.0e  tol=%.0e  worst %.3e  %s%s\n",
                           std::string(to_string(kind)).c_str(), static_cast<unsigned long long>(seed),
                           r.float64 ? "float64" : "float32", r.step, r.tolerance, r.worst(),
                           r.pass ? "PASS" : "FAIL", r.fault_injected ? "  (fault injected)" : "");
      for (const auto& e : r.entries) {
        out << printf_string("    %-14s %6zu  %.3e\n", e.name.c_str(), e.size, e.max_rel_error);
      }
    }
  }
  return all_pass;
}

void print_bench(const BenchReport& r, std::ostream& out) {
  out << printf_string("%-16s %s\n", "variant", r.variant.c_str());
  out << printf_string("%-16s %d\n", "batch_size", r.batch_size);
  out << printf_string("%-16s %d\n", "warmup_iters", r.warmup_iters);
  out << printf_string("%-16s %d\n", "measured_iters", r.measured_iters);
  out << printf_string("%-16s %d\n", "threads", r.threads);
  out << printf_string("%-16s %.2f\n", "images_per_sec", r.images_per_sec);
  out << printf_string("%-16s %.3f\n", "mean_latency_ms", r.mean_latency_ms);
  out << printf_string("%-16s %.3f\n", "p50_latency_ms", r.p50_latency_ms);
  out << printf_string("%-16s %.3f\n", "p95_latency_ms", r.p95_latency_ms);
}

}  // namespace

std::string to_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["variant"] = r.variant;
  j["batch_size"] = r.batch_size;
  j["warmup_iters"] = r.warmup_iters;
  j["measured_iters"] = r.measured_iters;
  j["images_per_sec"] = r.images_per_sec;
  j["mean_latency_ms"] = r.mean_latency_ms;
  j["p50_latency_ms"] = r.p50_latency_ms;
  j["p95_latency_ms"] = r.p95_latency_ms;
  j["threads"] = r.threads;
  return j.dump();
}

std::string to_json(const FusionReport& r) {
  nlohmann::ordered_json j;
  j["rewrites"] = nlohmann::ordered_json::array();
  for (const auto& w : r.rewrites) {
    j["rewrites"].push_back({{"name", w.name}, {"kind", w.kind}, {"max_abs_deviation", w.max_abs_deviation}});
  }
  j["tensors_removed"] = r.tensors_removed;
  j["worst_deviation"] = r.worst_deviation();
  return j.dump();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PATNet inference engine: model summary, weights, fusion, gradient checks and benchmarks", "patnet"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  const auto variant_check = CLI::IsMember(variant_names());

  SummaryArgs summary;
  auto* s = app.add_subcommand("summary", "Print the parameter and FLOP table of a variant");
  s->add_option("--variant", summary.variant, "Model variant")->required()->check(variant_check);
  s->add_option("--input-size", summary.input_size, "Square input extent (multiple of 32)")
      ->check(CLI::PositiveNumber);
  s->add_option("--ablation", summary.ablations, "Apply an ablation substitution (repeatable)")
      ->check(CLI::IsMember(ablation_names()));
  s->add_flag("--fused", summary.fused, "Count the BN-folded, gate-merged form");

  InitArgs init;
  auto* i = app.add_subcommand("init", "Write seeded random weights for a variant");
  i->add_option("--variant", init.variant, "Model variant")->required()->check(variant_check);
  i->add_option("--seed", init.seed, "Initialization seed")->required();
  i->add_option("--out", init.out, "Output weight file")->required();
  i->add_option("--input-size", init.input_size, "Square input extent (multiple of 32)")->check(CLI::PositiveNumber);

  FuseArgs fuse;
  auto* f = app.add_subcommand("fuse", "Fold batch norms and merge spatial gates");
  f->add_option("--weights", fuse.weights, "Input weight file")->required();
  f->add_option("--out", fuse.out, "Output weight file")->required();
  f->add_flag("--json", fuse.json, "Print the fusion report as JSON");

  InferArgs infer;
  auto* n = app.add_subcommand("infer", "Classify a PPM image");
  n->add_option("--weights", infer.weights, "Weight file")->required();
  n->add_option("--image", infer.image, "Binary PPM (P6) image")->required();
  n->add_option("--labels", infer.labels, "Class names, one per line");
  n->add_option("--topk", infer.topk, "Number of classes to print")->check(CLI::PositiveNumber);

  GradArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Compare analytic and finite-difference block gradients");
  g->add_option("--block", grad.block, "Block to check")->check(CLI::IsMember({"all", "pat_ch", "pat_sp", "pat_sf"}));
  g->add_option("--seed", grad.seed, "First probe seed");
  g->add_option("--seeds", grad.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  g->add_flag("--float64", grad.float64, "Run the analytic path in double precision");
  g->add_flag("--inject-fault", grad.inject_fault, "Corrupt one analytic entry (self-test; expected to fail)");

  BenchOptions bench;
  bool bench_json = false;
  auto* b = app.add_subcommand("bench", "Measure forward throughput and latency");
  b->add_option("--variant", bench.variant, "Model variant")->required()->check(variant_check);
  b->add_option("--batch", bench.batch_size, "Batch size")->required()->check(CLI::PositiveNumber);
  b->add_option("--iters", bench.iters, "Measured iterations")->required()->check(CLI::PositiveNumber);
  b->add_option("--warmup", bench.warmup, "Discarded warmup iterations")->required()->check(CLI::NonNegativeNumber);
  b->add_option("--threads", bench.threads, "Concurrent workers")->check(CLI::PositiveNumber);
  b->add_option("--input-size", bench.input_size, "Square input extent (multiple of 32)")->check(CLI::PositiveNumber);
  b->add_option("--seed", bench.seed, "Weight and input seed");
  b->add_flag("--fused", bench.fused, "Benchmark the fused model");
  b->add_flag("--json", bench_json, "Print the report as JSON");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) {
      cmd_summary(summary, out);
    } else if (*i) {
      cmd_init(init, out);
    } else if (*f) {
      cmd_fuse(fuse, out);
    } else if (*n) {
      cmd_infer(infer, out);
    } else if (*g) {
      return cmd_gradcheck(grad, out) ? kExitOk : kExitRuntime;
    } else if (*b) {
      const BenchReport r = bench_run(bench);
      if (bench_json) {
        out << to_json(r) << "\n";
      } else {
        print_bench(r, out);
      }
    }
  } catch (const std::exception& e) {
    err << "patnet: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace patnet::cli
