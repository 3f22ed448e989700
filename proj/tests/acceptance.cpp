// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "patnet/bench.hpp"
#include "patnet/fusion.hpp"
#include "patnet/gradcheck.hpp"
#include "patnet/image.hpp"
#include "patnet/kernels.hpp"
#include "patnet/weights.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace patnet;

namespace {

constexpr double kCountTolerance = 0.05;
constexpr double kAblationTolerance = 0.10;
constexpr double kKernelTolerance = 1e-5;
constexpr double kFusionTolerance = 1e-3;
constexpr double kArgmaxAgreement = 0.99;
constexpr double kLatencyRatio = 1.05;

struct Outcome {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

bool within(double value, double target, double tol) { return std::fabs(value - target) <= tol * target; }

int argmax_row(const Matrix& m, int r) {
  int best = 0;
  for (int c = 1; c < m.cols; ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](float v) { return std::isfinite(v); });
}

const std::vector<std::string> kVariants{"T0", "T1", "T2", "S", "M", "L"};

Outcome params_criterion() {
  const std::vector<double> target{4.3, 7.8, 12.6, 29.0, 61.3, 104.3};
  Outcome o;
  for (std::size_t i = 0; i < kVariants.size(); ++i) {
    const double m = count_params(build_variant(kVariants[i])) / 1e6;
    const std::string line = kVariants[i] + fmt(" %.3fM vs %.1fM", m, target[i]);
    within(m, target[i], kCountTolerance) ? o.note(line) : o.fail(line);
  }
  return o;
}

Outcome flops_criterion() {
  const std::vector<double> target{0.25, 0.55, 1.03, 2.71, 6.69, 11.91};
  Outcome o;
  for (std::size_t i = 0; i < kVariants.size(); ++i) {
    const double g = count_flops(build_variant(kVariants[i]), 224, 224) / 1e9;
    const std::string line = kVariants[i] + fmt(" %.4fG vs %.2fG (%+.1f%%)", g, target[i], 100.0 * (g / target[i] - 1));
    within(g, target[i], kCountTolerance) ? o.note(line) : o.fail(line);
  }
  return o;
}

Outcome conv_ablation_criterion() {
  const ModelSpec t2 = build_variant("T2");
  const double pat = count_flops(t2, 224, 224) / 1e9;
  const double dense = count_flops(build_ablation(t2, Ablation::conv_dense), 224, 224) / 1e9;
  const double dw = count_flops(build_ablation(t2, Ablation::conv_dw), 224, 224) / 1e9;
  Outcome o;
  const auto check = [&](const char* name, double v, double target) {
    const std::string line = std::string(name) + fmt(" %.4fG vs %.2fG", v, target);
    within(v, target, kAblationTolerance) ? o.note(line) : o.fail(line);
  };
  check("pat_ch", pat, 1.03);
  check("dense", dense, 2.12);
  check("dw", dw, 1.28);
  if (!(pat < dw && dw < dense)) o.fail("ordering pat < dw < dense violated");
  return o;
}

Outcome kernel_criterion() {
  oracle::Rng rng(400);
  Outcome o;
  double worst_conv = 0, worst_bn = 0, worst_sm = 0, worst_mm = 0;
  for (int t = 0; t < 100; ++t) {
    const int groups = rng.integer(0, 2) == 0 ? rng.integer(1, 3) : 1;
    const int in = groups * rng.integer(1, 4), out = groups * rng.integer(1, 4);
    const int k = rng.integer(1, 3), stride = rng.integer(1, 2), pad = rng.integer(0, k / 2);
    const int h = rng.integer(k, 9), w = rng.integer(k, 9);
    const ConvParams p = rng.conv(out, in, k, stride, pad, groups, t % 2 == 0);
    const Tensor4 x = rng.tensor(rng.integer(1, 2), in, h, w);
    int oh = 0, ow = 0;
    worst_conv = std::max(worst_conv, oracle::max_abs_diff(oracle::conv2d(x, p, oh, ow), conv2d(x, p)));

    const int c = rng.integer(1, 8);
    const Tensor4 xb = rng.tensor(rng.integer(1, 2), c, rng.integer(1, 6), rng.integer(1, 6));
    const BnParams bn = rng.bn(c);
    worst_bn = std::max(worst_bn, oracle::max_abs_diff(oracle::batch_norm(xb, bn), batch_norm_infer(xb, bn)));

    const Matrix logits = rng.matrix(rng.integer(1, 8), rng.integer(1, 12), 3.0f);
    const auto ref = oracle::softmax_rows(logits);
    const Matrix got = softmax_rows(logits);
    for (std::size_t i = 0; i < ref.size(); ++i)
      worst_sm = std::max(worst_sm, double(std::fabs(ref[i] - (long double)got.data[i])));

    const int m = rng.integer(1, 9), kk = rng.integer(1, 9), n = rng.integer(1, 9);
    const Matrix a = rng.matrix(m, kk), b = rng.matrix(kk, n);
    const auto mm = oracle::matmul(a, b);
    const Matrix mg = matmul(a, b);
    for (std::size_t i = 0; i < mm.size(); ++i) worst_mm = std::max(worst_mm, std::fabs(mm[i] - mg.data[i]));
  }
  const std::string line =
      fmt("conv %.2e bn %.2e softmax %.2e", worst_conv, worst_bn, worst_sm) + fmt(" matmul %.2e", worst_mm);
  std::max({worst_conv, worst_bn, worst_sm, worst_mm}) <= kKernelTolerance ? o.note(line) : o.fail(line);
  return o;
}

PatChParams random_ch(oracle::Rng& rng, const PartialSplit& s) {
  PatChParams p;
  p.conv3 = rng.conv(s.c_p, s.c_p, 3, 1, 1, 1, false);
  p.se_fc1 = rng.linear(8, 2 * s.c_u(), 0.5f);
  p.se_fc2 = rng.linear(s.c_u(), 8, 0.5f);
  return p;
}

PatSfParams random_sf(oracle::Rng& rng, const PartialSplit& s, int h, int w) {
  PatSfParams p;
  p.conv3 = rng.conv(s.c_p, s.c_p, 3, 1, 1, 1, false);
  const int cu = s.c_u();
  p.wq = rng.linear(cu, cu, 0.4f);
  p.wk = rng.linear(cu, cu, 0.4f);
  p.wv = rng.linear(cu, cu, 0.4f);
  p.wo = rng.linear(cu, cu, 0.4f);
  p.heads = 2;
  p.extent_h = h;
  p.extent_w = w;
  p.rpe.resize(p.rpe_size());
  for (float& v : p.rpe) v = rng.normal(0.5f);
  return p;
}

Outcome branch_criterion() {
  oracle::Rng rng(500);
  Outcome o;
  int ok = 0;
  for (int t = 0; t < 20; ++t) {
    const int c = 8 * rng.integer(1, 3), h = rng.integer(2, 6), w = rng.integer(2, 6);
    const PartialSplit s = PartialSplit::from_ratio(c, 1, 4);
    const Tensor4 x = rng.tensor(rng.integer(1, 2), c, h, w);
    Tensor4 y = x;
    for (int n = 0; n < y.n(); ++n)
      for (int ch = s.c_p; ch < c; ++ch)
        for (std::size_t i = 0; i < y.plane(); ++i) y.channel(n, ch)[i] += rng.normal();

    const auto same = [&](const Tensor4& a, const Tensor4& b) {
      for (int n = 0; n < a.n(); ++n)
        for (int ch = 0; ch < s.c_p; ++ch)
          if (!std::equal(a.channel(n, ch), a.channel(n, ch) + a.plane(), b.channel(n, ch))) return false;
      return true;
    };
    const PatChParams ch = random_ch(rng, s);
    const PatSfParams sf = random_sf(rng, s, h, w);
    ok += same(pat_ch_forward(x, ch, s), pat_ch_forward(y, ch, s)) &&
          same(pat_sf_forward(x, sf, s), pat_sf_forward(y, sf, s));
  }
  const std::string line = fmt("%.0f/20 probes bitwise unchanged", ok);
  ok == 20 ? o.note(line) : o.fail(line);
  return o;
}

Outcome fusion_criterion() {
  const ModelSpec spec = build_variant("T0");
  const ParamStore store = init_params(spec, 11);
  const PatNet a = PatNet::compile(spec, store);
  const PatNet b = PatNet::compile(spec, fuse_model(store, spec).store);
  oracle::Rng rng(600);
  Outcome o;
  double worst = 0;
  for (int i = 0; i < 10; ++i) {
    const Tensor4 x = rng.tensor(1, 3, 224, 224);
    worst = std::max(worst, oracle::max_abs_diff(a.forward(x), b.forward(x)));
  }
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor4 x = rng.tensor(1, 3, 224, 224);
    agree += argmax_row(a.forward(x), 0) == argmax_row(b.forward(x), 0);
  }
  const std::string line = fmt("max logit diff %.2e, argmax agreement %.0f/100", worst, agree);
  worst <= kFusionTolerance && agree >= kArgmaxAgreement * 100 ? o.note(line) : o.fail(line);
  return o;
}

Outcome gradcheck_criterion() {
  Outcome o;
  double worst = 0;
  for (BlockKind kind : {BlockKind::pat_ch, BlockKind::pat_sp, BlockKind::pat_sf}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const GradReport r = gradcheck_block(kind, seed, default_probe_sizes(kind));
      worst = std::max(worst, r.worst());
      if (!r.pass) o.fail(std::string(to_string(kind)) + fmt(" seed %.0f worst %.2e", double(seed), r.worst()));
    }
    GradCheckOptions faulty;
    faulty.inject_fault = true;
    if (gradcheck_block(kind, 0, default_probe_sizes(kind), faulty).pass)
      o.fail(std::string(to_string(kind)) + " injected fault not detected");
  }
  o.note(fmt("worst rel err %.2e over 15 checks; faults detected", worst));
  return o;
}

Outcome determinism_criterion() {
  TempDir dir;
  Outcome o;
  const ModelSpec spec = build_variant("T0");
  const ParamStore a = init_params(spec, 21), b = init_params(spec, 21);
  if (!(a == b)) o.fail("init differs for identical seeds");
  if (init_params(spec, 22) == a) o.fail("different seeds give identical init");

  oracle::Rng rng(700);
  const Tensor4 x = rng.tensor(1, 3, 224, 224);
  const PatNet net = PatNet::compile(spec, a);
  if (!(net.forward(x).data == net.forward(x).data)) o.fail("forward not bitwise repeatable");

  const auto p1 = dir.path() / "a.patw", p2 = dir.path() / "b.patw";
  save_weights(a, p1);
  save_weights(b, p2);
  const auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
  };
  std::vector<char> raw = bytes(p1);
  if (raw != bytes(p2)) o.fail("weight files differ for identical seeds");
  if (!(load_weights(p1, spec) == a)) o.fail("round trip not bitwise lossless");

  raw[raw.size() / 2] ^= 0x01;
  {
    std::ofstream out(p2, std::ios::binary);
    out.write(raw.data(), std::streamsize(raw.size()));
  }
  try {
    (void)load_weights(p2, spec);
    o.fail("corrupted file accepted");
  } catch (const WeightFileError& e) {
    if (e.kind() != WeightFileError::Kind::crc_mismatch) o.fail("corruption reported as " + std::string(to_string(e.kind())));
  }
  o.note(fmt("init/forward/file bitwise stable, %.0f-byte file, flipped bit rejected", double(raw.size())));
  return o;
}

Outcome sanity_criterion() {
  TempDir dir;
  Outcome o;
  const auto w = (dir.path() / "t0.patw").string(), img = (dir.path() / "img.ppm").string();
  save_weights(init_params(build_variant("T0"), 5), w);
  Tensor4 pic(1, 3, 256, 320);
  oracle::Rng rng(800);
  for (float& v : pic.values()) v = rng.uniform(0.0f, 1.0f);
  save_ppm(pic, img);

  std::ostringstream out, err;
  const int code = cli::run({"infer", "--weights", w, "--image", img}, out, err);
  if (code != 0 || out.str().find("logits 1000 (1000 finite)") == std::string::npos)
    o.fail("infer exit " + std::to_string(code) + ": " + err.str());
  else
    o.note("infer: 1000 finite logits");

  std::string bad;
  for (const auto& v : kVariants) {
    const ModelSpec spec = build_variant(v);
    const Matrix logits = PatNet::compile(spec, init_params(spec, 1)).forward(rng.tensor(1, 3, 224, 224));
    if (logits.cols != 1000 || !all_finite(logits)) bad += " " + v;
  }
  bad.empty() ? o.note("six variants finite at 224") : o.fail("non-finite logits:" + bad);
  return o;
}

Outcome latency_check() {
  const ModelSpec spec = build_variant("T0");
  const ParamStore store = init_params(spec, 3);
  const PatNet a = PatNet::compile(spec, store);
  const PatNet b = PatNet::compile(spec, fuse_model(store, spec).store);
  oracle::Rng rng(900);
  const Tensor4 x = rng.tensor(1, 3, 224, 224);
  (void)a.forward(x);
  (void)b.forward(x);
  std::vector<double> ta, tb;
  const auto time = [&](const PatNet& net) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)net.forward(x);
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  for (int i = 0; i < 5; ++i) {
    ta.push_back(time(a));
    tb.push_back(time(b));
  }
  const double ma = percentile(ta, 0.5), mb = percentile(tb, 0.5);
  Outcome o;
  const std::string line = fmt("median fused %.1f ms vs unfused %.1f ms (ratio %.3f)", mb, ma, mb / ma);
  mb <= kLatencyRatio * ma ? o.note(line) : o.fail(line);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 parameter counts", params_criterion},
      {"2 FLOPs at 224", flops_criterion},
      {"3 conv-type ablation", conv_ablation_criterion},
      {"4 kernel oracles", kernel_criterion},
      {"5 branch independence", branch_criterion},
      {"6 fusion equivalence", fusion_criterion},
      {"7 gradient checks", gradcheck_criterion},
      {"8 determinism and I/O", determinism_criterion},
      {"9 end-to-end sanity", sanity_criterion},
      {"- fused T0 latency", latency_check},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %-24s %6.1fs  %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), s, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::printf("%d of %zu failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
