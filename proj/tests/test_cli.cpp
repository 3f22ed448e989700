#include <doctest.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "patnet/image.hpp"
#include "patnet/weights.hpp"
#include "support/tempdir.hpp"

using namespace patnet;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::int64_t parse_total(const std::string& text, const std::string& key) {
  std::smatch m;
  const std::regex re(key + R"(\s+[0-9.]+ [MG] \((\d+)\))");
  REQUIRE(std::regex_search(text, m, re));
  return std::stoll(m[1]);
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_image(const std::filesystem::path& p, int h, int w) {
  Tensor4 img(1, 3, h, w);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = float((i * 37) % 256) / 255.0f;
  save_ppm(img, p);
}

}  // namespace

TEST_SUITE("cli-io") {

TEST_CASE("summary reports the counters exactly") {
  for (const std::string v : {"T0", "T2", "M"}) {
    const Run r = run({"summary", "--variant", v});
    REQUIRE(r.code == 0);
    const ModelSpec spec = build_variant(v);
    CHECK(parse_total(r.out, "params") == count_params(spec));
    CHECK(parse_total(r.out, "flops") == count_flops(spec, 224, 224));
  }
  const Run t0 = run({"summary", "--variant", "T0"});
  CHECK(parse_total(t0.out, "params") / 1e6 == doctest::Approx(4.3).epsilon(0.05));

  const Run small = run({"summary", "--variant", "T0", "--input-size", "448"});
  CHECK(parse_total(small.out, "flops") == count_flops(build_variant("T0", 448, 448), 448, 448));

  const Run abl = run({"summary", "--variant", "T2", "--ablation", "conv_dense"});
  CHECK(parse_total(abl.out, "flops") ==
        count_flops(build_ablation(build_variant("T2"), Ablation::conv_dense), 224, 224));
}

TEST_CASE("usage errors exit 2 with text on stderr") {
  for (const std::vector<std::string>& args : std::vector<std::vector<std::string>>{
           {}, {"nope"}, {"summary"}, {"summary", "--variant", "XL"}, {"summary", "--variant", "T0", "--bogus"},
           {"gradcheck", "--block", "pat_zz"}, {"bench", "--variant", "T0"}}) {
    const Run r = run(args);
    CHECK(r.code == 2);
    CHECK_FALSE(r.err.empty());
    CHECK(r.out.empty());
  }
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit 1") {
  TempDir dir;
  const Run missing = run({"fuse", "--weights", (dir.path() / "none.patw").string(), "--out",
                           (dir.path() / "o.patw").string()});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("none.patw") != std::string::npos);

  {
    std::ofstream junk(dir.path() / "junk.patw", std::ios::binary);
    junk << "JUNKJUNKJUNKJUNKJUNK";
  }
  CHECK(run({"fuse", "--weights", (dir.path() / "junk.patw").string(), "--out", (dir.path() / "o.patw").string()})
            .code == 1);
  CHECK(run({"summary", "--variant", "T0", "--input-size", "200"}).code == 1);
}

TEST_CASE("init, fuse and infer") {
  TempDir dir;
  const auto w = (dir.path() / "t0.patw").string();
  const auto w2 = (dir.path() / "t0b.patw").string();
  const auto f = (dir.path() / "t0f.patw").string();
  REQUIRE(run({"init", "--variant", "T0", "--seed", "7", "--out", w}).code == 0);
  REQUIRE(run({"init", "--variant", "T0", "--seed", "7", "--out", w2}).code == 0);
  CHECK(file_bytes(w) == file_bytes(w2));
  CHECK(load_weights(w) == init_params(build_variant("T0"), 7));

  const Run fused = run({"fuse", "--weights", w, "--out", f, "--json"});
  REQUIRE(fused.code == 0);
  const auto report = nlohmann::json::parse(fused.out);
  CHECK(report.contains("rewrites"));
  CHECK(report["tensors_removed"].get<int>() > 0);
  CHECK(report["worst_deviation"].get<double>() <= 1e-4);
  CHECK(report["rewrites"][0].contains("max_abs_deviation"));
  CHECK(load_weights(f).fused);

  const auto img = (dir.path() / "img.ppm").string();
  write_image(img, 260, 300);
  const auto labels = (dir.path() / "labels.txt").string();
  {
    std::ofstream out(labels);
    for (int i = 0; i < 1000; ++i) out << "label_" << i << "\n";
  }
  const Run a = run({"infer", "--weights", w, "--image", img, "--labels", labels, "--topk", "4"});
  REQUIRE(a.code == 0);
  CHECK(a.out.find("logits 1000 (1000 finite)") != std::string::npos);
  const std::regex line(R"(^ *\d+ +(\d+) +\S+ +\S+ +label_(\d+)$)");
  int rows = 0;
  std::istringstream lines(a.out);
  for (std::string l; std::getline(lines, l);) {
    std::smatch m;
    if (std::regex_match(l, m, line)) {
      ++rows;
      CHECK(m[1] == m[2]);
    }
  }
  CHECK(rows == 4);

  const Run b = run({"infer", "--weights", f, "--image", img, "--labels", labels, "--topk", "4"});
  REQUIRE(b.code == 0);
  CHECK(b.out.substr(0, b.out.find('\n')) == a.out.substr(0, a.out.find('\n')));
  CHECK(run({"infer", "--weights", w, "--image", img, "--labels", labels, "--topk", "4"}).out == a.out);

  {
    std::ofstream out(labels);
    out << "only\n";
  }
  CHECK(run({"infer", "--weights", w, "--image", img, "--labels", labels}).code == 1);
}

TEST_CASE("gradcheck subcommand") {
  const Run all = run({"gradcheck"});
  CHECK(all.code == 0);
  for (const char* kind : {"pat_ch", "pat_sp", "pat_sf"}) CHECK(all.out.find(kind) != std::string::npos);
  CHECK(all.out.find("FAIL") == std::string::npos);

  const Run fault = run({"gradcheck", "--block", "pat_sp", "--inject-fault"});
  CHECK(fault.code == 1);
  CHECK(fault.out.find("FAIL") != std::string::npos);
  CHECK(run({"gradcheck", "--block", "pat_sf", "--seed", "3", "--float64"}).code == 0);
}

TEST_CASE("bench report contract") {
  const Run r = run({"bench", "--variant", "T0", "--batch", "1", "--iters", "3", "--warmup", "1", "--input-size",
                     "64", "--json"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  for (const char* key : {"variant", "batch_size", "warmup_iters", "measured_iters", "images_per_sec",
                          "mean_latency_ms", "p50_latency_ms", "p95_latency_ms", "threads"}) {
    CHECK(j.contains(key));
  }
  CHECK(j.size() == 9);
  CHECK(j["variant"] == "T0");
  CHECK(j["measured_iters"] == 3);
  CHECK(j["images_per_sec"].get<double>() > 0.0);
  CHECK(j["p95_latency_ms"].get<double>() >= j["p50_latency_ms"].get<double>());
  CHECK(j["p50_latency_ms"].get<double>() >= 0.0);

  const Run text = run({"bench", "--variant", "T0", "--batch", "2", "--iters", "2", "--warmup", "0", "--threads",
                        "2", "--input-size", "64"});
  REQUIRE(text.code == 0);
  CHECK(text.out.find("threads") != std::string::npos);
  CHECK(text.out.find("images_per_sec") != std::string::npos);
}

TEST_CASE("bench throughput orders the smallest and largest variants") {
  BenchOptions o;
  o.iters = 2;
  o.warmup = 1;
  o.input_size = 96;
  o.variant = "T0";
  const BenchReport small = bench_run(o);
  o.variant = "L";
  const BenchReport large = bench_run(o);
  CHECK(small.images_per_sec > large.images_per_sec);
  CHECK(percentile({3.0, 1.0, 2.0, 4.0}, 0.5) == 2.0);
  CHECK(percentile({3.0, 1.0, 2.0, 4.0}, 0.95) == 4.0);
}

}  // TEST_SUITE
