#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "patnet/fusion.hpp"
#include "patnet/image.hpp"
#include "patnet/weights.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace patnet;

namespace {

std::uint32_t bitwise_crc32(const std::vector<std::uint8_t>& bytes, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= bytes[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

std::size_t layout_size(const std::vector<std::pair<std::string, std::vector<int>>>& tensors) {
  std::size_t n = 4 + 4 + 4;
  for (const auto& [name, dims] : tensors) {
    std::size_t numel = 1;
    for (int d : dims) numel *= d;
    n += 2 + name.size() + 1 + 1 + 4 * dims.size() + 4 * numel;
  }
  return n + 4;
}

WeightFileError::Kind decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_weights(bytes);
  } catch (const WeightFileError& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return WeightFileError::Kind::io;
}

void patch_crc(std::vector<std::uint8_t>& b) {
  const std::uint32_t crc = bitwise_crc32(b, b.size() - 4);
  std::memcpy(b.data() + b.size() - 4, &crc, 4);
}

std::vector<std::uint8_t> ppm_bytes(const std::string& header, const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> b(header.begin(), header.end());
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

}  // namespace

TEST_SUITE("cli-io") {

TEST_CASE("CRC-32 matches the bitwise reference") {
  const std::string check = "123456789";
  const std::vector<std::uint8_t> b(check.begin(), check.end());
  CHECK(crc32_ieee(b.data(), b.size()) == 0xCBF43926u);
  CHECK(bitwise_crc32(b, b.size()) == 0xCBF43926u);
}

TEST_CASE("a single (2,3) tensor named a encodes to 53 bytes") {
  ParamStore s;
  s.params.emplace("a", Tensor4::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const auto bytes = encode_weights(s);
  CHECK(layout_size({{"a", {2, 3}}}) == 53);
  REQUIRE(bytes.size() == 53);

  std::vector<std::uint8_t> expect = {'P', 'A', 'T', 'W', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 'a', 0, 2, 2, 0, 0, 0, 3, 0, 0, 0};
  for (float v : {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f}) {
    std::uint8_t raw[4];
    std::memcpy(raw, &v, 4);
    expect.insert(expect.end(), raw, raw + 4);
  }
  const std::uint32_t crc = bitwise_crc32(expect, expect.size());
  for (int k = 0; k < 4; ++k) expect.push_back(static_cast<std::uint8_t>(crc >> (8 * k)));
  CHECK(bytes == expect);

  const ParamStore back = decode_weights(bytes);
  CHECK(back == s);
  CHECK(back.get("a").rank() == 2);
}

TEST_CASE("every variant's init store round-trips bitwise") {
  TempDir dir;
  for (const auto& name : variant_names()) {
    const ModelSpec spec = build_variant(name);
    const ParamStore store = init_params(spec, 17);
    const auto path = dir.path() / (name + ".patw");
    save_weights(store, path);
    const ParamStore back = load_weights(path);
    CHECK_MESSAGE(back == store, name);
    std::size_t expected = 0;
    std::vector<std::pair<std::string, std::vector<int>>> decls;
    for (const auto& d : parameter_layout(spec, false)) decls.push_back({d.name, d.dims});
    expected = layout_size(decls);
    CHECK(std::filesystem::file_size(path) == expected);
  }
}

TEST_CASE("fused stores round-trip and keep their mode") {
  TempDir dir;
  const ModelSpec spec = build_variant("T0");
  const ParamStore fused = fuse_model(init_params(spec, 2), spec).store;
  save_weights(fused, dir.path() / "f.patw");
  const ParamStore back = load_weights(dir.path() / "f.patw");
  CHECK(back.fused);
  CHECK(back == fused);
}

TEST_CASE("identical seeds give identical weight files") {
  const ModelSpec spec = build_variant("T1");
  CHECK(encode_weights(init_params(spec, 5)) == encode_weights(init_params(spec, 5)));
}

TEST_CASE("each kind of corruption has its own diagnostic") {
  ParamStore s;
  s.params.emplace("a", Tensor4::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const auto good = encode_weights(s);

  auto magic = good;
  magic[0] = 'X';
  CHECK(decode_error(magic) == WeightFileError::Kind::bad_magic);

  auto flipped = good;
  flipped[30] ^= 0x01;
  CHECK(decode_error(flipped) == WeightFileError::Kind::crc_mismatch);

  auto version = good;
  version[4] = 2;
  patch_crc(version);
  CHECK(decode_error(version) == WeightFileError::Kind::unknown_version);

  for (std::size_t len = 0; len < good.size(); ++len) {
    const std::vector<std::uint8_t> cut(good.begin(), good.begin() + len);
    CHECK(decode_error(cut) == WeightFileError::Kind::crc_mismatch);
  }

  auto count = good;
  count[8] = 2;
  patch_crc(count);
  CHECK(decode_error(count) == WeightFileError::Kind::malformed);

  auto dtype = good;
  dtype[15] = 1;
  patch_crc(dtype);
  CHECK(decode_error(dtype) == WeightFileError::Kind::malformed);
}

TEST_CASE("name-set mismatches are reported on load") {
  TempDir dir;
  const ModelSpec spec = build_variant("T0");
  ParamStore store = init_params(spec, 1);
  store.params.erase("head.fc.bias");
  save_weights(store, dir.path() / "bad.patw");
  try {
    load_weights(dir.path() / "bad.patw");
    FAIL("expected name-set mismatch");
  } catch (const WeightFileError& e) {
    CHECK(e.kind() == WeightFileError::Kind::name_set_mismatch);
    CHECK(std::string(e.what()).find("head.fc.bias") != std::string::npos);
  }
  save_weights(init_params(spec, 1), dir.path() / "t0.patw");
  CHECK_THROWS_AS(load_weights(dir.path() / "t0.patw", build_variant("T1")), WeightFileError);
  CHECK_THROWS_AS(load_weights(dir.path() / "missing.patw"), WeightFileError);
}

TEST_CASE("PPM parsing") {
  const Tensor4 red = parse_ppm(ppm_bytes("P6\n2 2\n255\n", {255, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}));
  CHECK(red.dims() == std::vector<int>{1, 3, 2, 2});
  CHECK(red.at(0, 0, 0, 0) == 1.0f);
  CHECK(red.at(0, 1, 0, 0) == 0.0f);

  const Tensor4 gray = parse_ppm(ppm_bytes("P6 # comment\n3 1\n255\n", std::vector<std::uint8_t>(9, 128)));
  for (float v : gray.values()) CHECK(v == 128.0f / 255.0f);

  CHECK_THROWS_AS(parse_ppm(ppm_bytes("P3\n1 1\n255\n", {0, 0, 0})), ImageError);
  CHECK_THROWS_AS(parse_ppm(ppm_bytes("P6\n1 1\n65535\n", {0, 0, 0, 0, 0, 0})), ImageError);
  CHECK_THROWS_AS(parse_ppm(ppm_bytes("P6\n2 2\n255\n", {0, 0, 0})), ImageError);
  CHECK_THROWS_AS(parse_ppm(ppm_bytes("P6\n", {})), ImageError);
}

TEST_CASE("PPM save and load round trip") {
  TempDir dir;
  Tensor4 img(1, 3, 3, 5);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = float(i % 256) / 255.0f;
  save_ppm(img, dir.path() / "x.ppm");
  CHECK(load_ppm(dir.path() / "x.ppm") == img);
}

TEST_CASE("bilinear resize matches a reference image library") {
  // Reference values from OpenCV INTER_LINEAR on float32 input.
  Tensor4 src(1, 1, 4, 6);
  for (int i = 0; i < 24; ++i) src.data()[i] = float(std::pow(double(i), 1.5) / 10.0);
  const Tensor4 down = resize_bilinear(src, 3, 4);
  const std::vector<double> expect_down = {0.2817128300666809, 0.5576204657554626, 0.9606878161430359,
                                           1.453235387802124,  2.9273862838745117, 3.630303382873535,
                                           4.386337757110596,  5.191872596740723,  7.213284015655518,
                                           8.165657997131348,  9.157255172729492,  10.18660831451416};
  for (std::size_t i = 0; i < expect_down.size(); ++i) CHECK(std::fabs(down.data()[i] - expect_down[i]) <= 1e-5);

  const Tensor4 up = resize_bilinear(src, 7, 9);
  CHECK(std::fabs(up.at(0, 0, 0, 0) - 0.0) <= 1e-5);
  CHECK(std::fabs(up.at(0, 0, 3, 4) - 4.002634) <= 1e-5);
  CHECK(std::fabs(up.at(0, 0, 6, 8) - 11.030413) <= 1e-5);
  CHECK(std::fabs(up.at(0, 0, 1, 7) - 1.8326833) <= 1e-5);
}

TEST_CASE("preprocess a 300x500 image") {
  CHECK(resize_shorter_side(300, 500, 249) == std::pair<int, int>{249, 415});
  Tensor4 img(1, 3, 300, 500);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 300; ++y)
      for (int x = 0; x < 500; ++x) img.at(0, c, y, x) = float((y * 7 + x * 13 + c * 50) % 256) / 255.0f;

  const Tensor4 raw = preprocess(img, 224, false);
  CHECK(raw.dims() == std::vector<int>{1, 3, 224, 224});
  const Tensor4 out = preprocess(img);
  CHECK(out.dims() == std::vector<int>{1, 3, 224, 224});

  // Crop origin (12, 95) in the 249x415 resize; values from OpenCV.
  struct Sample {
    int y, x, c;
    double raw, normalized;
  };
  const Sample samples[] = {
      {0, 0, 0, 0.2164894938468933, -1.1725350618362427},   {0, 223, 1, 0.05480746552348137, -1.791038155555725},
      {100, 57, 2, 0.38960549235343933, -0.07286442816257477}, {223, 223, 0, 0.20666193962097168, -1.2154500484466553},
      {17, 191, 1, 0.6593905091285706, 0.9079933166503906},   {223, 5, 2, 0.2597684860229492, -0.6499177813529968},
  };
  for (const auto& s : samples) {
    CHECK(std::fabs(raw.at(0, s.c, s.y, s.x) - s.raw) <= 1e-5);
    CHECK(std::fabs(out.at(0, s.c, s.y, s.x) - s.normalized) <= 1e-4);
  }
}

TEST_CASE("preprocess keeps a uniform image uniform") {
  const Tensor4 gray = Tensor4::filled(1, 3, 240, 320, 128.0f / 255.0f);
  const Tensor4 raw = preprocess(gray, 224, false);
  for (float v : raw.values()) CHECK(v == doctest::Approx(128.0 / 255.0).epsilon(1e-6));
  const Tensor4 out = preprocess(gray);
  for (int c = 0; c < 3; ++c) {
    CHECK(out.at(0, c, 100, 100) ==
          doctest::Approx((128.0 / 255.0 - kImageNetMean[c]) / kImageNetStd[c]).epsilon(1e-5));
  }
}

TEST_CASE("labels file") {
  TempDir dir;
  {
    std::ofstream f(dir.path() / "labels.txt");
    f << "tench\r\ngoldfish\n\nshark\n";
  }
  const auto labels = load_labels(dir.path() / "labels.txt");
  CHECK(labels == std::vector<std::string>{"tench", "goldfish", "", "shark"});
}

}  // TEST_SUITE
