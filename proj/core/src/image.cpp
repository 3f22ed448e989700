#include "patnet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace patnet {

namespace {

class HeaderParser {
 public:
  explicit HeaderParser(const std::vector<std::uint8_t>& b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) {
      throw ImageError(std::string("PPM header: expected ") + what);
    }
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > 1'000'000) throw ImageError(std::string("PPM header: ") + what + " is too large");
    }
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& b_;
};

}  // namespace

Tensor4 parse_ppm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ImageError("only binary PPM (P6) images are supported");
  }
  HeaderParser p(bytes);
  p.pos_ = 2;
  const long w = p.number("width");
  const long h = p.number("height");
  const long maxval = p.number("maxval");
  if (w < 1 || h < 1) throw ImageError("PPM image has zero width or height");
  if (maxval != 255) throw ImageError("PPM maxval must be 255, got " + std::to_string(maxval));
  if (p.pos_ >= bytes.size() || !std::isspace(bytes[p.pos_])) {
    throw ImageError("PPM header: missing whitespace before pixel data");
  }
  const std::size_t start = p.pos_ + 1;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  if (bytes.size() - start < plane * 3) {
    throw ImageError("PPM pixel data is truncated: expected " + std::to_string(plane * 3) + " bytes");
  }
  Tensor4 img(1, 3, static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) img.data()[c * plane + i] = bytes[start + 3 * i + c] / 255.0f;
  }
  return img;
}

Tensor4 load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image '" + path.string() + "'");
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_ppm(bytes);
}

void save_ppm(const Tensor4& image, const std::filesystem::path& path) {
  if (image.n() != 1 || image.c() != 3) throw ShapeError("save_ppm expects (1,3,H,W), got " + image.shape_string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << image.w() << " " << image.h() << "\n255\n";
  const std::size_t plane = image.plane();
  std::vector<char> px(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(image.data()[c * plane + i], 0.0f, 1.0f);
      px[3 * i + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
  }
  out.write(px.data(), static_cast<std::streamsize>(px.size()));
}

Tensor4 resize_bilinear(const Tensor4& image, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be positive");
  const int ih = image.h(), iw = image.w();
  struct Tap {
    int i0, i1;
    float f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double s = (o + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<float>(s - i0)};
    }
    return t;
  };
  const auto ty = taps(ih, out_h);
  const auto tx = taps(iw, out_w);
  Tensor4 out(image.n(), image.c(), out_h, out_w);
  for (int n = 0; n < image.n(); ++n) {
    for (int c = 0; c < image.c(); ++c) {
      const float* src = image.channel(n, c);
      float* dst = out.channel(n, c);
      for (int y = 0; y < out_h; ++y) {
        const float* r0 = src + static_cast<std::size_t>(ty[y].i0) * iw;
        const float* r1 = src + static_cast<std::size_t>(ty[y].i1) * iw;
        const float fy = ty[y].f;
        for (int x = 0; x < out_w; ++x) {
          const auto& t = tx[x];
          const float top = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * t.f;
          const float bot = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * t.f;
          dst[static_cast<std::size_t>(y) * out_w + x] = top + (bot - top) * fy;
        }
      }
    }
  }
  return out;
}

std::pair<int, int> resize_shorter_side(int h, int w, int shorter) {
  if (h <= w) return {shorter, static_cast<int>(std::lround(static_cast<double>(w) * shorter / h))};
  return {static_cast<int>(std::lround(static_cast<double>(h) * shorter / w)), shorter};
}

Tensor4 center_crop(const Tensor4& image, int size) {
  if (image.h() < size || image.w() < size) {
    throw ShapeError("center_crop: image " + image.shape_string() + " is smaller than the crop " +
                     std::to_string(size));
  }
  const int top = (image.h() - size) / 2;
  const int left = (image.w() - size) / 2;
  Tensor4 out(image.n(), image.c(), size, size);
  for (int n = 0; n < image.n(); ++n) {
    for (int c = 0; c < image.c(); ++c) {
      const float* src = image.channel(n, c);
      float* dst = out.channel(n, c);
      for (int y = 0; y < size; ++y) {
        std::copy_n(src + static_cast<std::size_t>(top + y) * image.w() + left, size,
                    dst + static_cast<std::size_t>(y) * size);
      }
    }
  }
  return out;
}

Tensor4 normalize_imagenet(const Tensor4& image) {
  if (image.c() != 3) throw ShapeError("normalize_imagenet expects 3 channels, got " + image.shape_string());
  Tensor4 out = image;
  for (int n = 0; n < out.n(); ++n) {
    for (int c = 0; c < 3; ++c) {
      float* p = out.channel(n, c);
      for (std::size_t i = 0; i < out.plane(); ++i) p[i] = (p[i] - kImageNetMean[c]) / kImageNetStd[c];
    }
  }
  return out;
}

Tensor4 preprocess(const Tensor4& image, int crop, bool normalize) {
  if (crop < 1) throw ShapeError("preprocess: crop must be positive");
  const int shorter = static_cast<int>(std::lround(crop / kTestCropRatio));
  const auto [h, w] = resize_shorter_side(image.h(), image.w(), shorter);
  Tensor4 out = center_crop(resize_bilinear(image, h, w), crop);
  return normalize ? normalize_imagenet(out) : out;
}

std::vector<std::string> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open labels file '" + path.string() + "'");
  std::vector<std::string> labels;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    labels.push_back(line);
  }
  return labels;
}

}  // namespace patnet
