#include "patnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace patnet {

namespace {

constexpr int kGemmColumnBlock = 512;
constexpr int kGemmRowBlock = 4;

// Y(MxP) += W(MxK) * X(KxP); all row-major and densely packed.
void gemm_accumulate(const float* w, const float* x, float* y, int m, int k, int p) {
  for (int p0 = 0; p0 < p; p0 += kGemmColumnBlock) {
    const int pn = std::min(kGemmColumnBlock, p - p0);
    int r = 0;
    for (; r + kGemmRowBlock <= m; r += kGemmRowBlock) {
      float* y0 = y + static_cast<std::size_t>(r) * p + p0;
      float* y1 = y0 + p;
      float* y2 = y1 + p;
      float* y3 = y2 + p;
      const float* w0 = w + static_cast<std::size_t>(r) * k;
      const float* w1 = w0 + k;
      const float* w2 = w1 + k;
      const float* w3 = w2 + k;
      for (int i = 0; i < k; ++i) {
        const float* xi = x + static_cast<std::size_t>(i) * p + p0;
        const float a0 = w0[i], a1 = w1[i], a2 = w2[i], a3 = w3[i];
        for (int j = 0; j < pn; ++j) {
          const float v = xi[j];
          y0[j] += a0 * v;
          y1[j] += a1 * v;
          y2[j] += a2 * v;
          y3[j] += a3 * v;
        }
      }
    }
    for (; r < m; ++r) {
      float* yr = y + static_cast<std::size_t>(r) * p + p0;
      const float* wr = w + static_cast<std::size_t>(r) * k;
      for (int i = 0; i < k; ++i) {
        const float* xi = x + static_cast<std::size_t>(i) * p + p0;
        const float a = wr[i];
        for (int j = 0; j < pn; ++j) yr[j] += a * xi[j];
      }
    }
  }
}

void init_with_bias(Tensor4& y, const ConvParams& p) {
  if (!p.bias) return;
  const std::size_t plane = y.plane();
  for (int n = 0; n < y.n(); ++n) {
    for (int c = 0; c < y.c(); ++c) {
      std::fill_n(y.channel(n, c), plane, (*p.bias)[c]);
    }
  }
}

// Kernel == stride, no padding, one group: rearrange each window into a column
// and run a single GEMM.
void conv_patchify(const Tensor4& x, const ConvParams& p, Tensor4& y) {
  const int k = p.kernel();
  const int oh = y.h(), ow = y.w();
  const int rows = x.c() * k * k;
  const int cols = oh * ow;
  std::vector<float> col(static_cast<std::size_t>(rows) * cols);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          float* dst = col.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
          for (int oy = 0; oy < oh; ++oy) {
            const float* srow = src + static_cast<std::size_t>(oy * k + ky) * x.w() + kx;
            for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = srow[ox * k];
          }
        }
      }
    }
    gemm_accumulate(p.weight.data(), col.data(), y.channel(n, 0), y.c(), rows, cols);
  }
}

void conv_direct(const Tensor4& x, const ConvParams& p, Tensor4& y) {
  const int k = p.kernel();
  const int s = p.stride;
  const int pad = p.padding;
  const int in_per_group = p.weight.c();
  const int out_per_group = p.out_channels() / p.groups;
  const int ih = x.h(), iw = x.w();
  const int oh = y.h(), ow = y.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int oc = 0; oc < y.c(); ++oc) {
      const int g = oc / out_per_group;
      float* out = y.channel(n, oc);
      for (int icg = 0; icg < in_per_group; ++icg) {
        const float* in = x.channel(n, g * in_per_group + icg);
        const float* wk = p.weight.channel(oc, icg);
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const float wv = wk[ky * k + kx];
            // ox range whose input column lands inside [0, iw).
            int ox_lo = 0;
            while (ox_lo < ow && ox_lo * s + kx - pad < 0) ++ox_lo;
            int ox_hi = ow - 1;
            while (ox_hi >= ox_lo && ox_hi * s + kx - pad >= iw) --ox_hi;
            if (ox_lo > ox_hi) continue;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s + ky - pad;
              if (iy < 0 || iy >= ih) continue;
              float* orow = out + static_cast<std::size_t>(oy) * ow;
              const float* irow = in + static_cast<std::size_t>(iy) * iw + kx - pad;
              if (s == 1) {
                for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox];
              } else {
                for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox * s];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor4 conv2d(const Tensor4& x, const ConvParams& p) {
  p.validate();
  if (x.c() != p.in_channels()) {
    throw ShapeError("conv2d: input channel dimension c=" + std::to_string(x.c()) +
                     " does not match weight in_ch=" + std::to_string(p.in_channels()));
  }
  const int k = p.kernel();
  const int padded_h = x.h() + 2 * p.padding;
  const int padded_w = x.w() + 2 * p.padding;
  if (padded_h < k) {
    throw ShapeError("conv2d: padded height " + std::to_string(padded_h) + " is smaller than kernel " +
                     std::to_string(k));
  }
  if (padded_w < k) {
    throw ShapeError("conv2d: padded width " + std::to_string(padded_w) + " is smaller than kernel " +
                     std::to_string(k));
  }
  const int oh = (padded_h - k) / p.stride + 1;
  const int ow = (padded_w - k) / p.stride + 1;
  Tensor4 y(x.n(), p.out_channels(), oh, ow);
  init_with_bias(y, p);

  if (p.groups == 1 && p.padding == 0 && k == p.stride) {
    if (k == 1) {
      for (int n = 0; n < x.n(); ++n) {
        gemm_accumulate(p.weight.data(), x.channel(n, 0), y.channel(n, 0), y.c(), x.c(),
                        static_cast<int>(x.plane()));
      }
    } else {
      conv_patchify(x, p, y);
    }
  } else {
    conv_direct(x, p, y);
  }
  return y;
}

Tensor4 batch_norm_infer(const Tensor4& x, const BnParams& p) {
  p.validate();
  if (x.c() != p.channels()) {
    throw ShapeError("batch_norm_infer: input channel dimension c=" + std::to_string(x.c()) +
                     " does not match parameter length " + std::to_string(p.channels()));
  }
  Tensor4 y = Tensor4::zeros_like(x);
  const std::size_t plane = x.plane();
  for (int c = 0; c < x.c(); ++c) {
    const float scale = p.gamma[c] / std::sqrt(p.running_var[c] + p.eps);
    const float mean = p.running_mean[c];
    const float beta = p.beta[c];
    for (int n = 0; n < x.n(); ++n) {
      const float* src = x.channel(n, c);
      float* dst = y.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) * scale + beta;
    }
  }
  return y;
}

float activate(float x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0f ? x : 0.0f;
    case Activation::gelu:
      return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
    case Activation::hard_sigmoid:
      return std::clamp((x + 3.0f) / 6.0f, 0.0f, 1.0f);
  }
  return x;
}

void activation_inplace(Tensor4& x, Activation kind) {
  for (float& v : x.values()) v = activate(v, kind);
}

Tensor4 activation(const Tensor4& x, Activation kind) {
  Tensor4 y = x;
  activation_inplace(y, kind);
  return y;
}

Tensor4 global_avg_pool(const Tensor4& x) {
  Tensor4 y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  const float inv = 1.0f / static_cast<float>(plane);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c);
      float sum = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      y.at(n, c, 0, 0) = sum * inv;
    }
  }
  return y;
}

std::pair<Tensor4, Tensor4> channel_stats(const Tensor4& x) {
  Tensor4 mean(x.n(), x.c(), 1, 1);
  Tensor4 stddev(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  const float inv = 1.0f / static_cast<float>(plane);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.channel(n, c);
      float sum = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      const float mu = sum * inv;
      float sq = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) {
        const float d = src[i] - mu;
        sq += d * d;
      }
      mean.at(n, c, 0, 0) = mu;
      stddev.at(n, c, 0, 0) = std::sqrt(sq * inv + kChannelStatEps);
    }
  }
  return {std::move(mean), std::move(stddev)};
}

void softmax_rows_inplace(Matrix& m) {
  if (m.cols == 0) return;
  for (int r = 0; r < m.rows; ++r) {
    float* row = m.row(r);
    float mx = row[0];
    for (int c = 1; c < m.cols; ++c) mx = std::max(mx, row[c]);
    float sum = 0.0f;
    for (int c = 0; c < m.cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const float inv = 1.0f / sum;
    for (int c = 0; c < m.cols; ++c) row[c] *= inv;
  }
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  softmax_rows_inplace(out);
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions differ, a.cols=" + std::to_string(a.cols) +
                     " b.rows=" + std::to_string(b.rows));
  }
  Matrix out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    float* orow = out.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const float av = a(i, k);
      const float* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_transposed: inner dimensions differ, a.cols=" + std::to_string(a.cols) +
                     " b.cols=" + std::to_string(b.cols));
  }
  Matrix out(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const float* arow = a.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const float* brow = b.row(j);
      float acc = 0.0f;
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix linear_rows(const Matrix& x, const Linear& layer) {
  if (x.cols != layer.in_features()) {
    throw ShapeError("linear: input feature dimension " + std::to_string(x.cols) +
                     " does not match layer in_features " + std::to_string(layer.in_features()));
  }
  Matrix y = matmul_transposed(x, layer.weight);
  if (!layer.bias.empty()) {
    for (int r = 0; r < y.rows; ++r) {
      float* row = y.row(r);
      for (int c = 0; c < y.cols; ++c) row[c] += layer.bias[c];
    }
  }
  return y;
}

Tensor4 channel_linear(const Tensor4& x, const Linear& layer) {
  if (x.c() != layer.in_features()) {
    throw ShapeError("channel_linear: input channel dimension c=" + std::to_string(x.c()) +
                     " does not match layer in_features " + std::to_string(layer.in_features()));
  }
  Tensor4 y(x.n(), layer.out_features(), x.h(), x.w());
  const std::size_t plane = x.plane();
  for (int n = 0; n < x.n(); ++n) {
    if (!layer.bias.empty()) {
      for (int c = 0; c < y.c(); ++c) std::fill_n(y.channel(n, c), plane, layer.bias[c]);
    }
    if (x.c() > 0) {
      gemm_accumulate(layer.weight.data.data(), x.channel(n, 0), y.channel(n, 0), y.c(), x.c(),
                      static_cast<int>(plane));
    }
  }
  return y;
}

}  // namespace patnet
