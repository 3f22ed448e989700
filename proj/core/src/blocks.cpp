#include "patnet/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string>

namespace patnet {

namespace {

constexpr int kHeadDim = 32;

void check_split(const Tensor4& x, const PartialSplit& s, const char* op) {
  s.validate();
  if (x.c() != s.c_total) {
    throw ShapeError(std::string(op) + ": input channel dimension c=" + std::to_string(x.c()) +
                     " does not match split c_total=" + std::to_string(s.c_total));
  }
}

Tensor4 conv_branch(const Tensor4& x_p, const std::optional<ConvParams>& conv3) {
  if (x_p.c() == 0) return x_p;
  if (!conv3) throw ShapeError("partial block: conv branch has " + std::to_string(x_p.c()) +
                               " channels but no convolution parameters");
  return conv2d(x_p, *conv3);
}

float logistic(float z) { return 1.0f / (1.0f + std::exp(-z)); }

}  // namespace

PartialSplit PartialSplit::from_ratio(int c_total, int num, int den) {
  if (den <= 0 || num < 0 || num > den) throw ShapeError("partial ratio must lie in [0,1]");
  if ((static_cast<long long>(c_total) * num) % den != 0) {
    throw ShapeError("partial split: c_total=" + std::to_string(c_total) + " times ratio " +
                     std::to_string(num) + "/" + std::to_string(den) + " is not an integer");
  }
  PartialSplit s{c_total, static_cast<int>(static_cast<long long>(c_total) * num / den)};
  s.validate();
  return s;
}

void PartialSplit::validate() const {
  if (c_total < 0) throw ShapeError("partial split: c_total must be non-negative");
  if (c_p < 0 || c_p > c_total) {
    throw ShapeError("partial split: c_p=" + std::to_string(c_p) + " outside [0, " + std::to_string(c_total) +
                     "]");
  }
}

std::pair<Tensor4, Tensor4> channel_split(const Tensor4& x, const PartialSplit& s) {
  check_split(x, s, "channel_split");
  Tensor4 x_p(x.n(), s.c_p, x.h(), x.w());
  Tensor4 x_u(x.n(), s.c_u(), x.h(), x.w());
  const std::size_t plane = x.plane();
  for (int n = 0; n < x.n(); ++n) {
    if (s.c_p > 0) std::memcpy(x_p.channel(n, 0), x.channel(n, 0), plane * s.c_p * sizeof(float));
    if (s.c_u() > 0) std::memcpy(x_u.channel(n, 0), x.channel(n, s.c_p), plane * s.c_u() * sizeof(float));
  }
  return {std::move(x_p), std::move(x_u)};
}

Tensor4 channel_concat(const Tensor4& x_p, const Tensor4& x_u) {
  if (x_p.n() != x_u.n()) {
    throw ShapeError("channel_concat: batch dimension n differs (" + std::to_string(x_p.n()) + " vs " +
                     std::to_string(x_u.n()) + ")");
  }
  if (x_p.h() != x_u.h()) {
    throw ShapeError("channel_concat: height h differs (" + std::to_string(x_p.h()) + " vs " +
                     std::to_string(x_u.h()) + ")");
  }
  if (x_p.w() != x_u.w()) {
    throw ShapeError("channel_concat: width w differs (" + std::to_string(x_p.w()) + " vs " +
                     std::to_string(x_u.w()) + ")");
  }
  Tensor4 y(x_p.n(), x_p.c() + x_u.c(), x_p.h(), x_p.w());
  const std::size_t plane = y.plane();
  for (int n = 0; n < y.n(); ++n) {
    if (x_p.c() > 0) std::memcpy(y.channel(n, 0), x_p.channel(n, 0), plane * x_p.c() * sizeof(float));
    if (x_u.c() > 0) std::memcpy(y.channel(n, x_p.c()), x_u.channel(n, 0), plane * x_u.c() * sizeof(float));
  }
  return y;
}

int se_hidden_width(int c_u, int reduction) {
  if (reduction < 1) throw ShapeError("SE reduction must be >= 1");
  return std::max(8, c_u / reduction);
}

int default_attention_heads(int c_u) {
  if (c_u <= 0) return 1;
  if (c_u % kHeadDim == 0) return c_u / kHeadDim;
  const double target = static_cast<double>(c_u) / kHeadDim;
  int best = 1;
  for (int h = 1; h <= c_u; ++h) {
    if (c_u % h != 0) continue;
    if (std::abs(h - target) < std::abs(best - target)) best = h;
  }
  return best;
}

Matrix gaussian_se_gate(const Tensor4& x_u, const PatChParams& p) {
  const int c_u = x_u.c();
  if (p.se_fc1.in_features() != 2 * c_u) {
    throw ShapeError("gaussian_se_gate: fc1 in_features=" + std::to_string(p.se_fc1.in_features()) +
                     " does not equal 2*c_u=" + std::to_string(2 * c_u));
  }
  if (p.se_fc2.out_features() != c_u || p.se_fc2.in_features() != p.se_fc1.out_features()) {
    throw ShapeError("gaussian_se_gate: fc2 shape does not match (c_u x hidden)");
  }
  const auto [mean, stddev] = channel_stats(x_u);
  Matrix z(x_u.n(), 2 * c_u);
  for (int n = 0; n < x_u.n(); ++n) {
    for (int c = 0; c < c_u; ++c) {
      z(n, c) = mean.at(n, c, 0, 0);
      z(n, c_u + c) = stddev.at(n, c, 0, 0);
    }
  }
  Matrix hidden = linear_rows(z, p.se_fc1);
  for (float& v : hidden.data) v = v > 0.0f ? v : 0.0f;
  Matrix gate = linear_rows(hidden, p.se_fc2);
  for (float& v : gate.data) v = logistic(v);
  return gate;
}

Tensor4 pat_ch_forward(const Tensor4& x, const PatChParams& p, const PartialSplit& s) {
  check_split(x, s, "pat_ch_forward");
  auto [x_p, x_u] = channel_split(x, s);
  Tensor4 y_p = conv_branch(x_p, p.conv3);
  if (x_u.c() > 0) {
    const Matrix gate = gaussian_se_gate(x_u, p);
    const std::size_t plane = x_u.plane();
    for (int n = 0; n < x_u.n(); ++n) {
      for (int c = 0; c < x_u.c(); ++c) {
        const float g = gate(n, c);
        float* v = x_u.channel(n, c);
        for (std::size_t i = 0; i < plane; ++i) v[i] *= g;
      }
    }
  }
  return channel_concat(y_p, x_u);
}

Tensor4 apply_spatial_gate(const Tensor4& x, const Tensor4& logit, const PartialSplit& s) {
  check_split(x, s, "apply_spatial_gate");
  if (logit.c() != 1 || logit.n() != x.n() || logit.h() != x.h() || logit.w() != x.w()) {
    throw ShapeError("apply_spatial_gate: logit map " + logit.shape_string() + " must be (n,1,h,w) for input " +
                     x.shape_string());
  }
  Tensor4 y = x;
  const std::size_t plane = x.plane();
  std::vector<float> gate(plane);
  for (int n = 0; n < x.n(); ++n) {
    const float* l = logit.channel(n, 0);
    for (std::size_t i = 0; i < plane; ++i) gate[i] = activate(l[i], Activation::hard_sigmoid);
    for (int c = s.c_p; c < s.c_total; ++c) {
      float* v = y.channel(n, c);
      for (std::size_t i = 0; i < plane; ++i) v[i] *= gate[i];
    }
  }
  return y;
}

Tensor4 pat_sp_forward(const Tensor4& x, const PatSpParams& p, const PartialSplit& s) {
  check_split(x, s, "pat_sp_forward");
  if (p.map_conv.out_channels() != 1) {
    throw ShapeError("pat_sp_forward: map conv must have exactly one output channel, has " +
                     std::to_string(p.map_conv.out_channels()));
  }
  return apply_spatial_gate(x, conv2d(x, p.map_conv), s);
}

Tensor4 pat_sf_forward(const Tensor4& x, const PatSfParams& p, const PartialSplit& s) {
  check_split(x, s, "pat_sf_forward");
  if (x.h() != p.extent_h || x.w() != p.extent_w) {
    throw ShapeError("pat_sf_forward: spatial extent " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                     " does not match the relative-position table extent " + std::to_string(p.extent_h) + "x" +
                     std::to_string(p.extent_w));
  }
  if (p.rpe.size() != p.rpe_size()) {
    throw ShapeError("pat_sf_forward: relative-position table has " + std::to_string(p.rpe.size()) +
                     " entries, expected " + std::to_string(p.rpe_size()));
  }
  auto [x_p, x_u] = channel_split(x, s);
  Tensor4 y_p = conv_branch(x_p, p.conv3);
  const int c_u = s.c_u();
  if (c_u == 0) return channel_concat(y_p, x_u);
  if (p.heads < 1 || c_u % p.heads != 0) {
    throw ShapeError("pat_sf_forward: c_u=" + std::to_string(c_u) + " not divisible by heads=" +
                     std::to_string(p.heads));
  }

  const int tokens = x.h() * x.w();
  const int head_dim = p.head_dim(c_u);
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

  // Projections stay channel-major: row c of q holds feature c for every token.
  const Tensor4 q = channel_linear(x_u, p.wq);
  const Tensor4 k = channel_linear(x_u, p.wk);
  const Tensor4 v = channel_linear(x_u, p.wv);
  Tensor4 mixed(x.n(), c_u, x.h(), x.w());

  Matrix logits(tokens, tokens);
  for (int n = 0; n < x.n(); ++n) {
    for (int h = 0; h < p.heads; ++h) {
      for (int i = 0; i < tokens; ++i) {
        const int yi = i / x.w(), xi = i % x.w();
        float* row = logits.row(i);
        for (int j = 0; j < tokens; ++j) {
          row[j] = p.rpe_bias(h, yi - j / x.w(), xi - j % x.w());
        }
      }
      for (int d = 0; d < head_dim; ++d) {
        const float* qd = q.channel(n, h * head_dim + d);
        const float* kd = k.channel(n, h * head_dim + d);
        for (int i = 0; i < tokens; ++i) {
          const float a = qd[i] * scale;
          float* row = logits.row(i);
          for (int j = 0; j < tokens; ++j) row[j] += a * kd[j];
        }
      }
      softmax_rows_inplace(logits);
      for (int d = 0; d < head_dim; ++d) {
        const float* vd = v.channel(n, h * head_dim + d);
        float* out = mixed.channel(n, h * head_dim + d);
        for (int i = 0; i < tokens; ++i) {
          const float* row = logits.row(i);
          float acc = 0.0f;
          for (int j = 0; j < tokens; ++j) acc += row[j] * vd[j];
          out[i] = acc;
        }
      }
    }
  }
  return channel_concat(y_p, channel_linear(mixed, p.wo));
}

Tensor4 pconv_forward(const Tensor4& x, const std::optional<ConvParams>& conv3, const PartialSplit& s) {
  check_split(x, s, "pconv_forward");
  auto [x_p, x_u] = channel_split(x, s);
  return channel_concat(conv_branch(x_p, conv3), x_u);
}

}  // namespace patnet
