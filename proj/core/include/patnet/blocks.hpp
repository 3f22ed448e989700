#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "patnet/kernels.hpp"
#include "patnet/tensor.hpp"

namespace patnet {

/// Channel partition of a partial block. The first c_p channels feed the
/// convolution branch; the remaining c_total - c_p are the untouched slice
/// that the attention branch sees.
struct PartialSplit {
  int c_total = 0;
  int c_p = 0;

  int c_u() const { return c_total - c_p; }

  /// c_p = c_total * num / den, rejected unless the product is exact.
  static PartialSplit from_ratio(int c_total, int num, int den);
  void validate() const;
};

std::pair<Tensor4, Tensor4> channel_split(const Tensor4& x, const PartialSplit& s);
/// Stacks channels, conv-branch slice first.
Tensor4 channel_concat(const Tensor4& x_p, const Tensor4& x_u);

/// Hidden width of the Gaussian-SE bottleneck: max(8, c_u / reduction).
int se_hidden_width(int c_u, int reduction);

struct PatChParams {
  std::optional<ConvParams> conv3;  ///< present iff c_p > 0
  Linear se_fc1;                    ///< hidden x 2*c_u
  Linear se_fc2;                    ///< c_u x hidden
};

struct PatSpParams {
  ConvParams map_conv;  ///< c_total -> 1, 1x1, with bias
};

struct PatSfParams {
  std::optional<ConvParams> conv3;  ///< present iff c_p > 0
  Linear wq, wk, wv, wo;            ///< each c_u x c_u
  int heads = 1;
  int extent_h = 1;  ///< spatial extent the relative-position table is sized for
  int extent_w = 1;
  /// heads x (2H-1) x (2W-1), indexed by (dy + H - 1, dx + W - 1).
  std::vector<float> rpe;

  int head_dim(int c_u) const { return c_u / heads; }
  std::size_t rpe_size() const {
    return static_cast<std::size_t>(heads) * (2 * extent_h - 1) * (2 * extent_w - 1);
  }
  float rpe_bias(int head, int dy, int dx) const {
    const int span_w = 2 * extent_w - 1;
    return rpe[(static_cast<std::size_t>(head) * (2 * extent_h - 1) + (dy + extent_h - 1)) * span_w +
               (dx + extent_w - 1)];
  }
};

/// Attention heads for an untouched width of c_u: c_u / 32 when that is
/// exact, otherwise the divisor of c_u nearest to c_u / 32.
int default_attention_heads(int c_u);

/// Per-sample gate in (0,1), shaped (n, c_u): logistic(fc2(relu(fc1([mean; std])))).
Matrix gaussian_se_gate(const Tensor4& x_u, const PatChParams& p);

/// Partial channel attention: 3x3 conv on the front slice, Gaussian-SE gate on the rest.
Tensor4 pat_ch_forward(const Tensor4& x, const PatChParams& p, const PartialSplit& s);

/// Spatial gate: one hard-sigmoid map per sample from a 1x1 conv over all
/// channels, multiplied into the untouched slice.
Tensor4 pat_sp_forward(const Tensor4& x, const PatSpParams& p, const PartialSplit& s);

/// Applies an already computed spatial logit map (n,1,h,w) the way
/// pat_sp_forward does. The fused runtime feeds this from a merged conv.
Tensor4 apply_spatial_gate(const Tensor4& x, const Tensor4& logit, const PartialSplit& s);

/// Partial self-attention with additive relative-position bias.
Tensor4 pat_sf_forward(const Tensor4& x, const PatSfParams& p, const PartialSplit& s);

/// FasterNet partial convolution: untouched slice passes through unchanged.
Tensor4 pconv_forward(const Tensor4& x, const std::optional<ConvParams>& conv3, const PartialSplit& s);

}  // namespace patnet
