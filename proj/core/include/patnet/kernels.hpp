#pragma once

#include <utility>

#include "patnet/tensor.hpp"

namespace patnet {

enum class Activation { relu, gelu, hard_sigmoid };

/// Stabilizer added to the variance inside channel_stats' square root.
inline constexpr float kChannelStatEps = 1e-5f;

/// Zero-padded grouped 2-D convolution with float32 accumulation.
Tensor4 conv2d(const Tensor4& x, const ConvParams& p);

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
Tensor4 batch_norm_infer(const Tensor4& x, const BnParams& p);

float activate(float x, Activation kind);
Tensor4 activation(const Tensor4& x, Activation kind);
void activation_inplace(Tensor4& x, Activation kind);

/// Spatial mean per (n, c); the result is shaped (n, c, 1, 1).
Tensor4 global_avg_pool(const Tensor4& x);

/// Population mean and std (sqrt(var + kChannelStatEps)) per (n, c),
/// both shaped (n, c, 1, 1).
std::pair<Tensor4, Tensor4> channel_stats(const Tensor4& x);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);
void softmax_rows_inplace(Matrix& m);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

/// Applies a linear layer to each row of x (rows are samples).
Matrix linear_rows(const Matrix& x, const Linear& layer);

/// Applies a linear layer across the channel axis at every spatial position
/// (a 1x1 convolution whose weight is the layer's (out, in) matrix).
Tensor4 channel_linear(const Tensor4& x, const Linear& layer);

}  // namespace patnet
