#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace patnet {

/// Raised when operand shapes do not satisfy an operation's precondition.
/// The message always names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense NCHW float32 tensor, row-major.
///
/// A tensor also carries a logical rank (1..4). Lower-rank tensors keep their
/// extents in the leading dimensions and pad the rest with 1, so a bias vector
/// of length k is (k,1,1,1) with rank 1 and a linear weight (out,in) is
/// (out,in,1,1) with rank 2. Kernels ignore the rank; serialization uses it.
///
/// The channel count may be 0 (the empty slice of a degenerate partial split),
/// in which case the data is empty. n, h and w are always at least 1.
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(int n, int c, int h, int w);
  Tensor4(int n, int c, int h, int w, std::vector<float> values);

  static Tensor4 vector(std::vector<float> values);
  static Tensor4 matrix(int rows, int cols, std::vector<float> values);
  static Tensor4 zeros_like(const Tensor4& other);
  static Tensor4 filled(int n, int c, int h, int w, float value);

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  int rank() const { return rank_; }
  void set_rank(int rank);
  /// The first rank() extents.
  std::vector<int> dims() const;

  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const { return data_.empty(); }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  /// Pointer to the (n, c) spatial plane.
  float* channel(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const float* channel(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  float& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  bool same_shape(const Tensor4& other) const {
    return n_ == other.n_ && c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }
  std::string shape_string() const;

  /// Bitwise equality of shape, rank and payload.
  friend bool operator==(const Tensor4& a, const Tensor4& b);

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w;
  }

  int n_ = 1;
  int c_ = 0;
  int h_ = 1;
  int w_ = 1;
  int rank_ = 4;
  std::vector<float> data_;
};

/// Row-major float32 matrix used by the attention and linear paths.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0f) {}
  Matrix(int r, int c, std::vector<float> values);

  static Matrix identity(int n);

  float& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  float operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
};

/// Weight of a 2-D convolution is (out_ch, in_ch / groups, kh, kw).
struct ConvParams {
  Tensor4 weight;
  std::optional<std::vector<float>> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  int out_channels() const { return weight.n(); }
  int in_channels() const { return weight.c() * groups; }
  int kernel() const { return weight.h(); }

  /// Throws ShapeError when the invariants of the parameter bundle fail.
  void validate() const;
};

/// Inference-mode batch normalization parameters.
struct BnParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float eps = 1e-5f;

  int channels() const { return static_cast<int>(gamma.size()); }
  static BnParams identity(int channels, float eps = 1e-5f);
  void validate() const;
};

/// Fully connected layer, y = W x + b with W shaped (out, in).
struct Linear {
  Matrix weight;
  std::vector<float> bias;

  int in_features() const { return weight.cols; }
  int out_features() const { return weight.rows; }
};

}  // namespace patnet
