#include "patnet/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace patnet {

namespace {

void check_extents(int n, int c, int h, int w) {
  if (n < 1) throw ShapeError("tensor batch dimension n must be >= 1, got " + std::to_string(n));
  if (c < 0) throw ShapeError("tensor channel dimension c must be >= 0, got " + std::to_string(c));
  if (h < 1) throw ShapeError("tensor height h must be >= 1, got " + std::to_string(h));
  if (w < 1) throw ShapeError("tensor width w must be >= 1, got " + std::to_string(w));
}

}  // namespace

Tensor4::Tensor4(int n, int c, int h, int w) : n_(n), c_(c), h_(h), w_(w) {
  check_extents(n, c, h, w);
  data_.assign(static_cast<std::size_t>(n) * c * h * w, 0.0f);
}

Tensor4::Tensor4(int n, int c, int h, int w, std::vector<float> values)
    : n_(n), c_(c), h_(h), w_(w), data_(std::move(values)) {
  check_extents(n, c, h, w);
  const auto expected = static_cast<std::size_t>(n) * c * h * w;
  if (data_.size() != expected) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not equal n*c*h*w = " + std::to_string(expected));
  }
}

Tensor4 Tensor4::vector(std::vector<float> values) {
  const int len = static_cast<int>(values.size());
  if (len < 1) throw ShapeError("vector tensor length must be >= 1");
  Tensor4 t(len, 1, 1, 1, std::move(values));
  t.rank_ = 1;
  return t;
}

Tensor4 Tensor4::matrix(int rows, int cols, std::vector<float> values) {
  Tensor4 t(rows, cols, 1, 1, std::move(values));
  t.rank_ = 2;
  return t;
}

Tensor4 Tensor4::zeros_like(const Tensor4& other) {
  Tensor4 t(other.n_, other.c_, other.h_, other.w_);
  t.rank_ = other.rank_;
  return t;
}

Tensor4 Tensor4::filled(int n, int c, int h, int w, float value) {
  Tensor4 t(n, c, h, w);
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

void Tensor4::set_rank(int rank) {
  if (rank < 1 || rank > 4) throw ShapeError("tensor rank must be in [1,4], got " + std::to_string(rank));
  const int extents[4] = {n_, c_, h_, w_};
  for (int i = rank; i < 4; ++i) {
    if (extents[i] != 1) {
      throw ShapeError("cannot set rank " + std::to_string(rank) + " on " + shape_string() +
                       ": trailing dimension " + std::to_string(i) + " is not 1");
    }
  }
  rank_ = rank;
}

std::vector<int> Tensor4::dims() const {
  const int extents[4] = {n_, c_, h_, w_};
  return {extents, extents + rank_};
}

std::string Tensor4::shape_string() const {
  std::ostringstream os;
  os << '(' << n_ << ',' << c_ << ',' << h_ << ',' << w_ << ')';
  return os.str();
}

bool operator==(const Tensor4& a, const Tensor4& b) {
  if (!a.same_shape(b) || a.rank_ != b.rank_) return false;
  return a.data_.empty() ||
         std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
}

Matrix::Matrix(int r, int c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
  if (r < 0 || c < 0) throw ShapeError("matrix dimensions must be non-negative");
  if (data.size() != static_cast<std::size_t>(r) * c) {
    throw ShapeError("matrix data length " + std::to_string(data.size()) + " does not equal rows*cols = " +
                     std::to_string(static_cast<std::size_t>(r) * c));
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

void ConvParams::validate() const {
  if (stride < 1) throw ShapeError("conv stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ShapeError("conv padding must be non-negative, got " + std::to_string(padding));
  if (groups < 1) throw ShapeError("conv groups must be positive, got " + std::to_string(groups));
  if (weight.h() != weight.w()) {
    throw ShapeError("conv kernel must be square, got kh=" + std::to_string(weight.h()) +
                     " kw=" + std::to_string(weight.w()));
  }
  if (weight.h() < 1 || weight.h() > 4) {
    throw ShapeError("conv kernel size must be in {1,2,3,4}, got " + std::to_string(weight.h()));
  }
  if (out_channels() % groups != 0) {
    throw ShapeError("conv out_ch " + std::to_string(out_channels()) + " not divisible by groups " +
                     std::to_string(groups));
  }
  if (bias && static_cast<int>(bias->size()) != out_channels()) {
    throw ShapeError("conv bias length " + std::to_string(bias->size()) + " does not equal out_ch " +
                     std::to_string(out_channels()));
  }
}

BnParams BnParams::identity(int channels, float eps) {
  BnParams p;
  p.gamma.assign(channels, 1.0f);
  p.beta.assign(channels, 0.0f);
  p.running_mean.assign(channels, 0.0f);
  p.running_var.assign(channels, 1.0f);
  p.eps = eps;
  return p;
}

void BnParams::validate() const {
  const auto c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch norm parameter vectors differ in channel length");
  }
  if (eps < 0.0f) throw ShapeError("batch norm eps must be non-negative");
  for (float v : running_var) {
    if (!(v >= 0.0f)) throw ShapeError("batch norm running_var must be non-negative");
  }
}

}  // namespace patnet
