#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "patnet/blocks.hpp"
#include "patnet/tensor.hpp"

namespace patnet {

enum class BlockKind { pat_ch, pat_sp, pat_sf };

std::string_view to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);

/// Parameters of any of the three partial-attention blocks. The 3x3 conv
/// branch must be a regular (ungrouped) convolution.
using BlockParams = std::variant<PatChParams, PatSpParams, PatSfParams>;

BlockKind kind_of(const BlockParams& params);

/// Gradients of <upstream, block(x)> keyed by parameter name:
/// conv3.weight, se.fc1.{weight,bias}, se.fc2.{weight,bias}, map.{weight,bias},
/// {q,k,v,o}.{weight,bias}, rpe.
template <class T>
struct BlockGradients {
  std::vector<T> input;
  std::map<std::string, std::vector<T>> params;
};

/// Reverse-mode gradients computed in float32.
BlockGradients<float> block_vjp(const BlockParams& params, const PartialSplit& split, const Tensor4& x,
                                const Tensor4& upstream);
/// Same computation carried out in float64.
BlockGradients<double> block_vjp_f64(const BlockParams& params, const PartialSplit& split, const Tensor4& x,
                                     const Tensor4& upstream);

/// Float64 forward of the block; the differentiable path's own forward.
Tensor4 block_forward_reference(const BlockParams& params, const PartialSplit& split, const Tensor4& x);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h);

/// Dense float64 convolution used to cross-check the conv backward pass.
struct ConvGeometry {
  int n = 1, c_in = 1, h = 1, w = 1, c_out = 1, kernel = 3, stride = 1, padding = 1;
  int out_h() const { return (h + 2 * padding - kernel) / stride + 1; }
  int out_w() const { return (w + 2 * padding - kernel) / stride + 1; }
};
std::vector<double> conv2d_f64(const ConvGeometry& g, std::span<const double> x, std::span<const double> weight);
std::vector<double> conv2d_input_vjp_f64(const ConvGeometry& g, std::span<const double> weight,
                                         std::span<const double> upstream);

/// Gradient of a row-wise softmax given its output y and upstream g.
std::vector<double> softmax_rows_vjp(int rows, int cols, std::span<const double> y, std::span<const double> g);

struct ProbeSizes {
  int n = 1;
  int channels = 8;
  int height = 4;
  int width = 4;
  int heads = 2;  ///< pat_sf only
};

/// Default probe shape per block: pat_sf uses a 3x3 grid (9 tokens).
ProbeSizes default_probe_sizes(BlockKind kind);

struct GradCheckOptions {
  bool float64 = false;           ///< analytic path in float64 (tolerance 1e-6, h 1e-5)
  bool inject_fault = false;      ///< scale the largest analytic entry by 1.1
  double tolerance = 0.0;         ///< 0 selects the precision default
  double step = 0.0;              ///< 0 selects the precision default
  double kink_margin = 1e-2;
};

struct GradEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0.0;
};

struct GradReport {
  BlockKind kind = BlockKind::pat_ch;
  std::uint64_t seed = 0;
  ProbeSizes sizes;
  bool float64 = false;
  bool fault_injected = false;
  double tolerance = 0.0;
  double step = 0.0;
  int rejected_samples = 0;
  std::vector<GradEntry> entries;  ///< "input" first, then parameters
  bool pass = false;

  double worst() const;
};

/// Samples a probe from a seeded normal (rejecting any within kink_margin of a
/// ReLU or hard-sigmoid kink) and compares analytic to numeric gradients with
/// relative error |a - n| / max(1, |n|).
GradReport gradcheck_block(BlockKind kind, std::uint64_t seed, const ProbeSizes& sizes,
                           const GradCheckOptions& options = {});

}  // namespace patnet
