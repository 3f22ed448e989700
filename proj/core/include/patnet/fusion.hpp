#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patnet/model.hpp"
#include "patnet/tensor.hpp"

namespace patnet {

/// Folds an inference-mode BN into the convolution it follows:
/// W' = W * gamma / sqrt(var + eps), B' = (B - mean) * gamma / sqrt(var + eps) + beta.
ConvParams fold_bn(const ConvParams& conv, const BnParams& bn);

/// Merges the spatial-gate map conv (c -> 1) into the MLP's second 1x1 conv
/// (2c -> c). The result has c + 1 outputs; the last one is the pre-activation
/// gate logit.
ConvParams merge_patsp(const ConvParams& mlp_conv2, const ConvParams& map_conv);

struct FusionRewrite {
  std::string name;  ///< store prefix of the rewritten layer
  std::string kind;  ///< "fold_bn" or "merge_patsp"
  double max_abs_deviation = 0.0;
};

struct FusionReport {
  std::vector<FusionRewrite> rewrites;
  std::size_t tensors_removed = 0;
  double worst_deviation() const;
};

struct FusionResult {
  ParamStore store;
  FusionReport report;
};

/// Folds every Conv+BN pair and merges every spatial gate. The input store is
/// not modified. Each rewrite is verified on a unit-variance random probe.
FusionResult fuse_model(const ParamStore& params, const ModelSpec& spec, std::uint64_t probe_seed = 0x5eed);

}  // namespace patnet
