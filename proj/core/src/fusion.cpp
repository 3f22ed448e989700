#include "patnet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "patnet/blocks.hpp"
#include "patnet/kernels.hpp"

namespace patnet {

namespace {

bool is_pointwise(const ConvParams& p) {
  return p.kernel() == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1;
}

Tensor4 random_probe(std::mt19937_64& rng, int c, int h, int w) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Tensor4 t(1, c, h, w);
  for (float& v : t.values()) v = normal(rng);
  return t;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, static_cast<double>(std::fabs(a.data()[i] - b.data()[i])));
  }
  return worst;
}

Tensor4 bias_tensor(const std::vector<float>& values) { return Tensor4::vector(values); }

}  // namespace

ConvParams fold_bn(const ConvParams& conv, const BnParams& bn) {
  conv.validate();
  bn.validate();
  if (bn.channels() != conv.out_channels()) {
    throw ShapeError("fold_bn: batch norm has " + std::to_string(bn.channels()) +
                     " channels but the convolution has out_ch=" + std::to_string(conv.out_channels()));
  }
  ConvParams out = conv;
  std::vector<float> bias(conv.out_channels(), 0.0f);
  const std::size_t per_out = conv.weight.size() / conv.out_channels();
  for (int oc = 0; oc < conv.out_channels(); ++oc) {
    const float scale = bn.gamma[oc] / std::sqrt(bn.running_var[oc] + bn.eps);
    float* w = out.weight.data() + oc * per_out;
    for (std::size_t i = 0; i < per_out; ++i) w[i] *= scale;
    const float b = conv.bias ? (*conv.bias)[oc] : 0.0f;
    bias[oc] = (b - bn.running_mean[oc]) * scale + bn.beta[oc];
  }
  out.bias = std::move(bias);
  return out;
}

ConvParams merge_patsp(const ConvParams& mlp_conv2, const ConvParams& map_conv) {
  mlp_conv2.validate();
  map_conv.validate();
  if (!is_pointwise(mlp_conv2)) throw ShapeError("merge_patsp: the MLP conv must be 1x1, stride 1, ungrouped");
  if (!is_pointwise(map_conv)) throw ShapeError("merge_patsp: the map conv must be 1x1, stride 1, ungrouped");
  if (map_conv.out_channels() != 1) {
    throw ShapeError("merge_patsp: the map conv must have one output channel, has " +
                     std::to_string(map_conv.out_channels()));
  }
  const int c = mlp_conv2.out_channels();
  const int hidden = mlp_conv2.in_channels();
  if (map_conv.in_channels() != c) {
    throw ShapeError("merge_patsp: map conv in_ch=" + std::to_string(map_conv.in_channels()) +
                     " does not match the MLP conv out_ch=" + std::to_string(c));
  }
  std::vector<float> weight(static_cast<std::size_t>(c + 1) * hidden, 0.0f);
  std::copy(mlp_conv2.weight.values().begin(), mlp_conv2.weight.values().end(), weight.begin());
  std::vector<float> bias(c + 1, 0.0f);
  if (mlp_conv2.bias) std::copy(mlp_conv2.bias->begin(), mlp_conv2.bias->end(), bias.begin());

  float* logit_row = weight.data() + static_cast<std::size_t>(c) * hidden;
  float logit_bias = map_conv.bias ? (*map_conv.bias)[0] : 0.0f;
  for (int oc = 0; oc < c; ++oc) {
    const float m = map_conv.weight.data()[oc];
    const float* row = mlp_conv2.weight.data() + static_cast<std::size_t>(oc) * hidden;
    for (int i = 0; i < hidden; ++i) logit_row[i] += m * row[i];
    logit_bias += m * bias[oc];
  }
  bias[c] = logit_bias;

  ConvParams out;
  out.weight = Tensor4(c + 1, hidden, 1, 1, std::move(weight));
  out.bias = std::move(bias);
  return out;
}

double FusionReport::worst_deviation() const {
  double worst = 0.0;
  for (const auto& r : rewrites) worst = std::max(worst, r.max_abs_deviation);
  return worst;
}

FusionResult fuse_model(const ParamStore& params, const ModelSpec& spec, std::uint64_t probe_seed) {
  if (params.fused) throw std::invalid_argument("fuse_model: parameter store is already fused");
  validate_store(spec, params);

  std::mt19937_64 rng(probe_seed);
  FusionResult result;
  ParamStore& out = result.store;
  out = params;
  out.fused = true;
  constexpr int kProbeExtent = 8;

  auto erase = [&](const std::string& name) {
    out.params.erase(name);
    out.buffers.erase(name);
  };

  auto fold = [&](const std::string& conv_prefix, const std::string& bn_prefix, int stride) {
    const ConvParams conv = conv_from_store(params, conv_prefix, stride, 0);
    const BnParams bn = bn_from_store(params, bn_prefix);
    const ConvParams folded = fold_bn(conv, bn);

    const Tensor4 probe = random_probe(rng, conv.in_channels(), kProbeExtent, kProbeExtent);
    const double dev = max_abs_diff(batch_norm_infer(conv2d(probe, conv), bn), conv2d(probe, folded));
    result.report.rewrites.push_back({conv_prefix, "fold_bn", dev});

    out.params[conv_prefix + ".weight"] = folded.weight;
    out.params[conv_prefix + ".bias"] = bias_tensor(*folded.bias);
    for (const char* n : {".weight", ".bias", ".running_mean", ".running_var"}) erase(bn_prefix + n);
  };

  fold("embed.conv", "embed.bn", 4);
  for (int s = 0; s < 4; ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    if (s > 0) fold(stage + ".merge.conv", stage + ".merge.bn", 2);
    const auto& blocks = spec.stages[s].blocks;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string pre = stage + ".block" + std::to_string(b + 1);
      fold(pre + ".mlp.fc1", pre + ".mlp.bn", 1);
      if (!blocks[b].spatial_gate) continue;

      const ConvParams conv2 = conv_from_store(params, pre + ".mlp.fc2", 1, 0);
      const ConvParams map = conv_from_store(params, pre + ".patsp.map", 1, 0);
      const ConvParams merged = merge_patsp(conv2, map);

      const int c = conv2.out_channels();
      const PartialSplit gate_split = blocks[b].gate_split();
      const Tensor4 probe = random_probe(rng, conv2.in_channels(), kProbeExtent, kProbeExtent);
      const Tensor4 reference = pat_sp_forward(conv2d(probe, conv2), PatSpParams{map}, gate_split);
      auto [features, logit] = channel_split(conv2d(probe, merged), PartialSplit{c + 1, c});
      const double dev = max_abs_diff(reference, apply_spatial_gate(features, logit, gate_split));
      result.report.rewrites.push_back({pre + ".mlp.fc2", "merge_patsp", dev});

      erase(pre + ".mlp.fc2.weight");
      erase(pre + ".patsp.map.weight");
      erase(pre + ".patsp.map.bias");
      out.params[pre + ".mlp.fc2_merged.weight"] = merged.weight;
      out.params[pre + ".mlp.fc2_merged.bias"] = bias_tensor(*merged.bias);
    }
  }

  validate_store(spec, out);
  result.report.tensors_removed = params.tensor_count() - out.tensor_count();
  return result;
}

}  // namespace patnet
