#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "patnet/blocks.hpp"
#include "patnet/kernels.hpp"
#include "patnet/tensor.hpp"

namespace patnet {

/// Static description of one PATNet variant.
struct VariantConfig {
  std::string name;
  int base_channels = 0;
  std::array<int, 4> depths{};
  Activation activation = Activation::relu;
  int partial_num = 1;  ///< partial ratio r_p = partial_num / partial_den
  int partial_den = 4;
  int mlp_ratio = 2;
  int classifier_hidden = 1280;
  int num_classes = 1000;
  /// Gaussian-SE bottleneck reduction; hidden width is max(8, c_u / se_reduction).
  int se_reduction = 1;

  int stage_channels(int stage) const { return base_channels << stage; }
};

/// Names accepted by variant_config / build_variant, in size order.
const std::vector<std::string>& variant_names();
VariantConfig variant_config(std::string_view name);

enum class Mixer { pat_ch, pconv, pat_sf };

enum class Ablation {
  full_ch,
  full_sp,
  full_sf,
  no_patch,
  no_patsp,
  no_patsf,
  conv_dense,
  conv_dw,
  depths_2284,
};

const std::vector<std::string>& ablation_names();
Ablation parse_ablation(std::string_view name);
std::string_view to_string(Ablation mode);
std::string_view to_string(Mixer mixer);
std::string_view to_string(Activation act);

struct BlockSpec {
  int channels = 0;
  Mixer mixer = Mixer::pat_ch;
  int conv_channels = 0;  ///< c_p of the mixer's partial split
  int conv_groups = 1;    ///< 1 for a regular 3x3 conv, conv_channels for depthwise
  int se_hidden = 0;      ///< pat_ch only; 0 when the untouched slice is empty
  int heads = 0;          ///< pat_sf only
  bool spatial_gate = true;
  int gate_conv_channels = 0;  ///< c_p of the spatial-gate split (identity slice)

  PartialSplit mixer_split() const { return {channels, conv_channels}; }
  PartialSplit gate_split() const { return {channels, gate_conv_channels}; }
  /// Block v2 (self-attention) carries a residual around the mixer and a
  /// second one around MLP + spatial gate; v1 has a single residual.
  bool two_residuals() const { return mixer == Mixer::pat_sf; }
  bool operator==(const BlockSpec&) const = default;
};

struct StageSpec {
  int channels = 0;
  int stride = 0;  ///< total downsampling factor relative to the input
  std::vector<BlockSpec> blocks;
  bool operator==(const StageSpec&) const = default;
};

/// Ordered layer list derived from a VariantConfig: embedding, four stages
/// (each after the first preceded by a merging layer) and the classifier.
struct ModelSpec {
  VariantConfig config;
  std::vector<Ablation> ablations;
  int input_h = 224;
  int input_w = 224;
  std::array<StageSpec, 4> stages;

  std::string label() const;
  int final_channels() const { return stages[3].channels; }
  int attention_extent_h() const { return input_h / 32; }
  int attention_extent_w() const { return input_w / 32; }
};

ModelSpec build_variant(std::string_view name, int input_h = 224, int input_w = 224);
ModelSpec build_model(const VariantConfig& config, int input_h, int input_w,
                      const std::vector<Ablation>& ablations = {});
/// Returns spec with one more substitution applied. Modes compose; applying a
/// mode twice is a no-op.
ModelSpec build_ablation(const ModelSpec& spec, Ablation mode);

/// Named learnable parameters plus inference buffers (BN running statistics).
struct ParamStore {
  std::map<std::string, Tensor4> params;
  std::map<std::string, Tensor4> buffers;
  bool fused = false;

  std::size_t param_count() const;
  std::size_t tensor_count() const { return params.size() + buffers.size(); }
  bool contains(const std::string& name) const;
  /// Looks in params then buffers; throws std::out_of_range naming the tensor.
  const Tensor4& get(const std::string& name) const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

/// One tensor the model expects to find in a store.
struct TensorDecl {
  enum class Role { weight, bias, bn_gamma, bn_beta, bn_mean, bn_var, rpe };
  std::string name;
  std::vector<int> dims;
  Role role = Role::weight;
  int fan_in = 1;

  bool is_buffer() const { return role == Role::bn_mean || role == Role::bn_var; }
  std::size_t numel() const;
};

/// Every tensor a store for spec holds, in a fixed order.
std::vector<TensorDecl> parameter_layout(const ModelSpec& spec, bool fused);

ParamStore init_params(const ModelSpec& spec, std::uint64_t seed);

/// Throws ShapeError when store's names or shapes differ from the layout.
void validate_store(const ModelSpec& spec, const ParamStore& store);

/// Reconstructs the canonical variant spec a store was built for (base width,
/// depths, input extent and fused flag are read off tensor shapes).
ModelSpec infer_spec(const ParamStore& store);

std::int64_t count_params(const ModelSpec& spec);
/// Multiply-accumulate count for one image of size h x w.
std::int64_t count_flops(const ModelSpec& spec, int input_h, int input_w, bool fused = false);

/// Per-layer-group breakdown used by the summary table.
struct CostRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};
std::vector<CostRow> cost_breakdown(const ModelSpec& spec, int input_h, int input_w, bool fused = false);

/// Structured, ready-to-run form of a store. Immutable after compile();
/// forward() is reentrant.
class PatNet {
 public:
  static PatNet compile(const ModelSpec& spec, const ParamStore& store);

  /// x is (n, 3, H, W); returns logits shaped (n, num_classes).
  Matrix forward(const Tensor4& x) const;
  const ModelSpec& spec() const { return spec_; }
  bool fused() const { return fused_; }

  struct ConvBn {
    ConvParams conv;
    std::optional<BnParams> bn;
  };
  struct Mlp {
    ConvParams fc1;
    std::optional<BnParams> bn;
    ConvParams fc2;  ///< channels -> channels (+1 when the spatial gate is merged)
  };
  struct Block {
    BlockSpec spec;
    std::variant<PatChParams, std::optional<ConvParams>, PatSfParams> mixer;
    Mlp mlp;
    std::optional<PatSpParams> gate;  ///< unfused spatial gate
    bool gate_merged = false;
  };

  /// Runs stages up to and including stage index last_stage (0-based) and
  /// returns that stage's output feature map.
  Tensor4 features(const Tensor4& x, int last_stage = 3) const;
  Tensor4 run_block(const Block& block, const Tensor4& x) const;
  const std::vector<Block>& stage_blocks(int stage) const { return blocks_[stage]; }

 private:
  ModelSpec spec_;
  bool fused_ = false;
  ConvBn embed_;
  std::array<ConvBn, 3> merges_;
  std::array<std::vector<Block>, 4> blocks_;
  ConvParams head_conv_;
  Linear head_fc_;
};

Matrix model_forward(const ModelSpec& spec, const ParamStore& store, const Tensor4& x);

/// Helpers that turn store entries into kernel parameter bundles.
ConvParams conv_from_store(const ParamStore& store, const std::string& prefix, int stride, int padding,
                           int groups = 1);
BnParams bn_from_store(const ParamStore& store, const std::string& prefix);
Linear linear_from_store(const ParamStore& store, const std::string& prefix);

}  // namespace patnet
