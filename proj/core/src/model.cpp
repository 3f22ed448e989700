#include "patnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace patnet {

namespace {

constexpr float kBnEps = 1e-5f;

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += ", ";
    out += s;
  }
  return out;
}

bool has(const std::vector<Ablation>& list, Ablation mode) {
  return std::find(list.begin(), list.end(), mode) != list.end();
}

std::string stage_prefix(int stage) { return "stage" + std::to_string(stage + 1); }
std::string block_prefix(int stage, int block) {
  return stage_prefix(stage) + ".block" + std::to_string(block + 1);
}

std::string_view mixer_key(Mixer m) {
  switch (m) {
    case Mixer::pat_ch: return "patch";
    case Mixer::pconv: return "pconv";
    case Mixer::pat_sf: return "patsf";
  }
  return "";
}

Tensor4 tensor_from_dims(const std::vector<int>& dims) {
  int ext[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < dims.size(); ++i) ext[i] = dims[i];
  Tensor4 t(ext[0], ext[1], ext[2], ext[3]);
  t.set_rank(static_cast<int>(dims.size()));
  return t;
}

void add_inplace(Tensor4& dst, const Tensor4& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Variants and ablations

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"T0", "T1", "T2", "S", "M", "L"};
  return names;
}

VariantConfig variant_config(std::string_view name) {
  VariantConfig c;
  c.name = std::string(name);
  if (name == "T0") {
    c.base_channels = 32, c.depths = {1, 2, 6, 4}, c.activation = Activation::gelu;
  } else if (name == "T1") {
    c.base_channels = 48, c.depths = {2, 2, 6, 4}, c.activation = Activation::gelu;
  } else if (name == "T2") {
    c.base_channels = 64, c.depths = {2, 2, 6, 4}, c.activation = Activation::relu;
  } else if (name == "S") {
    c.base_channels = 96, c.depths = {2, 2, 9, 4}, c.activation = Activation::relu;
  } else if (name == "M") {
    c.base_channels = 128, c.depths = {2, 3, 16, 4}, c.activation = Activation::relu;
  } else if (name == "L") {
    c.base_channels = 160, c.depths = {2, 3, 20, 4}, c.activation = Activation::relu;
  } else {
    throw std::invalid_argument("unknown variant '" + std::string(name) + "'; valid variants: " +
                                join(variant_names()));
  }
  return c;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full_ch",  "full_sp",    "full_sf", "no_patch",   "no_patsp",
                                                 "no_patsf", "conv_dense", "conv_dw", "depths_2284"};
  return names;
}

Ablation parse_ablation(std::string_view name) {
  const auto& names = ablation_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<Ablation>(i);
  }
  throw std::invalid_argument("unknown ablation mode '" + std::string(name) + "'; valid modes: " +
                              join(ablation_names()));
}

std::string_view to_string(Ablation mode) { return ablation_names().at(static_cast<std::size_t>(mode)); }

std::string_view to_string(Mixer mixer) {
  switch (mixer) {
    case Mixer::pat_ch: return "pat_ch";
    case Mixer::pconv: return "pconv";
    case Mixer::pat_sf: return "pat_sf";
  }
  return "?";
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::hard_sigmoid: return "hard_sigmoid";
  }
  return "?";
}

std::string ModelSpec::label() const {
  std::string out = config.name;
  for (Ablation a : ablations) {
    out += '+';
    out += to_string(a);
  }
  return out;
}

namespace {

void check_combination(const std::vector<Ablation>& ab) {
  auto both = [&](Ablation a, Ablation b) {
    if (has(ab, a) && has(ab, b)) {
      throw std::invalid_argument("ablation modes " + std::string(to_string(a)) + " and " +
                                  std::string(to_string(b)) + " cannot be combined");
    }
  };
  both(Ablation::full_ch, Ablation::no_patch);
  both(Ablation::full_ch, Ablation::conv_dense);
  both(Ablation::full_ch, Ablation::conv_dw);
  both(Ablation::conv_dense, Ablation::conv_dw);
  both(Ablation::full_sf, Ablation::no_patsf);
  both(Ablation::full_sp, Ablation::no_patsp);
}

ModelSpec build_structure(const VariantConfig& config, int base_channels, int input_h, int input_w,
                          const std::vector<Ablation>& ablations) {
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw ShapeError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                     " must be a positive multiple of 32 in both height and width");
  }
  ModelSpec spec;
  spec.config = config;
  spec.ablations = ablations;
  spec.input_h = input_h;
  spec.input_w = input_w;

  std::array<int, 4> depths = config.depths;
  if (has(ablations, Ablation::depths_2284)) depths = {2, 2, 8, 2};

  const int num = config.partial_num;
  const int den = config.partial_den;
  for (int s = 0; s < 4; ++s) {
    const int C = base_channels << s;
    if (C % den != 0) {
      throw ShapeError("stage " + std::to_string(s + 1) + " width " + std::to_string(C) +
                       " is not divisible by the partial ratio denominator " + std::to_string(den));
    }
    StageSpec& stage = spec.stages[s];
    stage.channels = C;
    stage.stride = 4 << s;
    const int cp = PartialSplit::from_ratio(C, num, den).c_p;
    const int cu = C - cp;

    for (int b = 0; b < depths[s]; ++b) {
      BlockSpec blk;
      blk.channels = C;
      blk.conv_channels = cp;
      blk.gate_conv_channels = cp;
      const bool last_stage = s == 3 && !has(ablations, Ablation::no_patsf);
      if (last_stage) {
        blk.mixer = Mixer::pat_sf;
        blk.heads = default_attention_heads(cu);
        if (has(ablations, Ablation::full_sf)) {
          blk.conv_channels = 0;
          blk.heads = default_attention_heads(C);
        }
      } else {
        blk.mixer = has(ablations, Ablation::no_patch) ? Mixer::pconv : Mixer::pat_ch;
        if (has(ablations, Ablation::conv_dense) || has(ablations, Ablation::conv_dw)) {
          blk.conv_channels = C;
          blk.conv_groups = has(ablations, Ablation::conv_dw) ? C : 1;
        }
        if (has(ablations, Ablation::full_ch)) blk.conv_channels = 0;
        const int mixer_cu = C - blk.conv_channels;
        if (blk.mixer == Mixer::pat_ch && mixer_cu > 0) {
          blk.se_hidden = se_hidden_width(mixer_cu, config.se_reduction);
        }
      }
      blk.spatial_gate = !has(ablations, Ablation::no_patsp);
      if (has(ablations, Ablation::full_sp)) blk.gate_conv_channels = 0;
      stage.blocks.push_back(blk);
    }
  }
  return spec;
}

}  // namespace

ModelSpec build_model(const VariantConfig& config, int input_h, int input_w, const std::vector<Ablation>& ablations) {
  if (config.base_channels <= 0) throw std::invalid_argument("variant base width must be positive");
  if (config.partial_den <= 0) throw std::invalid_argument("partial ratio denominator must be positive");
  std::vector<Ablation> unique;
  for (Ablation a : ablations) {
    if (!has(unique, a)) unique.push_back(a);
  }
  check_combination(unique);

  int base = config.base_channels;
  if (has(unique, Ablation::conv_dw)) {
    // The depthwise arm is widened until its parameter budget is closest to
    // the dense-conv arm of the same configuration. Widths step by 8.
    std::vector<Ablation> dense = unique;
    std::replace(dense.begin(), dense.end(), Ablation::conv_dw, Ablation::conv_dense);
    const std::int64_t target = count_params(build_structure(config, base, input_h, input_w, dense));
    std::int64_t best_gap = -1;
    int best = base;
    for (int c = base; c <= 2 * base; c += 8) {
      if (c % config.partial_den != 0) continue;
      const std::int64_t p = count_params(build_structure(config, c, input_h, input_w, unique));
      const std::int64_t gap = std::llabs(p - target);
      if (best_gap < 0 || gap < best_gap) best_gap = gap, best = c;
    }
    base = best;
  }
  return build_structure(config, base, input_h, input_w, unique);
}

ModelSpec build_variant(std::string_view name, int input_h, int input_w) {
  return build_model(variant_config(name), input_h, input_w);
}

ModelSpec build_ablation(const ModelSpec& spec, Ablation mode) {
  std::vector<Ablation> modes = spec.ablations;
  if (!has(modes, mode)) modes.push_back(mode);
  return build_model(spec.config, spec.input_h, spec.input_w, modes);
}

// ---------------------------------------------------------------------------
// Parameter layout

std::size_t TensorDecl::numel() const {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<TensorDecl> parameter_layout(const ModelSpec& spec, bool fused) {
  using Role = TensorDecl::Role;
  std::vector<TensorDecl> out;
  auto add = [&](std::string name, std::vector<int> dims, Role role, int fan_in = 1) {
    out.push_back({std::move(name), std::move(dims), role, fan_in});
  };
  auto conv_bn = [&](const std::string& prefix, int out_ch, int in_ch, int k) {
    add(prefix + ".conv.weight", {out_ch, in_ch, k, k}, Role::weight, in_ch * k * k);
    if (fused) {
      add(prefix + ".conv.bias", {out_ch}, Role::bias);
    } else {
      add(prefix + ".bn.weight", {out_ch}, Role::bn_gamma);
      add(prefix + ".bn.bias", {out_ch}, Role::bn_beta);
      add(prefix + ".bn.running_mean", {out_ch}, Role::bn_mean);
      add(prefix + ".bn.running_var", {out_ch}, Role::bn_var);
    }
  };
  auto linear = [&](const std::string& prefix, int out_f, int in_f) {
    add(prefix + ".weight", {out_f, in_f}, Role::weight, in_f);
    add(prefix + ".bias", {out_f}, Role::bias);
  };

  conv_bn("embed", spec.stages[0].channels, 3, 4);
  for (int s = 0; s < 4; ++s) {
    const StageSpec& stage = spec.stages[s];
    const int C = stage.channels;
    if (s > 0) conv_bn(stage_prefix(s) + ".merge", C, spec.stages[s - 1].channels, 2);
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      const BlockSpec& blk = stage.blocks[b];
      const std::string pre = block_prefix(s, static_cast<int>(b));
      const std::string mix = pre + "." + std::string(mixer_key(blk.mixer));
      const int cp = blk.conv_channels;
      const int cu = C - cp;
      if (cp > 0) {
        const int in_per_group = cp / blk.conv_groups;
        add(mix + ".conv3.weight", {cp, in_per_group, 3, 3}, Role::weight, in_per_group * 9);
      }
      if (blk.mixer == Mixer::pat_ch && cu > 0) {
        linear(mix + ".se.fc1", blk.se_hidden, 2 * cu);
        linear(mix + ".se.fc2", cu, blk.se_hidden);
      }
      if (blk.mixer == Mixer::pat_sf && cu > 0) {
        for (const char* proj : {"q", "k", "v", "o"}) linear(mix + "." + proj, cu, cu);
        add(mix + ".rpe", {blk.heads, 2 * spec.attention_extent_h() - 1, 2 * spec.attention_extent_w() - 1},
            Role::rpe);
      }
      const int hidden = C * spec.config.mlp_ratio;
      add(pre + ".mlp.fc1.weight", {hidden, C, 1, 1}, Role::weight, C);
      if (fused) {
        add(pre + ".mlp.fc1.bias", {hidden}, Role::bias);
      } else {
        add(pre + ".mlp.bn.weight", {hidden}, Role::bn_gamma);
        add(pre + ".mlp.bn.bias", {hidden}, Role::bn_beta);
        add(pre + ".mlp.bn.running_mean", {hidden}, Role::bn_mean);
        add(pre + ".mlp.bn.running_var", {hidden}, Role::bn_var);
      }
      if (blk.spatial_gate && fused) {
        add(pre + ".mlp.fc2_merged.weight", {C + 1, hidden, 1, 1}, Role::weight, hidden);
        add(pre + ".mlp.fc2_merged.bias", {C + 1}, Role::bias);
      } else {
        add(pre + ".mlp.fc2.weight", {C, hidden, 1, 1}, Role::weight, hidden);
      }
      if (blk.spatial_gate && !fused) {
        add(pre + ".patsp.map.weight", {1, C, 1, 1}, Role::weight, C);
        add(pre + ".patsp.map.bias", {1}, Role::bias);
      }
    }
  }
  const int hidden = spec.config.classifier_hidden;
  add("head.conv.weight", {hidden, spec.final_channels(), 1, 1}, Role::weight, spec.final_channels());
  linear("head.fc", spec.config.num_classes, hidden);
  return out;
}

// ---------------------------------------------------------------------------
// Store

std::size_t ParamStore::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

bool ParamStore::contains(const std::string& name) const {
  return params.count(name) != 0 || buffers.count(name) != 0;
}

const Tensor4& ParamStore::get(const std::string& name) const {
  if (auto it = params.find(name); it != params.end()) return it->second;
  if (auto it = buffers.find(name); it != buffers.end()) return it->second;
  throw std::out_of_range("parameter store has no tensor named '" + name + "'");
}

ParamStore init_params(const ModelSpec& spec, std::uint64_t seed) {
  using Role = TensorDecl::Role;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ParamStore store;
  for (const TensorDecl& d : parameter_layout(spec, false)) {
    Tensor4 t = tensor_from_dims(d.dims);
    switch (d.role) {
      case Role::weight: {
        const float scale = 1.0f / std::sqrt(static_cast<float>(d.fan_in));
        for (float& v : t.values()) v = normal(rng) * scale;
        break;
      }
      case Role::bn_gamma:
      case Role::bn_var:
        std::fill(t.values().begin(), t.values().end(), 1.0f);
        break;
      case Role::bias:
      case Role::bn_beta:
      case Role::bn_mean:
      case Role::rpe:
        break;
    }
    (d.is_buffer() ? store.buffers : store.params).emplace(d.name, std::move(t));
  }
  return store;
}

void validate_store(const ModelSpec& spec, const ParamStore& store) {
  const auto layout = parameter_layout(spec, store.fused);
  std::set<std::string> expected;
  std::vector<std::string> problems;
  for (const TensorDecl& d : layout) {
    expected.insert(d.name);
    const auto& map = d.is_buffer() ? store.buffers : store.params;
    auto it = map.find(d.name);
    if (it == map.end()) {
      problems.push_back("missing '" + d.name + "'");
    } else if (it->second.dims() != d.dims) {
      problems.push_back("'" + d.name + "' has shape " + it->second.shape_string() + " (rank " +
                         std::to_string(it->second.rank()) + ")");
    }
  }
  for (const auto* map : {&store.params, &store.buffers}) {
    for (const auto& [name, t] : *map) {
      if (!expected.count(name)) problems.push_back("unexpected '" + name + "'");
    }
  }
  if (!problems.empty()) {
    std::string msg = "parameter store does not match " + spec.label() + (store.fused ? " (fused)" : "") + ": ";
    const std::size_t shown = std::min<std::size_t>(problems.size(), 5);
    for (std::size_t i = 0; i < shown; ++i) msg += (i ? "; " : "") + problems[i];
    if (problems.size() > shown) msg += "; and " + std::to_string(problems.size() - shown) + " more";
    throw ShapeError(msg);
  }
}

ModelSpec infer_spec(const ParamStore& store) {
  if (!store.contains("embed.conv.weight")) {
    throw ShapeError("parameter store has no 'embed.conv.weight'; cannot determine the variant");
  }
  const int base = store.get("embed.conv.weight").n();
  std::string variant;
  for (const auto& name : variant_names()) {
    if (variant_config(name).base_channels == base) variant = name;
  }
  if (variant.empty()) {
    throw ShapeError("embedding width " + std::to_string(base) + " matches no known variant");
  }
  int input_h = 224, input_w = 224;
  for (const auto& [name, t] : store.params) {
    if (name.size() > 4 && name.compare(name.size() - 4, 4, ".rpe") == 0 && t.rank() == 3) {
      input_h = (t.c() + 1) / 2 * 32;
      input_w = (t.h() + 1) / 2 * 32;
      break;
    }
  }
  ModelSpec spec = build_variant(variant, input_h, input_w);
  validate_store(spec, store);
  return spec;
}

// ---------------------------------------------------------------------------
// Cost accounting (closed forms, independent of parameter_layout)

std::vector<CostRow> cost_breakdown(const ModelSpec& spec, int input_h, int input_w, bool fused) {
  if (input_h % 32 != 0 || input_w % 32 != 0 || input_h < 32 || input_w < 32) {
    throw ShapeError("cost accounting needs H and W to be positive multiples of 32, got " +
                     std::to_string(input_h) + "x" + std::to_string(input_w));
  }
  using I = std::int64_t;
  std::vector<CostRow> rows;

  const I c0 = spec.stages[0].channels;
  const I pos0 = I(input_h / 4) * (input_w / 4);
  rows.push_back({"embed", 3 * c0 * 16 + 2 * c0, pos0 * c0 * 3 * 16});

  for (int s = 0; s < 4; ++s) {
    const StageSpec& stage = spec.stages[s];
    const I C = stage.channels;
    const I pos = I(input_h / stage.stride) * (input_w / stage.stride);
    CostRow row{stage_prefix(s), 0, 0};
    if (s > 0) {
      const I cin = spec.stages[s - 1].channels;
      row.params += C * cin * 4 + 2 * C;
      row.flops += pos * C * cin * 4;
    }
    for (const BlockSpec& blk : stage.blocks) {
      const I cp = blk.conv_channels;
      const I cu = C - cp;
      const I conv3 = cp * (cp / blk.conv_groups) * 9;
      row.params += conv3;
      row.flops += pos * conv3;
      if (blk.mixer == Mixer::pat_ch && cu > 0) {
        const I hid = blk.se_hidden;
        row.params += hid * 2 * cu + hid + cu * hid + cu;
        row.flops += hid * 2 * cu + cu * hid + pos * cu;
      }
      if (blk.mixer == Mixer::pat_sf && cu > 0) {
        row.params += 4 * (cu * cu + cu) +
                      I(blk.heads) * (2 * spec.attention_extent_h() - 1) * (2 * spec.attention_extent_w() - 1);
        row.flops += 4 * pos * cu * cu + 2 * pos * pos * cu;
      }
      const I hidden = C * spec.config.mlp_ratio;
      row.params += C * hidden + 2 * hidden + hidden * C;
      row.flops += pos * C * hidden + pos * hidden * C;
      if (blk.spatial_gate) {
        const I gate_cu = C - blk.gate_conv_channels;
        row.params += C + 1;
        // The merged conv computes the map row from the MLP hidden width.
        row.flops += (fused ? pos * hidden : pos * C) + pos * gate_cu;
      }
    }
    rows.push_back(row);
  }

  const I cf = spec.final_channels();
  const I hid = spec.config.classifier_hidden;
  const I cls = spec.config.num_classes;
  rows.push_back({"head", cf * hid + hid * cls + cls, cf * hid + hid * cls});
  return rows;
}

std::int64_t count_params(const ModelSpec& spec) {
  std::int64_t total = 0;
  for (const auto& r : cost_breakdown(spec, spec.input_h, spec.input_w)) total += r.params;
  return total;
}

std::int64_t count_flops(const ModelSpec& spec, int input_h, int input_w, bool fused) {
  std::int64_t total = 0;
  for (const auto& r : cost_breakdown(spec, input_h, input_w, fused)) total += r.flops;
  return total;
}

// ---------------------------------------------------------------------------
// Compiled runtime

ConvParams conv_from_store(const ParamStore& store, const std::string& prefix, int stride, int padding,
                           int groups) {
  ConvParams p;
  p.weight = store.get(prefix + ".weight");
  if (store.contains(prefix + ".bias")) {
    const auto v = store.get(prefix + ".bias").values();
    p.bias = std::vector<float>(v.begin(), v.end());
  }
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  p.validate();
  return p;
}

BnParams bn_from_store(const ParamStore& store, const std::string& prefix) {
  auto vec = [&](const std::string& n) {
    const auto v = store.get(prefix + "." + n).values();
    return std::vector<float>(v.begin(), v.end());
  };
  BnParams p;
  p.gamma = vec("weight");
  p.beta = vec("bias");
  p.running_mean = vec("running_mean");
  p.running_var = vec("running_var");
  p.eps = kBnEps;
  p.validate();
  return p;
}

Linear linear_from_store(const ParamStore& store, const std::string& prefix) {
  const Tensor4& w = store.get(prefix + ".weight");
  Linear l;
  l.weight = Matrix(w.n(), w.c(), std::vector<float>(w.values().begin(), w.values().end()));
  if (store.contains(prefix + ".bias")) {
    const auto v = store.get(prefix + ".bias").values();
    l.bias.assign(v.begin(), v.end());
  }
  return l;
}

PatNet PatNet::compile(const ModelSpec& spec, const ParamStore& store) {
  validate_store(spec, store);
  PatNet net;
  net.spec_ = spec;
  net.fused_ = store.fused;

  auto conv_bn = [&](const std::string& prefix, int k) {
    ConvBn cb;
    cb.conv = conv_from_store(store, prefix + ".conv", k, 0);
    if (!store.fused) cb.bn = bn_from_store(store, prefix + ".bn");
    return cb;
  };
  net.embed_ = conv_bn("embed", 4);
  for (int s = 0; s < 4; ++s) {
    if (s > 0) net.merges_[s - 1] = conv_bn(stage_prefix(s) + ".merge", 2);
    const StageSpec& stage = spec.stages[s];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      const BlockSpec& blk = stage.blocks[b];
      const std::string pre = block_prefix(s, static_cast<int>(b));
      const std::string mix = pre + "." + std::string(mixer_key(blk.mixer));
      Block out;
      out.spec = blk;
      std::optional<ConvParams> conv3;
      if (blk.conv_channels > 0) conv3 = conv_from_store(store, mix + ".conv3", 1, 1, blk.conv_groups);
      const int cu = blk.channels - blk.conv_channels;
      switch (blk.mixer) {
        case Mixer::pat_ch: {
          PatChParams p;
          p.conv3 = std::move(conv3);
          if (cu > 0) {
            p.se_fc1 = linear_from_store(store, mix + ".se.fc1");
            p.se_fc2 = linear_from_store(store, mix + ".se.fc2");
          }
          out.mixer = std::move(p);
          break;
        }
        case Mixer::pconv:
          out.mixer = std::move(conv3);
          break;
        case Mixer::pat_sf: {
          PatSfParams p;
          p.conv3 = std::move(conv3);
          p.heads = blk.heads;
          p.extent_h = spec.attention_extent_h();
          p.extent_w = spec.attention_extent_w();
          if (cu > 0) {
            p.wq = linear_from_store(store, mix + ".q");
            p.wk = linear_from_store(store, mix + ".k");
            p.wv = linear_from_store(store, mix + ".v");
            p.wo = linear_from_store(store, mix + ".o");
            const auto r = store.get(mix + ".rpe").values();
            p.rpe.assign(r.begin(), r.end());
          }
          out.mixer = std::move(p);
          break;
        }
      }
      out.mlp.fc1 = conv_from_store(store, pre + ".mlp.fc1", 1, 0);
      if (!store.fused) out.mlp.bn = bn_from_store(store, pre + ".mlp.bn");
      if (blk.spatial_gate && store.fused) {
        out.mlp.fc2 = conv_from_store(store, pre + ".mlp.fc2_merged", 1, 0);
        out.gate_merged = true;
      } else {
        out.mlp.fc2 = conv_from_store(store, pre + ".mlp.fc2", 1, 0);
        if (blk.spatial_gate) out.gate = PatSpParams{conv_from_store(store, pre + ".patsp.map", 1, 0)};
      }
      net.blocks_[s].push_back(std::move(out));
    }
  }
  net.head_conv_ = conv_from_store(store, "head.conv", 1, 0);
  net.head_fc_ = linear_from_store(store, "head.fc");
  return net;
}

Tensor4 PatNet::run_block(const Block& block, const Tensor4& x) const {
  const BlockSpec& blk = block.spec;
  auto mlp_and_gate = [&](const Tensor4& t) {
    Tensor4 h = conv2d(t, block.mlp.fc1);
    if (block.mlp.bn) h = batch_norm_infer(h, *block.mlp.bn);
    activation_inplace(h, spec_.config.activation);
    Tensor4 m = conv2d(h, block.mlp.fc2);
    if (block.gate_merged) {
      auto [features, logit] = channel_split(m, PartialSplit{blk.channels + 1, blk.channels});
      return apply_spatial_gate(features, logit, blk.gate_split());
    }
    if (block.gate) return pat_sp_forward(m, *block.gate, blk.gate_split());
    return m;
  };

  const PartialSplit split = blk.mixer_split();
  if (blk.two_residuals()) {
    Tensor4 y = pat_sf_forward(x, std::get<PatSfParams>(block.mixer), split);
    add_inplace(y, x);
    Tensor4 m = mlp_and_gate(y);
    add_inplace(m, y);
    return m;
  }
  Tensor4 t = blk.mixer == Mixer::pat_ch
                  ? pat_ch_forward(x, std::get<PatChParams>(block.mixer), split)
                  : pconv_forward(x, std::get<std::optional<ConvParams>>(block.mixer), split);
  Tensor4 m = mlp_and_gate(t);
  add_inplace(m, x);
  return m;
}

Tensor4 PatNet::features(const Tensor4& x, int last_stage) const {
  if (x.c() != 3) {
    throw ShapeError("model input channel dimension c=" + std::to_string(x.c()) + " must be 3");
  }
  if (x.h() % 32 != 0) throw ShapeError("model input height " + std::to_string(x.h()) + " is not divisible by 32");
  if (x.w() % 32 != 0) throw ShapeError("model input width " + std::to_string(x.w()) + " is not divisible by 32");
  if (x.h() != spec_.input_h || x.w() != spec_.input_w) {
    throw ShapeError("model input extent " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
                     " does not match the extent the attention tables were sized for (" +
                     std::to_string(spec_.input_h) + "x" + std::to_string(spec_.input_w) + ")");
  }
  auto apply = [](const ConvBn& cb, const Tensor4& t) {
    Tensor4 y = conv2d(t, cb.conv);
    return cb.bn ? batch_norm_infer(y, *cb.bn) : y;
  };
  Tensor4 t = apply(embed_, x);
  for (int s = 0; s <= last_stage && s < 4; ++s) {
    if (s > 0) t = apply(merges_[s - 1], t);
    for (const Block& b : blocks_[s]) t = run_block(b, t);
  }
  return t;
}

Matrix PatNet::forward(const Tensor4& x) const {
  Tensor4 t = features(x, 3);
  Tensor4 pooled = conv2d(global_avg_pool(t), head_conv_);
  activation_inplace(pooled, spec_.config.activation);
  Matrix flat(pooled.n(), pooled.c(), std::vector<float>(pooled.values().begin(), pooled.values().end()));
  return linear_rows(flat, head_fc_);
}

Matrix model_forward(const ModelSpec& spec, const ParamStore& store, const Tensor4& x) {
  return PatNet::compile(spec, store).forward(x);
}

}  // namespace patnet
