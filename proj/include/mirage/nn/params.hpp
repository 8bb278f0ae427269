#pragma once

// Architecture plans and the named parameter sets they imply.
//
// A NetworkPlan resolves a NetworkSpec into concrete per-block channel counts
// and wiring. Parameter names and shapes are enumerated from the plan alone,
// so parameter counts and name-set comparisons need no instantiation.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mirage/core/rng.hpp"
#include "mirage/core/tensor.hpp"
#include "mirage/nn/spec.hpp"

namespace mirage::nn {

struct BlockPlan {
  std::string prefix;
  BlockKind kind = BlockKind::residual;
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t pool = 1;  // average-pool factor applied to the block input
  SkipMode skip = SkipMode::full();
  bool projection = false;  // residual: 1x1 conv on the skip path
  bool bottleneck = false;  // residual: 1x1 -> 3x3 -> 1x1 form
  std::size_t mid_ch = 0;
  std::size_t growth = 0;  // dense
  std::size_t kept = 0;    // dense: channels of z carried by the skip
  bool identity = false;   // repvgg: identity (BN-only) branch present
  std::size_t conv_stride = 1;  // repvgg: stride of both convolutions
};

struct TransitionPlan {
  std::string prefix;
  std::size_t in_ch = 0, out_ch = 0, pool = 1;
};

struct StagePlan {
  std::optional<TransitionPlan> transition;
  std::vector<BlockPlan> blocks;
  std::size_t out_ch = 0;
};

struct NetworkPlan {
  std::size_t in_ch = 0, resolution = 0;
  std::size_t stem_ch = 0, stem_kernel = 3, stem_pool = 1;
  std::array<StagePlan, 4> stages;
  bool head_bn = true;
  std::size_t head_ch = 0, num_classes = 0;
};

inline BlockPlan residual_block_plan(std::string prefix, std::size_t in_ch, std::size_t out_ch, std::size_t pool,
                                     SkipMode skip, bool bottleneck = false) {
  BlockPlan b;
  b.prefix = std::move(prefix);
  b.kind = BlockKind::residual;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.pool = pool;
  b.skip = skip;
  b.projection = skip.has_skip_path() && (in_ch != out_ch || pool > 1);
  b.bottleneck = bottleneck;
  b.mid_ch = bottleneck ? out_ch / 4 : out_ch;
  return b;
}

inline BlockPlan dense_block_plan(std::string prefix, std::size_t in_ch, std::size_t growth, SkipMode skip) {
  BlockPlan b;
  b.prefix = std::move(prefix);
  b.kind = BlockKind::dense;
  b.in_ch = in_ch;
  b.growth = growth;
  b.skip = skip;
  b.kept = skip.kept_channels(in_ch);
  b.out_ch = b.kept + growth;
  return b;
}

inline BlockPlan repvgg_block_plan(std::string prefix, std::size_t in_ch, std::size_t out_ch, std::size_t pool,
                                   SkipMode skip, std::size_t conv_stride = 1) {
  BlockPlan b;
  b.prefix = std::move(prefix);
  b.kind = BlockKind::repvgg;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.pool = pool;
  b.skip = skip;
  b.conv_stride = conv_stride;
  b.identity = skip.has_skip_path() && in_ch == out_ch && pool == 1 && conv_stride == 1;
  return b;
}

inline NetworkPlan make_plan(const NetworkSpec& spec) {
  validate(spec);
  NetworkPlan p;
  p.in_ch = spec.in_channels;
  p.resolution = spec.resolution;
  p.stem_ch = spec.stem.channels;
  p.stem_kernel = spec.stem.kernel;
  p.stem_pool = spec.stem.pool;
  p.num_classes = spec.num_classes;
  std::size_t ch = spec.stem.channels;
  for (std::size_t si = 0; si < 4; ++si) {
    const StageSpec& st = spec.stages[si];
    StagePlan& sp = p.stages[si];
    const std::string sname = "stage" + std::to_string(si + 1);
    if (st.kind == BlockKind::dense) {
      if (ch != st.channels || st.stride > 1) {
        sp.transition = TransitionPlan{sname + ".transition", ch, st.channels, st.stride};
        ch = st.channels;
      }
      for (std::size_t b = 0; b < st.num_blocks; ++b) {
        sp.blocks.push_back(dense_block_plan(sname + ".block" + std::to_string(b), ch, st.growth, st.skip));
        ch = sp.blocks.back().out_ch;
      }
    } else {
      for (std::size_t b = 0; b < st.num_blocks; ++b) {
        const std::size_t pool = b == 0 ? st.stride : 1;
        const std::string bname = sname + ".block" + std::to_string(b);
        if (st.kind == BlockKind::residual)
          sp.blocks.push_back(residual_block_plan(bname, ch, st.channels, pool, st.skip, st.bottleneck));
        else
          sp.blocks.push_back(repvgg_block_plan(bname, ch, st.channels, pool, st.skip));
        ch = st.channels;
      }
    }
    sp.out_ch = ch;
  }
  p.head_bn = spec.stages[3].kind != BlockKind::repvgg;
  p.head_ch = ch;
  return p;
}

// ---------------------------------------------------------------- parameter enumeration

enum class ParamRole { conv_weight, linear_weight, bias, gamma, beta, running_mean, running_var };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamRole role;
  std::size_t fan_in = 1;

  bool learnable() const { return role != ParamRole::running_mean && role != ParamRole::running_var; }
};

inline void push_bn(std::vector<ParamInfo>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".gamma", {c}, ParamRole::gamma});
  out.push_back({prefix + ".beta", {c}, ParamRole::beta});
  out.push_back({prefix + ".running_mean", {c}, ParamRole::running_mean});
  out.push_back({prefix + ".running_var", {c}, ParamRole::running_var});
}

inline void push_conv(std::vector<ParamInfo>& out, const std::string& name, std::size_t o, std::size_t c,
                      std::size_t k) {
  out.push_back({name, {o, c, k, k}, ParamRole::conv_weight, c * k * k});
}

inline std::vector<ParamInfo> block_params(const BlockPlan& b) {
  std::vector<ParamInfo> out;
  const std::string& p = b.prefix;
  switch (b.kind) {
    case BlockKind::residual:
      if (b.bottleneck) {
        push_bn(out, p + ".bn1", b.in_ch);
        push_conv(out, p + ".conv1.weight", b.mid_ch, b.in_ch, 1);
        push_bn(out, p + ".bn2", b.mid_ch);
        push_conv(out, p + ".conv2.weight", b.mid_ch, b.mid_ch, 3);
        push_bn(out, p + ".bn3", b.mid_ch);
        push_conv(out, p + ".conv3.weight", b.out_ch, b.mid_ch, 1);
      } else {
        push_bn(out, p + ".bn1", b.in_ch);
        push_conv(out, p + ".conv1.weight", b.out_ch, b.in_ch, 3);
        push_bn(out, p + ".bn2", b.out_ch);
        push_conv(out, p + ".conv2.weight", b.out_ch, b.out_ch, 3);
      }
      if (b.projection) push_conv(out, p + ".proj.weight", b.out_ch, b.in_ch, 1);
      break;
    case BlockKind::dense:
      push_bn(out, p + ".bn", b.in_ch);
      push_conv(out, p + ".conv.weight", b.growth, b.in_ch, 3);
      break;
    case BlockKind::repvgg:
      push_conv(out, p + ".conv3.weight", b.out_ch, b.in_ch, 3);
      push_bn(out, p + ".bn3", b.out_ch);
      push_conv(out, p + ".conv1.weight", b.out_ch, b.in_ch, 1);
      push_bn(out, p + ".bn1", b.out_ch);
      if (b.identity) push_bn(out, p + ".bn0", b.in_ch);
      break;
  }
  return out;
}

inline std::vector<ParamInfo> transition_params(const TransitionPlan& t) {
  std::vector<ParamInfo> out;
  push_bn(out, t.prefix + ".bn", t.in_ch);
  push_conv(out, t.prefix + ".conv.weight", t.out_ch, t.in_ch, 1);
  return out;
}

inline std::vector<ParamInfo> network_params(const NetworkPlan& plan) {
  std::vector<ParamInfo> out;
  push_conv(out, "stem.conv.weight", plan.stem_ch, plan.in_ch, plan.stem_kernel);
  for (const auto& st : plan.stages) {
    if (st.transition) {
      auto t = transition_params(*st.transition);
      out.insert(out.end(), t.begin(), t.end());
    }
    for (const auto& b : st.blocks) {
      auto bp = block_params(b);
      out.insert(out.end(), bp.begin(), bp.end());
    }
  }
  if (plan.head_bn) push_bn(out, "head.bn", plan.head_ch);
  out.push_back({"head.fc.weight", {plan.num_classes, plan.head_ch}, ParamRole::linear_weight, plan.head_ch});
  out.push_back({"head.fc.bias", {plan.num_classes}, ParamRole::bias});
  return out;
}

inline std::vector<ParamInfo> network_params(const NetworkSpec& spec) { return network_params(make_plan(spec)); }

inline std::size_t parameter_count(const std::vector<ParamInfo>& ps, bool learnable_only = true) {
  std::size_t n = 0;
  for (const auto& p : ps)
    if (!learnable_only || p.learnable()) n += shape_numel(p.shape);
  return n;
}

inline std::size_t parameter_count(const NetworkSpec& spec, bool learnable_only = true) {
  return parameter_count(network_params(spec), learnable_only);
}

inline std::set<std::string> parameter_names(const std::vector<ParamInfo>& ps) {
  std::set<std::string> s;
  for (const auto& p : ps) s.insert(p.name);
  return s;
}

// ---------------------------------------------------------------- ModelParams

template <Scalar T>
class ModelParams {
 public:
  std::map<std::string, Tensor<T>> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IntegrityError("parameter '" + name + "' missing from parameter set");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ModelParams&>(*this).at(name));
  }

  std::set<std::string> names() const {
    std::set<std::string> s;
    for (const auto& [k, v] : tensors) s.insert(k);
    return s;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors) n += v.size();
    return n;
  }

  bool bitwise_equal(const ModelParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (const auto& [k, v] : tensors) {
      auto it = o.tensors.find(k);
      if (it == o.tensors.end() || !v.bitwise_equal(it->second)) return false;
    }
    return true;
  }

  template <Scalar U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }
};

// He-style fan-in normal init for conv kernels, N(0, 1/fan_in) for the
// classifier, zero biases, BN gamma=1 beta=0 mean=0 var=1. Each tensor draws
// from a stream keyed by its name, so two specs sharing a tensor name and
// shape initialise it identically from the same seed.
template <Scalar T>
ModelParams<T> init_params(const std::vector<ParamInfo>& infos, const Rng& rng) {
  ModelParams<T> mp;
  for (const auto& info : infos) {
    Tensor<T> t(info.shape);
    switch (info.role) {
      case ParamRole::conv_weight: {
        Rng r = rng.split(info.name);
        t = Tensor<T>::randn(info.shape, r, std::sqrt(2.0 / static_cast<double>(info.fan_in)));
        break;
      }
      case ParamRole::linear_weight: {
        Rng r = rng.split(info.name);
        t = Tensor<T>::randn(info.shape, r, std::sqrt(1.0 / static_cast<double>(info.fan_in)));
        break;
      }
      case ParamRole::gamma:
      case ParamRole::running_var:
        t = Tensor<T>::ones(info.shape);
        break;
      default:
        break;
    }
    mp.tensors.emplace(info.name, std::move(t));
  }
  return mp;
}

template <Scalar T>
ModelParams<T> build_network(const NetworkSpec& spec, const Rng& rng) {
  return init_params<T>(network_params(spec), rng);
}

// Exact name and shape agreement between a parameter set and its spec.
template <Scalar T>
void check_integrity(const std::vector<ParamInfo>& expected, const ModelParams<T>& params) {
  std::vector<std::string> offenders;
  std::set<std::string> seen;
  for (const auto& info : expected) {
    seen.insert(info.name);
    auto it = params.tensors.find(info.name);
    if (it == params.tensors.end())
      offenders.push_back("missing " + info.name);
    else if (it->second.shape() != info.shape)
      offenders.push_back(info.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                          shape_str(info.shape));
  }
  for (const auto& [k, v] : params.tensors)
    if (!seen.count(k)) offenders.push_back("unexpected " + k);
  if (!offenders.empty()) {
    std::string msg = "parameter set does not match spec:";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw IntegrityError(msg);
  }
}

template <Scalar T>
void check_integrity(const NetworkSpec& spec, const ModelParams<T>& params) {
  check_integrity(network_params(spec), params);
}

}  // namespace mirage::nn
