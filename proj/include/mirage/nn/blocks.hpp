#pragma once

// The block zoo: pre-activation residual blocks (additive skip), dense blocks
// (concatenative skip) and RepVGG multi-branch blocks.

#include <optional>

#include "mirage/nn/context.hpp"
#include "mirage/reparam/fold.hpp"

namespace mirage::nn {

template <Scalar T>
ag::Var<T> maybe_pool(const ag::Var<T>& z, std::size_t pool) {
  return pool > 1 ? ag::avgpool2d(z, pool) : z;
}

template <Scalar T>
ag::Var<T> bn_relu(Context<T>& ctx, const std::string& prefix, const ag::Var<T>& x) {
  return ag::relu(ctx.batch_norm(prefix, x));
}

template <Scalar T>
struct ResidualOutput {
  ag::Var<T> out;
  ag::Var<T> g;                    // residual branch g(z)
  std::optional<ag::Var<T>> skip;  // k * proj(z) or k * z; absent when removed
};

// Pre-activation residual block. With z' the (optionally pooled) input:
//   Full      g(z') + proj(z')
//   Scaled(k) g(z') + k * proj(z')
//   Removed   g(z')
// proj is the identity when the block keeps its shape. No activation follows
// the sum.
// `z_skip` feeds the skip path and `z` the residual branch; they are normally
// the same node. Passing distinct leaves separates the two gradient pathways.
template <Scalar T>
ResidualOutput<T> residual_block(Context<T>& ctx, const BlockPlan& b, const ag::Var<T>& z,
                                 const ag::Var<T>& z_skip) {
  if (b.kind != BlockKind::residual) throw ContractError("residual_block: plan '" + b.prefix + "' is not residual");
  if (z.value().rank() != 4 || z.extent(1) != b.in_ch)
    throw DimensionError("residual_block " + b.prefix + ": input axis 1 has " +
                         std::to_string(z.value().rank() == 4 ? z.extent(1) : 0) + " channels, expected " +
                         std::to_string(b.in_ch));
  const std::string& p = b.prefix;
  auto zp = maybe_pool(z, b.pool);
  ag::Var<T> h;
  if (b.bottleneck) {
    h = ag::conv2d(bn_relu(ctx, p + ".bn1", zp), ctx.param(p + ".conv1.weight"), 1, 0);
    h = ag::conv2d(bn_relu(ctx, p + ".bn2", h), ctx.param(p + ".conv2.weight"), 1, 1);
    h = ag::conv2d(bn_relu(ctx, p + ".bn3", h), ctx.param(p + ".conv3.weight"), 1, 0);
  } else {
    h = ag::conv2d(bn_relu(ctx, p + ".bn1", zp), ctx.param(p + ".conv1.weight"), 1, 1);
    h = ag::conv2d(bn_relu(ctx, p + ".bn2", h), ctx.param(p + ".conv2.weight"), 1, 1);
  }
  if (!b.skip.has_skip_path()) return {h, h, std::nullopt};
  const auto sp = z_skip.id == z.id ? zp : maybe_pool(z_skip, b.pool);
  ag::Var<T> s = b.projection ? ag::conv2d(sp, ctx.param(p + ".proj.weight"), 1, 0) : sp;
  if (s.shape() != h.shape())
    throw DimensionError("residual_block " + p + ": skip path " + shape_str(s.shape()) + " vs residual " +
                         shape_str(h.shape()));
  if (b.skip.kind() == SkipMode::Kind::scaled) s = ag::scale(s, static_cast<T>(b.skip.factor()));
  return {ag::add(h, s), h, s};
}

template <Scalar T>
ResidualOutput<T> residual_block(Context<T>& ctx, const BlockPlan& b, const ag::Var<T>& z) {
  return residual_block(ctx, b, z, z);
}

// Dense block: g(z) = conv3x3(relu(bn(z))) producing `growth` channels.
//   Full      [z, g(z)]
//   Scaled(k) [z[:, 0:floor(k n)], g(z)]
//   Removed   g(z)
template <Scalar T>
ag::Var<T> dense_block(Context<T>& ctx, const BlockPlan& b, const ag::Var<T>& z) {
  if (b.kind != BlockKind::dense) throw ContractError("dense_block: plan '" + b.prefix + "' is not dense");
  if (z.value().rank() != 4 || z.extent(1) != b.in_ch)
    throw DimensionError("dense_block " + b.prefix + ": input channels != " + std::to_string(b.in_ch));
  auto g = ag::conv2d(bn_relu(ctx, b.prefix + ".bn", z), ctx.param(b.prefix + ".conv.weight"), 1, 1);
  if (b.kept == 0) return g;
  auto kept = b.kept == b.in_ch ? z : ag::slice_channels(z, 0, b.kept);
  return ag::concat_channels(kept, g);
}

// BN -> ReLU -> 1x1 conv, then average pooling.
template <Scalar T>
ag::Var<T> transition(Context<T>& ctx, const TransitionPlan& t, const ag::Var<T>& z) {
  auto h = ag::conv2d(bn_relu(ctx, t.prefix + ".bn", z), ctx.param(t.prefix + ".conv.weight"), 1, 0);
  return maybe_pool(h, t.pool);
}

template <Scalar T>
struct RepvggOutput {
  ag::Var<T> out;  // ReLU(pre)
  ag::Var<T> pre;  // branch sum (training time) or merged conv (inference time)
};

// RepVGG block on the pooled input z':
//   training time   BN3(z' * W3) + BN1(z' * W1) [+ k * BN0(z')], then ReLU
//   inference time  z' * W_hat + b_hat, then ReLU (requires eval-mode BN)
// `b.conv_stride` strides both convolutions (3x3 with pad 1, 1x1 with pad 0).
template <Scalar T>
RepvggOutput<T> repvgg_block(Context<T>& ctx, const BlockPlan& b, const ag::Var<T>& z, bool training_time = true) {
  if (b.kind != BlockKind::repvgg) throw ContractError("repvgg_block: plan '" + b.prefix + "' is not repvgg");
  const std::string& p = b.prefix;
  const std::size_t conv_stride = b.conv_stride;
  const bool has_bn0 = ctx.params().contains(p + ".bn0.gamma");
  if (has_bn0 && (b.in_ch != b.out_ch || conv_stride != 1 || b.pool != 1))
    throw ConfigError("repvgg_block " + p + ": identity branch (bn0) present on a shape-changing block");
  if (b.identity && !has_bn0) throw IntegrityError("repvgg_block " + p + ": identity branch parameters missing");
  auto zp = maybe_pool(z, b.pool);
  const T k = static_cast<T>(b.skip.factor());
  ag::Var<T> pre;
  if (training_time) {
    auto b3 = ctx.batch_norm(p + ".bn3", ag::conv2d(zp, ctx.param(p + ".conv3.weight"), conv_stride, 1));
    auto b1 = ctx.batch_norm(p + ".bn1", ag::conv2d(zp, ctx.param(p + ".conv1.weight"), conv_stride, 0));
    pre = ag::add(b3, b1);
    if (b.identity) {
      auto b0 = ctx.batch_norm(p + ".bn0", zp);
      if (b.skip.kind() == SkipMode::Kind::scaled) b0 = ag::scale(b0, k);
      pre = ag::add(pre, b0);
    }
  } else {
    if (ctx.mode() != Mode::eval)
      throw ContractError("repvgg_block " + p + ": the inference-time form requires eval-mode batch norm");
    const auto merged = reparam::merge_repvgg_block(reparam::RepvggBranches<T>::from_params(
        ctx.params(), p, ctx.eps(), b.identity ? k : T(1)));
    auto& g = ctx.graph();
    pre = ag::conv2d(zp, g.constant(merged.weight), g.constant(merged.bias), conv_stride, 1);
  }
  return {ag::relu(pre), pre};
}

// ---------------------------------------------------------------- tensor-level wrappers

template <Scalar T>
ModelParams<T> init_block(const BlockPlan& b, const Rng& rng) {
  return init_params<T>(block_params(b), rng);
}

template <Scalar T>
Tensor<T> residual_block_forward(const BlockPlan& b, const ModelParams<T>& params, const Tensor<T>& z,
                                 Mode mode = Mode::eval, T eps = T(1e-5)) {
  ag::Graph<T> g;
  Context<T> ctx(g, params, mode, false, eps);
  return residual_block(ctx, b, g.constant(z)).out.value();
}

template <Scalar T>
Tensor<T> dense_block_forward(const BlockPlan& b, const ModelParams<T>& params, const Tensor<T>& z,
                              Mode mode = Mode::eval, T eps = T(1e-5)) {
  ag::Graph<T> g;
  Context<T> ctx(g, params, mode, false, eps);
  return dense_block(ctx, b, g.constant(z)).value();
}

template <Scalar T>
Tensor<T> repvgg_block_forward(const BlockPlan& b, const ModelParams<T>& params, const Tensor<T>& z,
                               bool training_time = true, T eps = T(1e-5)) {
  ag::Graph<T> g;
  Context<T> ctx(g, params, Mode::eval, false, eps);
  return repvgg_block(ctx, b, g.constant(z), training_time).out.value();
}

}  // namespace mirage::nn
