#pragma once

// Whole-network forward: stem conv + pool, four stages, optional head
// BN-ReLU, global average pooling and a linear classifier.

#include "mirage/nn/blocks.hpp"

namespace mirage::nn {

template <Scalar T>
struct NetworkOutput {
  ag::Var<T> logits;    // [N, num_classes]
  ag::Var<T> features;  // [N, head_ch], the penultimate (pooled) activations
  std::vector<ag::Var<T>> stage_outputs;
};

template <Scalar T>
NetworkOutput<T> network_forward(Context<T>& ctx, const NetworkPlan& plan, const ag::Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != plan.in_ch || s[2] != plan.resolution || s[3] != plan.resolution)
    throw DimensionError("network input must be [N," + std::to_string(plan.in_ch) + "," +
                         std::to_string(plan.resolution) + "," + std::to_string(plan.resolution) + "], got " +
                         shape_str(s));
  auto h = ag::conv2d(x, ctx.param("stem.conv.weight"), 1, plan.stem_kernel / 2);
  h = maybe_pool(h, plan.stem_pool);
  std::vector<ag::Var<T>> stage_outputs;
  for (const auto& st : plan.stages) {
    if (st.transition) h = transition(ctx, *st.transition, h);
    for (const auto& b : st.blocks) {
      switch (b.kind) {
        case BlockKind::residual:
          h = residual_block(ctx, b, h).out;
          break;
        case BlockKind::dense:
          h = dense_block(ctx, b, h);
          break;
        case BlockKind::repvgg:
          h = repvgg_block(ctx, b, h).out;
          break;
      }
    }
    stage_outputs.push_back(h);
  }
  if (plan.head_bn) h = bn_relu(ctx, "head.bn", h);
  auto f = ag::global_avgpool(h);
  auto logits = ag::linear(f, ctx.param("head.fc.weight"), ctx.param("head.fc.bias"));
  return {logits, f, std::move(stage_outputs)};
}

// Tensor-level eval-mode forward. Pure: params are not touched.
template <Scalar T>
NetworkOutput<T> network_forward(ag::Graph<T>& g, const NetworkPlan& plan, const ModelParams<T>& params,
                                 const ag::Var<T>& x, T eps = T(1e-5)) {
  Context<T> ctx(g, params, Mode::eval, false, eps);
  return network_forward(ctx, plan, x);
}

// A spec paired with its resolved plan.
struct Model {
  NetworkSpec spec;
  NetworkPlan plan;
  explicit Model(NetworkSpec s) : spec(std::move(s)), plan(make_plan(spec)) {}
};

// Logits for a batch: eval mode is pure; train mode uses batch statistics and
// updates running statistics in `params`.
template <Scalar T>
Tensor<T> forward(const Model& m, ModelParams<T>& params, const Tensor<T>& batch, Mode mode) {
  ag::Graph<T> g;
  Context<T> ctx(g, params, mode, false, static_cast<T>(m.spec.bn_eps), static_cast<T>(m.spec.bn_momentum));
  return network_forward(ctx, m.plan, g.constant(batch)).logits.value();
}

template <Scalar T>
Tensor<T> forward(const Model& m, const ModelParams<T>& params, const Tensor<T>& batch) {
  ag::Graph<T> g;
  return network_forward(g, m.plan, params, g.constant(batch), static_cast<T>(m.spec.bn_eps)).logits.value();
}

template <Scalar T>
Tensor<T> features(const Model& m, const ModelParams<T>& params, const Tensor<T>& batch) {
  ag::Graph<T> g;
  return network_forward(g, m.plan, params, g.constant(batch), static_cast<T>(m.spec.bn_eps)).features.value();
}

// Eval-mode logits in chunks of `chunk` samples. Equal to one full-batch call
// because every kernel accumulates per sample in a fixed order.
template <Scalar T>
Tensor<T> forward_chunked(const Model& m, const ModelParams<T>& params, const Tensor<T>& batch, bool want_features,
                          std::size_t chunk = 128) {
  const std::size_t n = batch.extent(0), per = batch.size() / n;
  std::vector<T> out;
  std::size_t width = 0;
  for (std::size_t i = 0; i < n; i += chunk) {
    const std::size_t c = std::min(chunk, n - i);
    Shape s = batch.shape();
    s[0] = c;
    Tensor<T> part(s, std::vector<T>(batch.ptr() + i * per, batch.ptr() + (i + c) * per));
    Tensor<T> r = want_features ? features(m, params, part) : forward(m, params, part);
    width = r.extent(1);
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return Tensor<T>({n, width}, std::move(out));
}

}  // namespace mirage::nn
