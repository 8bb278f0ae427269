#pragma once

// Split of a residual block's input gradient into the skip pathway and the
// residual-branch pathway:
//   dL/dz = k * dL/dz_{i+1} * d proj/dz  +  dL/dz_{i+1} * dg/dz

#include <optional>
#include <type_traits>

#include "mirage/nn/blocks.hpp"

namespace mirage::ag {

template <Scalar T>
struct GradientDecomposition {
  Tensor<T> passthrough;  // through the skip path; exactly zero when removed
  Tensor<T> through_g;    // through the residual branch g
  Tensor<T> total;        // backward() through the block with a single shared input
};

// `upstream` is dL/d(block output); defaults to ones (L = sum(output)).
template <Scalar T>
GradientDecomposition<T> gradient_decomposition(const nn::BlockPlan& b, const nn::ModelParams<T>& params,
                                                const Tensor<T>& z, nn::Mode mode = nn::Mode::eval,
                                                const std::optional<std::type_identity_t<Tensor<T>>>& upstream = std::nullopt,
                                                T eps = T(1e-5)) {
  if (b.kind != nn::BlockKind::residual)
    throw ContractError(std::string("gradient_decomposition: block '") + b.prefix + "' is " +
                        nn::block_kind_name(b.kind) + ", expected residual");
  auto seed_for = [&](const Var<T>& out) {
    if (!upstream) return Tensor<T>::ones(out.shape());
    if (upstream->shape() != out.shape())
      throw DimensionError("gradient_decomposition: upstream gradient " + shape_str(upstream->shape()) +
                           " != block output " + shape_str(out.shape()));
    return *upstream;
  };

  GradientDecomposition<T> r;
  {
    Graph<T> g;
    nn::Context<T> ctx(g, params, mode, false, eps);
    auto zg = g.leaf(z);
    auto zs = g.leaf(z);
    auto out = nn::residual_block(ctx, b, zg, zs).out;
    const auto grads = backward(g, out.id, seed_for(out));
    r.through_g = grads.has(zg) ? grads.at(zg) : Tensor<T>(z.shape());
    r.passthrough = grads.has(zs) ? grads.at(zs) : Tensor<T>(z.shape());
  }
  {
    Graph<T> g;
    nn::Context<T> ctx(g, params, mode, false, eps);
    auto zv = g.leaf(z);
    auto out = nn::residual_block(ctx, b, zv).out;
    const auto grads = backward(g, out.id, seed_for(out));
    r.total = grads.has(zv) ? grads.at(zv) : Tensor<T>(z.shape());
  }
  return r;
}

}  // namespace mirage::ag
