#pragma once

// Dual-path check that a merged RepVGG conv reproduces the multi-branch block,
// in value and in input gradient, on random inputs.

#include <string>

#include "mirage/nn/blocks.hpp"

namespace mirage::reparam {

struct ReparamReport {
  std::size_t samples = 0;
  double max_forward_rel_err = 0.0;
  double max_input_grad_rel_err = 0.0;
  std::string max_param_grad_note =
      "kernel gradients are not compared; only input gradients reach the attack latent";
  double tolerance = 0.0;
  bool pass = false;
};

// || a - b ||_inf / max(||a||_inf, ||b||_inf, 1e-12)
template <Scalar T>
double rel_inf_err(const Tensor<T>& a, const Tensor<T>& b) {
  return kern::max_rel_diff(a, b);
}

// Pre-ReLU branch sum f(z) of the training-time block in eval mode.
template <Scalar T>
ag::Var<T> branch_sum(nn::Context<T>& ctx, const nn::BlockPlan& b, const ag::Var<T>& z) {
  return nn::repvgg_block(ctx, b, z, true).pre;
}

// Samples z ~ N(0,1) of shape [batch, in_ch, h, w] and compares, per sample,
//   f(z) vs z * W_hat + b_hat, and d sum(f)/dz vs d sum(f_hat)/dz.
template <Scalar T>
ReparamReport verify_equivalence(const nn::BlockPlan& b, const nn::ModelParams<T>& params,
                                 const MergedConv<T>& merged, std::size_t samples, Rng& rng, double tol,
                                 std::size_t h, std::size_t w, std::size_t batch = 1, T eps = T(1e-5)) {
  ReparamReport r;
  r.samples = samples;
  r.tolerance = tol;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto z = Tensor<T>::randn({batch, b.in_ch, h, w}, rng);

    ag::Graph<T> g1;
    nn::Context<T> ctx(g1, params, nn::Mode::eval, false, eps);
    auto z1 = g1.leaf(z);
    auto f = branch_sum(ctx, b, z1);
    const auto gr1 = ag::backward(g1, ag::sum(f).id);

    ag::Graph<T> g2;
    auto z2 = g2.leaf(z);
    auto zp = b.pool > 1 ? ag::avgpool2d(z2, b.pool) : z2;
    auto fh = ag::conv2d(zp, g2.constant(merged.weight), g2.constant(merged.bias), b.conv_stride, 1);
    const auto gr2 = ag::backward(g2, ag::sum(fh).id);

    if (f.shape() != fh.shape()) {
      r.max_forward_rel_err = std::numeric_limits<double>::infinity();
      r.max_input_grad_rel_err = std::numeric_limits<double>::infinity();
      break;
    }
    r.max_forward_rel_err = std::max(r.max_forward_rel_err, rel_inf_err(f.value(), fh.value()));
    r.max_input_grad_rel_err = std::max(r.max_input_grad_rel_err, rel_inf_err(gr1.at(z1), gr2.at(z2)));
  }
  r.pass = r.max_forward_rel_err <= tol && r.max_input_grad_rel_err <= tol;
  if (std::isnan(r.max_forward_rel_err) || std::isnan(r.max_input_grad_rel_err)) r.pass = false;
  return r;
}

}  // namespace mirage::reparam
