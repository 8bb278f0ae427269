#pragma once

// Structural reparameterization of the multi-branch conv + BN block into a
// single 3x3 convolution with bias.

#include <cmath>
#include <optional>
#include <string>

#include "mirage/core/kernels.hpp"
#include "mirage/nn/params.hpp"

namespace mirage::reparam {

enum class BnMode { train, eval };

template <Scalar T>
struct BatchNormState {
  Tensor<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  BnMode mode = BnMode::eval;

  std::size_t channels() const { return gamma.size(); }

  // sigma = sqrt(running_var + eps)
  T sigma(std::size_t c) const { return std::sqrt(running_var[c] + eps); }

  static BatchNormState from_params(const nn::ModelParams<T>& p, const std::string& prefix, T eps,
                                    BnMode mode = BnMode::eval) {
    return BatchNormState{p.at(prefix + ".gamma"),        p.at(prefix + ".beta"),
                          p.at(prefix + ".running_mean"), p.at(prefix + ".running_var"),
                          eps,                            T(0.1),
                          mode};
  }
};

template <Scalar T>
struct FoldedConv {
  Tensor<T> weight;  // [O,C,kh,kw]
  Tensor<T> bias;    // [O]
};

template <Scalar T>
struct MergedConv {
  Tensor<T> weight;  // W_hat [O,C,3,3]
  Tensor<T> bias;    // b_hat [O]
};

// W_folded[o] = (gamma_o / sigma_o) * W[o];  b_folded[o] = beta_o - mu_o * gamma_o / sigma_o.
template <Scalar T>
FoldedConv<T> fold_bn(const Tensor<T>& w, const BatchNormState<T>& bn) {
  if (bn.mode != BnMode::eval)
    throw ContractError("fold_bn: batch norm must be in eval mode (folding uses accumulated statistics)");
  if (w.rank() != 4) throw DimensionError("fold_bn: kernel must be rank 4, got " + shape_str(w.shape()));
  const std::size_t o = w.extent(0);
  if (bn.channels() != o)
    throw DimensionError("fold_bn: kernel axis 0 (" + std::to_string(o) + ") != batch-norm channels (" +
                         std::to_string(bn.channels()) + ")");
  const std::size_t per = w.size() / o;
  FoldedConv<T> f{Tensor<T>(w.shape()), Tensor<T>({o})};
  for (std::size_t c = 0; c < o; ++c) {
    const T sigma = bn.sigma(c);
    const T s = bn.gamma[c] / sigma;
    for (std::size_t i = 0; i < per; ++i) f.weight[c * per + i] = s * w[c * per + i];
    f.bias[c] = bn.beta[c] - bn.running_mean[c] * bn.gamma[c] / sigma;
  }
  return f;
}

// The identity map as a [C,C,1,1] kernel.
template <Scalar T>
Tensor<T> identity_as_1x1(std::size_t channels) {
  if (channels == 0) throw ContractError("identity_as_1x1: channels must be >= 1");
  Tensor<T> k({channels, channels, 1, 1});
  for (std::size_t i = 0; i < channels; ++i) k[i * channels + i] = T(1);
  return k;
}

// Places a 1x1 kernel at the centre of a zero 3x3 kernel.
template <Scalar T>
Tensor<T> pad_1x1_to_3x3(const Tensor<T>& w) {
  if (w.rank() != 4 || w.extent(2) != 1 || w.extent(3) != 1)
    throw DimensionError("pad_1x1_to_3x3: expected [O,C,1,1] kernel, got " + shape_str(w.shape()));
  const std::size_t o = w.extent(0), c = w.extent(1);
  Tensor<T> out({o, c, 3, 3});
  for (std::size_t i = 0; i < o * c; ++i) out[i * 9 + 4] = w[i];
  return out;
}

template <Scalar T>
struct RepvggBranches {
  Tensor<T> w3;
  BatchNormState<T> bn3;
  Tensor<T> w1;
  BatchNormState<T> bn1;
  std::optional<BatchNormState<T>> bn0;  // identity branch; absent on shape-changing blocks
  T identity_scale = T(1);               // skip scale of the identity branch

  static RepvggBranches from_params(const nn::ModelParams<T>& p, const std::string& prefix, T eps,
                                    T identity_scale = T(1)) {
    RepvggBranches b{p.at(prefix + ".conv3.weight"),
                     BatchNormState<T>::from_params(p, prefix + ".bn3", eps),
                     p.at(prefix + ".conv1.weight"),
                     BatchNormState<T>::from_params(p, prefix + ".bn1", eps),
                     std::nullopt,
                     identity_scale};
    if (p.contains(prefix + ".bn0.gamma")) b.bn0 = BatchNormState<T>::from_params(p, prefix + ".bn0", eps);
    return b;
  }
};

// W_hat = fold(W3) + pad(fold(W1)) + pad(fold(I)); b_hat = sum of folded biases.
// Kernel and bias terms are added in that branch order.
template <Scalar T>
MergedConv<T> merge_repvgg_block(const RepvggBranches<T>& b) {
  if (b.w3.rank() != 4 || b.w3.extent(2) != 3 || b.w3.extent(3) != 3)
    throw DimensionError("merge_repvgg_block: 3x3 branch kernel has shape " + shape_str(b.w3.shape()));
  const FoldedConv<T> f3 = fold_bn(b.w3, b.bn3);
  const FoldedConv<T> f1 = fold_bn(b.w1, b.bn1);
  MergedConv<T> m{kern::add(f3.weight, pad_1x1_to_3x3(f1.weight)), kern::add(f3.bias, f1.bias)};
  if (b.bn0) {
    const std::size_t c = b.w3.extent(1);
    if (b.w3.extent(0) != c)
      throw ConfigError("merge_repvgg_block: identity branch present on a channel-changing block");
    FoldedConv<T> f0 = fold_bn(identity_as_1x1<T>(c), *b.bn0);
    if (b.identity_scale != T(1)) {
      f0.weight = kern::scale(f0.weight, b.identity_scale);
      f0.bias = kern::scale(f0.bias, b.identity_scale);
    }
    kern::accumulate(m.weight, pad_1x1_to_3x3(f0.weight));
    kern::accumulate(m.bias, f0.bias);
  }
  return m;
}

}  // namespace mirage::reparam
