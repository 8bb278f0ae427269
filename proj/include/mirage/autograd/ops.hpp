#pragma once

// Differentiable operations recorded on a Graph.

#include <cmath>
#include <limits>

#include "mirage/autograd/graph.hpp"

namespace mirage::ag {

namespace detail {

template <Scalar T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (a.graph != b.graph || a.graph == nullptr)
    throw ContractError("operands belong to different graphs");
  return *a.graph;
}

template <Scalar T>
Graph<T>& graph_of(const Var<T>& a) {
  if (!a.graph) throw ContractError("variable is not attached to a graph");
  return *a.graph;
}

}  // namespace detail

template <Scalar T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  NodeId ia = a.id, ib = b.id;
  return g.record("add", kern::add(a.value(), b.value()), {ia, ib},
                  [ia, ib](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, go);
                    Graph<T>::accumulate(gr, gs, ib, go);
                  });
}

template <Scalar T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  NodeId ia = a.id, ib = b.id;
  return g.record("sub", kern::sub(a.value(), b.value()), {ia, ib},
                  [ia, ib](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, go);
                    Graph<T>::accumulate(gr, gs, ib, kern::scale(go, T(-1)));
                  });
}

template <Scalar T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  NodeId ia = a.id, ib = b.id;
  return g.record("mul", kern::mul(a.value(), b.value()), {ia, ib},
                  [ia, ib](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    if (gr.requires_grad(ia)) Graph<T>::accumulate(gr, gs, ia, kern::mul(go, gr.value(ib)));
                    if (gr.requires_grad(ib)) Graph<T>::accumulate(gr, gs, ib, kern::mul(go, gr.value(ia)));
                  });
}

template <Scalar T>
Var<T> scale(const Var<T>& a, T s) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  return g.record("scale", kern::scale(a.value(), s), {ia},
                  [ia, s](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, kern::scale(go, s));
                  });
}

template <Scalar T>
Var<T> reshape(const Var<T>& a, Shape s) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  Shape from = a.shape();
  return g.record("reshape", a.value().reshaped(std::move(s)), {ia},
                  [ia, from](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, go.reshaped(from));
                  });
}

// Scalar sum of all elements (left to right).
template <Scalar T>
Var<T> sum(const Var<T>& a) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  Shape s = a.shape();
  return g.record("sum", Tensor<T>::scalar(kern::sum(a.value())), {ia},
                  [ia, s](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, Tensor<T>::full(s, go[0]));
                  });
}

template <Scalar T>
Var<T> mean(const Var<T>& a) {
  const T inv = T(1) / static_cast<T>(a.value().size());
  return scale(sum(a), inv);
}

// sum(a * weights) with constant weights.
template <Scalar T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
  auto& g = detail::graph_of(a);
  return sum(mul(a, g.constant(weights)));
}

template <Scalar T>
Var<T> relu(const Var<T>& a) {
  auto& g = detail::graph_of(a);
  g.note_kinks(a.value());
  Tensor<T> out(a.shape());
  const T* pa = a.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] < T(0) ? T(0) : pa[i];
  NodeId ia = a.id;
  // Gradient at exactly zero is defined as zero. NaN propagates in both directions.
  return g.record("relu", std::move(out), {ia},
                  [ia](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const Tensor<T>& x = gr.value(ia);
                    Tensor<T> gi(x.shape());
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = x[i] > T(0) || std::isnan(x[i]) ? go[i] : T(0);
                    Graph<T>::accumulate(gr, gs, ia, std::move(gi));
                  });
}

template <Scalar T>
Var<T> sigmoid(const Var<T>& a) {
  auto& g = detail::graph_of(a);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  NodeId ia = a.id;
  return g.record("sigmoid", std::move(out), {ia},
                  [ia](const Graph<T>& gr, NodeId self, const Tensor<T>& go, GradSlots<T>& gs) {
                    const Tensor<T>& y = gr.value(self);
                    Tensor<T> gi(y.shape());
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = go[i] * y[i] * (T(1) - y[i]);
                    Graph<T>::accumulate(gr, gs, ia, std::move(gi));
                  });
}

template <Scalar T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, std::size_t stride, std::size_t pad) {
  auto& g = detail::same_graph(x, w);
  if (bias) detail::same_graph(x, *bias);
  Tensor<T> out = kern::conv2d(x.value(), w.value(), bias ? &bias->value() : nullptr, stride, pad);
  NodeId ix = x.id, iw = w.id;
  std::optional<NodeId> ib;
  std::vector<NodeId> parents{ix, iw};
  if (bias) {
    ib = bias->id;
    parents.push_back(bias->id);
  }
  return g.record("conv2d", std::move(out), std::move(parents),
                  [ix, iw, ib, stride, pad](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const Tensor<T>& xv = gr.value(ix);
                    const Tensor<T>& wv = gr.value(iw);
                    if (gr.requires_grad(ix))
                      Graph<T>::accumulate(gr, gs, ix,
                                           kern::conv2d_backward_input(go, wv, xv.shape(), stride, pad));
                    if (gr.requires_grad(iw))
                      Graph<T>::accumulate(gr, gs, iw,
                                           kern::conv2d_backward_kernel(go, xv, wv.shape(), stride, pad));
                    if (ib && gr.requires_grad(*ib))
                      Graph<T>::accumulate(gr, gs, *ib, kern::conv2d_backward_bias(go));
                  });
}

template <Scalar T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
  return conv2d(x, w, static_cast<const Var<T>*>(nullptr), stride, pad);
}

template <Scalar T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, &bias, stride, pad);
}

// y[N,O] = x[N,F] * W[O,F]^T + b[O]
template <Scalar T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto& g = detail::same_graph(x, w);
  detail::same_graph(x, b);
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2)
    throw DimensionError("linear: expected x [N,F] and W [O,F], got " + shape_str(xv.shape()) + " and " +
                         shape_str(wv.shape()));
  if (xv.extent(1) != wv.extent(1))
    throw DimensionError("linear: axis 1 of x (" + std::to_string(xv.extent(1)) + ") != axis 1 of W (" +
                         std::to_string(wv.extent(1)) + ")");
  if (b.value().rank() != 1 || b.value().extent(0) != wv.extent(0))
    throw DimensionError("linear: bias shape " + shape_str(b.shape()) + " != [" +
                         std::to_string(wv.extent(0)) + "]");
  const std::size_t n = xv.extent(0), o = wv.extent(0);
  Tensor<T> out = kern::matmul(xv, kern::transpose2d(wv));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) out[i * o + j] += b.value()[j];
  NodeId ix = x.id, iw = w.id, ib = b.id;
  return g.record("linear", std::move(out), {ix, iw, ib},
                  [ix, iw, ib](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& xv = gr.value(ix);
                    const auto& wv = gr.value(iw);
                    if (gr.requires_grad(ix)) Graph<T>::accumulate(gr, gs, ix, kern::matmul(go, wv));
                    if (gr.requires_grad(iw))
                      Graph<T>::accumulate(gr, gs, iw, kern::matmul(kern::transpose2d(go), xv));
                    if (gr.requires_grad(ib)) {
                      const std::size_t n = go.extent(0), o = go.extent(1);
                      Tensor<T> gb({o});
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < o; ++j) gb[j] += go[i * o + j];
                      Graph<T>::accumulate(gr, gs, ib, std::move(gb));
                    }
                  });
}

template <Scalar T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  NodeId ia = a.id, ib = b.id;
  const std::size_t ca = a.extent(1);
  return g.record("concat_channels", kern::concat_channels(a.value(), b.value()), {ia, ib},
                  [ia, ib, ca](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    if (gr.requires_grad(ia)) Graph<T>::accumulate(gr, gs, ia, kern::slice_channels(go, 0, ca));
                    if (gr.requires_grad(ib))
                      Graph<T>::accumulate(gr, gs, ib, kern::slice_channels(go, ca, go.extent(1)));
                  });
}

template <Scalar T>
Var<T> slice_channels(const Var<T>& a, std::size_t begin, std::size_t end) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  return g.record("slice_channels", kern::slice_channels(a.value(), begin, end), {ia},
                  [ia, begin, end](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& av = gr.value(ia);
                    Tensor<T> gi(av.shape());
                    const std::size_t n = av.extent(0), c = av.extent(1), k = end - begin;
                    const std::size_t p = av.extent(2) * av.extent(3);
                    for (std::size_t i = 0; i < n; ++i)
                      std::copy_n(go.ptr() + i * k * p, k * p, gi.ptr() + (i * c + begin) * p);
                    Graph<T>::accumulate(gr, gs, ia, std::move(gi));
                  });
}

template <Scalar T>
Var<T> avgpool2d(const Var<T>& a, std::size_t k) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  return g.record("avgpool2d", kern::avgpool2d(a.value(), k), {ia},
                  [ia, k](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, kern::avgpool2d_backward(go, gr.value(ia).shape(), k));
                  });
}

template <Scalar T>
Var<T> global_avgpool(const Var<T>& a) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  return g.record("global_avgpool", kern::global_avgpool(a.value()), {ia},
                  [ia](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& s = gr.value(ia).shape();
                    const std::size_t p = s[2] * s[3];
                    const T inv = T(1) / static_cast<T>(p);
                    Tensor<T> gi(s);
                    for (std::size_t i = 0; i < s[0] * s[1]; ++i)
                      std::fill_n(gi.ptr() + i * p, p, go[i] * inv);
                    Graph<T>::accumulate(gr, gs, ia, std::move(gi));
                  });
}

template <Scalar T>
Var<T> upsample2x(const Var<T>& a) {
  auto& g = detail::graph_of(a);
  NodeId ia = a.id;
  return g.record("upsample2x", kern::upsample2x(a.value()), {ia},
                  [ia](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Graph<T>::accumulate(gr, gs, ia, kern::upsample2x_backward(go, gr.value(ia).shape()));
                  });
}

// ---------------------------------------------------------------- batch norm

namespace detail {

// Channel axis is 1; statistics run over every other axis.
inline void bn_layout(const Shape& s, std::size_t& n, std::size_t& c, std::size_t& p) {
  if (s.size() != 2 && s.size() != 4)
    throw DimensionError("batch_norm: expected rank 2 [N,C] or rank 4 [N,C,H,W], got " + shape_str(s));
  n = s[0];
  c = s[1];
  p = s.size() == 4 ? s[2] * s[3] : 1;
}

}  // namespace detail

template <Scalar T>
struct BatchStats {
  Tensor<T> mean;
  Tensor<T> var;  // biased (divides by count)
};

// Train mode: normalises with batch statistics and backpropagates through them.
template <Scalar T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        BatchStats<T>* stats_out = nullptr) {
  auto& g = detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  std::size_t n, c, p;
  detail::bn_layout(x.shape(), n, c, p);
  if (gamma.value().size() != c || beta.value().size() != c)
    throw DimensionError("batch_norm: gamma/beta extent != channel axis 1 (" + std::to_string(c) + ")");
  const auto& xv = x.value();
  const T count = static_cast<T>(n * p);
  Tensor<T> mu({c}), var({c}), invstd({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < p; ++k) acc += xv[(i * c + ch) * p + k];
    mu[ch] = acc / count;
    T acc2 = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        const T d = xv[(i * c + ch) * p + k] - mu[ch];
        acc2 += d * d;
      }
    var[ch] = acc2 / count;
    invstd[ch] = T(1) / std::sqrt(var[ch] + eps);
  }
  Tensor<T> xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < p; ++k) {
        const std::size_t idx = (i * c + ch) * p + k;
        xhat[idx] = (xv[idx] - mu[ch]) * invstd[ch];
        out[idx] = xhat[idx] * gamma.value()[ch] + beta.value()[ch];
      }
  if (stats_out) *stats_out = BatchStats<T>{mu, var};
  NodeId ix = x.id, ig = gamma.id, ib = beta.id;
  return g.record(
      "batch_norm_train", std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), invstd = std::move(invstd), n, c, p](
          const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
        const auto& gam = gr.value(ig);
        const T count = static_cast<T>(n * p);
        Tensor<T> dg({c}), db({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sg = 0, sb = 0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < p; ++k) {
              const std::size_t idx = (i * c + ch) * p + k;
              sg += go[idx] * xhat[idx];
              sb += go[idx];
            }
          dg[ch] = sg;
          db[ch] = sb;
        }
        if (gr.requires_grad(ix)) {
          Tensor<T> dx(go.shape());
          for (std::size_t ch = 0; ch < c; ++ch) {
            // dxhat = go * gamma; sum(dxhat) = gamma * db; sum(dxhat * xhat) = gamma * dg
            const T k1 = gam[ch] * invstd[ch] / count;
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t k = 0; k < p; ++k) {
                const std::size_t idx = (i * c + ch) * p + k;
                dx[idx] = k1 * ((count * go[idx] - db[ch]) - xhat[idx] * dg[ch]);
              }
          }
          Graph<T>::accumulate(gr, gs, ix, std::move(dx));
        }
        Graph<T>::accumulate(gr, gs, ig, std::move(dg));
        Graph<T>::accumulate(gr, gs, ib, std::move(db));
      });
}

// Eval mode: y = (x - mean) * (gamma / sigma) + beta with sigma = sqrt(var + eps).
// The accumulated statistics are constants.
template <Scalar T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                       const Tensor<T>& running_var, T eps) {
  auto& g = detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  std::size_t n, c, p;
  detail::bn_layout(x.shape(), n, c, p);
  if (gamma.value().size() != c || beta.value().size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw DimensionError("batch_norm: parameter extent != channel axis 1 (" + std::to_string(c) + ")");
  Tensor<T> inv_sigma({c}), s({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_sigma[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    s[ch] = gamma.value()[ch] / std::sqrt(running_var[ch] + eps);
  }
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T m = running_mean[ch], sc = s[ch], b = beta.value()[ch];
      const T* src = xv.ptr() + (i * c + ch) * p;
      T* dst = out.ptr() + (i * c + ch) * p;
      for (std::size_t k = 0; k < p; ++k) dst[k] = (src[k] - m) * sc + b;
    }
  NodeId ix = x.id, ig = gamma.id, ib = beta.id;
  return g.record("batch_norm_eval", std::move(out), {ix, ig, ib},
                  [ix, ig, ib, s = std::move(s), inv_sigma = std::move(inv_sigma), mu = running_mean, n, c, p](
                      const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    if (gr.requires_grad(ix)) {
                      Tensor<T> dx(go.shape());
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          for (std::size_t k = 0; k < p; ++k) {
                            const std::size_t idx = (i * c + ch) * p + k;
                            dx[idx] = go[idx] * s[ch];
                          }
                      Graph<T>::accumulate(gr, gs, ix, std::move(dx));
                    }
                    if (gr.requires_grad(ig) || gr.requires_grad(ib)) {
                      const auto& xv = gr.value(ix);
                      Tensor<T> dg({c}), db({c});
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        T sg = 0, sb = 0;
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t k = 0; k < p; ++k) {
                            const std::size_t idx = (i * c + ch) * p + k;
                            sg += go[idx] * (xv[idx] - mu[ch]) * inv_sigma[ch];
                            sb += go[idx];
                          }
                        dg[ch] = sg;
                        db[ch] = sb;
                      }
                      Graph<T>::accumulate(gr, gs, ig, std::move(dg));
                      Graph<T>::accumulate(gr, gs, ib, std::move(db));
                    }
                  });
}

// ---------------------------------------------------------------- losses

// Row-wise log-softmax of [N, K] logits (max-shifted).
template <Scalar T>
Var<T> log_softmax(const Var<T>& logits) {
  auto& g = detail::graph_of(logits);
  const auto& z = logits.value();
  if (z.rank() != 2) throw DimensionError("log_softmax: expected [N,K], got " + shape_str(z.shape()));
  const std::size_t n = z.extent(0), k = z.extent(1);
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.ptr() + i * k;
    T m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - m);
    const T lse = m + std::log(acc);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  NodeId iz = logits.id;
  return g.record("log_softmax", std::move(out), {iz},
                  [iz, n, k](const Graph<T>& gr, NodeId self, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& y = gr.value(self);
                    Tensor<T> gi(y.shape());
                    for (std::size_t i = 0; i < n; ++i) {
                      T s = 0;
                      for (std::size_t j = 0; j < k; ++j) s += go[i * k + j];
                      for (std::size_t j = 0; j < k; ++j)
                        gi[i * k + j] = go[i * k + j] - std::exp(y[i * k + j]) * s;
                    }
                    Graph<T>::accumulate(gr, gs, iz, std::move(gi));
                  });
}

// out[i] = x[i, index[i]] for [N, K] input.
template <Scalar T>
Var<T> pick(const Var<T>& x, const std::vector<std::size_t>& index) {
  auto& g = detail::graph_of(x);
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("pick: expected [N,K], got " + shape_str(xv.shape()));
  const std::size_t n = xv.extent(0), k = xv.extent(1);
  if (index.size() != n)
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for axis 0 of extent " +
                         std::to_string(n));
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= k)
      throw LabelError("pick: index " + std::to_string(index[i]) + " out of range [0," + std::to_string(k) + ")");
    out[i] = xv[i * k + index[i]];
  }
  NodeId ix = x.id;
  return g.record("pick", std::move(out), {ix},
                  [ix, index, k](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    Tensor<T> gi(gr.value(ix).shape());
                    for (std::size_t i = 0; i < index.size(); ++i) gi[i * k + index[i]] = go[i];
                    Graph<T>::accumulate(gr, gs, ix, std::move(gi));
                  });
}

// Mean cross-entropy of [N, K] logits against integer labels.
template <Scalar T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  return scale(sum(pick(log_softmax(logits), labels)), T(-1) / static_cast<T>(labels.size()));
}

// Per-row mean of squares of a [N, ...] tensor -> [N].
template <Scalar T>
Var<T> row_mean_square(const Var<T>& x) {
  auto& g = detail::graph_of(x);
  const auto& xv = x.value();
  const std::size_t n = xv.extent(0), d = xv.size() / n;
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += xv[i * d + j] * xv[i * d + j];
    out[i] = acc / static_cast<T>(d);
  }
  NodeId ix = x.id;
  return g.record("row_mean_square", std::move(out), {ix},
                  [ix, n, d](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& xv = gr.value(ix);
                    Tensor<T> gi(xv.shape());
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j)
                        gi[i * d + j] = go[i] * T(2) * xv[i * d + j] / static_cast<T>(d);
                    Graph<T>::accumulate(gr, gs, ix, std::move(gi));
                  });
}

// Mean squared error against a constant target.
template <Scalar T>
Var<T> mse(const Var<T>& x, const Tensor<T>& target) {
  auto& g = detail::graph_of(x);
  auto d = sub(x, g.constant(target));
  return mean(mul(d, d));
}

// Smooth total variation per image of a [N,C,H,W] tensor -> [N]:
// (sum of squared horizontal and vertical neighbour differences) / (C*H*W).
template <Scalar T>
Var<T> total_variation(const Var<T>& x) {
  auto& g = detail::graph_of(x);
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("total_variation: expected [N,C,H,W], got " + shape_str(xv.shape()));
  const std::size_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
  const T norm = static_cast<T>(c * h * w);
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = xv.ptr() + (i * c + ch) * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          if (xx + 1 < w) {
            const T d = p[y * w + xx + 1] - p[y * w + xx];
            acc += d * d;
          }
          if (y + 1 < h) {
            const T d = p[(y + 1) * w + xx] - p[y * w + xx];
            acc += d * d;
          }
        }
    }
    out[i] = acc / norm;
  }
  NodeId ix = x.id;
  return g.record("total_variation", std::move(out), {ix},
                  [ix, n, c, h, w, norm](const Graph<T>& gr, NodeId, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& xv = gr.value(ix);
                    Tensor<T> gi(xv.shape());
                    for (std::size_t i = 0; i < n; ++i) {
                      const T sc = T(2) * go[i] / norm;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const T* p = xv.ptr() + (i * c + ch) * h * w;
                        T* q = gi.ptr() + (i * c + ch) * h * w;
                        for (std::size_t y = 0; y < h; ++y)
                          for (std::size_t xx = 0; xx < w; ++xx) {
                            if (xx + 1 < w) {
                              const T d = sc * (p[y * w + xx + 1] - p[y * w + xx]);
                              q[y * w + xx + 1] += d;
                              q[y * w + xx] -= d;
                            }
                            if (y + 1 < h) {
                              const T d = sc * (p[(y + 1) * w + xx] - p[y * w + xx]);
                              q[(y + 1) * w + xx] += d;
                              q[y * w + xx] -= d;
                            }
                          }
                      }
                    }
                    Graph<T>::accumulate(gr, gs, ix, std::move(gi));
                  });
}

// Per-row RMS normalisation of [N, D]: y = x / sqrt(mean(x^2) + eps).
template <Scalar T>
Var<T> row_rms_normalize(const Var<T>& x, T eps = T(1e-6)) {
  auto& g = detail::graph_of(x);
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("row_rms_normalize: expected [N,D], got " + shape_str(xv.shape()));
  const std::size_t n = xv.extent(0), d = xv.extent(1);
  Tensor<T> out(xv.shape());
  std::vector<T> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += xv[i * d + j] * xv[i * d + j];
    r[i] = std::sqrt(acc / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / r[i];
  }
  NodeId ix = x.id;
  // dx = (dy - y * mean(dy . y)) / r
  return g.record("row_rms_normalize", std::move(out), {ix},
                  [ix, n, d, r](const Graph<T>& gr, NodeId self, const Tensor<T>& go, GradSlots<T>& gs) {
                    const auto& y = gr.value(self);
                    Tensor<T> gi({n, d});
                    for (std::size_t i = 0; i < n; ++i) {
                      T dot = 0;
                      for (std::size_t j = 0; j < d; ++j) dot += go[i * d + j] * y[i * d + j];
                      dot /= static_cast<T>(d);
                      for (std::size_t j = 0; j < d; ++j) gi[i * d + j] = (go[i * d + j] - y[i * d + j] * dot) / r[i];
                    }
                    Graph<T>::accumulate(gr, gs, ix, std::move(gi));
                  });
}

}  // namespace mirage::ag
