#pragma once

// Numeric kernels over Tensor values.
//
// Accumulation order is fixed and documented per kernel: every reduction adds
// its terms left to right in the natural row-major order of the reduced
// indices. Batched kernels compute each output element from the same sequence
// of operations regardless of how many samples share the batch, so results do
// not depend on batch composition. Build with -ffp-contract=off to keep the
// compiler from fusing multiply-adds.

#include <cmath>
#include <optional>

#include "mirage/core/tensor.hpp"

namespace mirage::kern {

template <Scalar T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

enum class Binary { add, sub, mul };

template <Scalar T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Binary op) {
  require_same_shape(a, b, "elementwise");
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  const std::size_t n = a.size();
  switch (op) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
      break;
  }
  return out;
}

template <Scalar T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Binary::add);
}
template <Scalar T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Binary::sub);
}
template <Scalar T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Binary::mul);
}

template <Scalar T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  return out;
}

// dst += src
template <Scalar T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst, src, "accumulate");
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <Scalar T>
T sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return acc;
}

template <Scalar T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

// ||a - b||_inf / max(||a||_inf, ||b||_inf, floor)
template <Scalar T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  require_same_shape(a, b, "max_rel_diff");
  double diff = 0, scale_ab = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale_ab = std::max({scale_ab, std::abs(static_cast<double>(a[i])),
                         std::abs(static_cast<double>(b[i]))});
  }
  return diff / scale_ab;
}

// C[M,N] = A[M,K] * B[K,N], all row-major. Each C[i][j] accumulates its K
// terms in increasing k. Rows are processed four at a time and columns in
// tiles; neither changes the per-element order.
template <Scalar T>
void gemm(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A, const T* __restrict B,
          T* __restrict C) {
  constexpr std::size_t tile = 256;
  std::fill(C, C + M * N, T(0));
  for (std::size_t j0 = 0; j0 < N; j0 += tile) {
    const std::size_t j1 = std::min(N, j0 + tile);
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
      T* c0 = C + (i + 0) * N;
      T* c1 = C + (i + 1) * N;
      T* c2 = C + (i + 2) * N;
      T* c3 = C + (i + 3) * N;
      for (std::size_t k = 0; k < K; ++k) {
        const T a0 = A[(i + 0) * K + k];
        const T a1 = A[(i + 1) * K + k];
        const T a2 = A[(i + 2) * K + k];
        const T a3 = A[(i + 3) * K + k];
        const T* b = B + k * N;
        for (std::size_t j = j0; j < j1; ++j) {
          const T bj = b[j];
          c0[j] += a0 * bj;
          c1[j] += a1 * bj;
          c2[j] += a2 * bj;
          c3[j] += a3 * bj;
        }
      }
    }
    for (; i < M; ++i) {
      T* c = C + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const T a = A[i * K + k];
        const T* b = B + k * N;
        for (std::size_t j = j0; j < j1; ++j) c[j] += a * b[j];
      }
    }
  }
}

template <Scalar T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict src, T* __restrict dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.extent(1) != b.extent(0))
    throw DimensionError("matmul: inner extents differ (axis 1 of lhs = " +
                         std::to_string(a.extent(1)) + ", axis 0 of rhs = " +
                         std::to_string(b.extent(0)) + ")");
  Tensor<T> out({a.extent(0), b.extent(1)});
  gemm(a.extent(0), a.extent(1), b.extent(1), a.ptr(), b.ptr(), out.ptr());
  return out;
}

template <Scalar T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
  Tensor<T> out({a.extent(1), a.extent(0)});
  transpose(a.extent(0), a.extent(1), a.ptr(), out.ptr());
  return out;
}

// Row-wise argmax of a [N, K] tensor; ties resolve to the lowest index.
template <Scalar T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("argmax_rows: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t n = a.extent(0), k = a.extent(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (a[i * k + j] > a[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

template <Scalar T>
std::size_t argmax(const Tensor<T>& a) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < a.size(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

// ---------------------------------------------------------------- conv2d

struct ConvGeometry {
  std::size_t n, c, h, w;    // input
  std::size_t o, kh, kw;     // kernel
  std::size_t stride, pad;
  std::size_t ho, wo;        // output
  std::size_t patch() const { return c * kh * kw; }
  std::size_t plane() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& ker, std::size_t stride,
                                  std::size_t pad) {
  if (in.size() != 4)
    throw DimensionError("conv2d: input must be rank 4 [N,C,H,W], got " + shape_str(in));
  if (ker.size() != 4)
    throw DimensionError("conv2d: kernel must be rank 4 [O,C,kh,kw], got " + shape_str(ker));
  if (ker[1] != in[1])
    throw DimensionError("conv2d: kernel axis 1 (in-channels = " + std::to_string(ker[1]) +
                         ") != input axis 1 (channels = " + std::to_string(in[1]) + ")");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  ConvGeometry g{in[0], in[1], in[2], in[3], ker[0], ker[2], ker[3], stride, pad, 0, 0};
  auto out_extent = [&](std::size_t x, std::size_t k, const char* axis) {
    const std::size_t padded = x + 2 * pad;
    if (padded < k)
      throw ConfigError(std::string("conv2d: kernel larger than padded input on axis ") + axis);
    if ((padded - k) % stride != 0)
      throw ConfigError(std::string("conv2d: output extent on axis ") + axis + " is not integral ((" +
                        std::to_string(x) + " + 2*" + std::to_string(pad) + " - " +
                        std::to_string(k) + ") / " + std::to_string(stride) + ")");
    return (padded - k) / stride + 1;
  };
  g.ho = out_extent(g.h, g.kh, "H");
  g.wo = out_extent(g.w, g.kw, "W");
  return g;
}

// cols[(c*kh + ki)*kw + kj][n*P + oy*wo + ox]
template <Scalar T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const std::size_t np = g.n * g.plane();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = in + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * g.plane();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            T* d = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(d, d + g.wo, T(0));
              continue;
            }
            const T* s = src + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : s[ix];
            }
          }
        }
      }
}

// Inverse scatter of im2col; contributions to an input element are added in
// (c, ki, kj, oy, ox) order.
template <Scalar T>
void col2im(const ConvGeometry& g, const T* cols, T* in) {
  const std::size_t np = g.n * g.plane();
  std::fill(in, in + g.n * g.c * g.h * g.w, T(0));
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = in + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * g.plane();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* d = dst + static_cast<std::size_t>(iy) * g.w;
            const T* s = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) d[ix] += s[ox];
            }
          }
        }
      }
}

// [O, N*P] -> [N, O, P]
template <Scalar T>
void unfold_batch(const ConvGeometry& g, const T* mat, T* out) {
  const std::size_t p = g.plane(), np = g.n * p;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      std::copy_n(mat + o * np + n * p, p, out + (n * g.o + o) * p);
}

// [N, O, P] -> [O, N*P]
template <Scalar T>
void fold_batch(const ConvGeometry& g, const T* in, T* mat) {
  const std::size_t p = g.plane(), np = g.n * p;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      std::copy_n(in + (n * g.o + o) * p, p, mat + o * np + n * p);
}

// Cross-correlation with zero padding. Output element (n,o,y,x) is
// sum over (c, ki, kj) in row-major order, then + bias[o].
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>* bias,
                 std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias && (bias->rank() != 1 || bias->extent(0) != g.o))
    throw DimensionError("conv2d: bias shape " + shape_str(bias->shape()) +
                         " does not match kernel axis 0 (" + std::to_string(g.o) + ")");
  const std::size_t np = g.n * g.plane();
  std::vector<T> cols(g.patch() * np);
  im2col(g, input.ptr(), cols.data());
  std::vector<T> mat(g.o * np);
  gemm(g.o, g.patch(), np, kernel.ptr(), cols.data(), mat.data());
  Tensor<T> out({g.n, g.o, g.ho, g.wo});
  unfold_batch(g, mat.data(), out.ptr());
  if (bias) {
    T* po = out.ptr();
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o) {
        const T b = (*bias)[o];
        T* row = po + (n * g.o + o) * g.plane();
        for (std::size_t i = 0; i < g.plane(); ++i) row[i] += b;
      }
  }
  return out;
}

template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t pad = 0) {
  return conv2d(input, kernel, static_cast<const Tensor<T>*>(nullptr), stride, pad);
}

template <Scalar T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gout, const Tensor<T>& kernel, const Shape& in_shape,
                                std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(in_shape, kernel.shape(), stride, pad);
  const std::size_t np = g.n * g.plane();
  std::vector<T> gmat(g.o * np);
  fold_batch(g, gout.ptr(), gmat.data());
  std::vector<T> kt(g.patch() * g.o);
  transpose(g.o, g.patch(), kernel.ptr(), kt.data());
  std::vector<T> gcols(g.patch() * np);
  gemm(g.patch(), g.o, np, kt.data(), gmat.data(), gcols.data());
  Tensor<T> gin(in_shape);
  col2im(g, gcols.data(), gin.ptr());
  return gin;
}

template <Scalar T>
Tensor<T> conv2d_backward_kernel(const Tensor<T>& gout, const Tensor<T>& input, const Shape& ker_shape,
                                 std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), ker_shape, stride, pad);
  const std::size_t np = g.n * g.plane();
  std::vector<T> cols(g.patch() * np);
  im2col(g, input.ptr(), cols.data());
  std::vector<T> colst(np * g.patch());
  transpose(g.patch(), np, cols.data(), colst.data());
  std::vector<T> gmat(g.o * np);
  fold_batch(g, gout.ptr(), gmat.data());
  Tensor<T> gk(ker_shape);
  gemm(g.o, np, g.patch(), gmat.data(), colst.data(), gk.ptr());
  return gk;
}

// Sum of gout over (n, y, x) per channel.
template <Scalar T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& gout) {
  const std::size_t n = gout.extent(0), o = gout.extent(1), p = gout.extent(2) * gout.extent(3);
  Tensor<T> gb({o});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < o; ++c) {
      const T* row = gout.ptr() + (i * o + c) * p;
      T acc = gb[c];
      for (std::size_t k = 0; k < p; ++k) acc += row[k];
      gb[c] = acc;
    }
  return gb;
}

// ---------------------------------------------------------------- channels

template <Scalar T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4)
    throw DimensionError("concat_channels: expected rank-4 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  for (std::size_t ax : {0u, 2u, 3u})
    if (a.extent(ax) != b.extent(ax))
      throw DimensionError("concat_channels: axis " + std::to_string(ax) + " differs (" +
                           std::to_string(a.extent(ax)) + " vs " + std::to_string(b.extent(ax)) + ")");
  const std::size_t n = a.extent(0), ca = a.extent(1), cb = b.extent(1);
  const std::size_t p = a.extent(2) * a.extent(3);
  Tensor<T> out({n, ca + cb, a.extent(2), a.extent(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * ca * p, ca * p, out.ptr() + i * (ca + cb) * p);
    std::copy_n(b.ptr() + i * cb * p, cb * p, out.ptr() + (i * (ca + cb) + ca) * p);
  }
  return out;
}

// Channels [begin, end) of a rank-4 tensor.
template <Scalar T>
Tensor<T> slice_channels(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 4) throw DimensionError("slice_channels: expected rank 4, got " + shape_str(a.shape()));
  if (begin >= end || end > a.extent(1))
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for axis 1 of extent " + std::to_string(a.extent(1)));
  const std::size_t n = a.extent(0), c = a.extent(1), k = end - begin;
  const std::size_t p = a.extent(2) * a.extent(3);
  Tensor<T> out({n, k, a.extent(2), a.extent(3)});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.ptr() + (i * c + begin) * p, k * p, out.ptr() + i * k * p);
  return out;
}

// ---------------------------------------------------------------- pooling

// Non-overlapping k x k average pooling (kernel == stride). Extents must be
// divisible by k.
template <Scalar T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4) throw DimensionError("avgpool2d: expected rank 4, got " + shape_str(x.shape()));
  if (k == 0) throw ConfigError("avgpool2d: window must be positive");
  if (x.extent(2) % k || x.extent(3) % k)
    throw ConfigError("avgpool2d: spatial extents " + shape_str(x.shape()) + " not divisible by window " +
                      std::to_string(k));
  const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out({n, c, ho, wo});
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.ptr() + nc * h * w;
    T* dst = out.ptr() + nc * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += src[(oy * k + i) * w + ox * k + j];
        dst[oy * wo + ox] = acc * inv;
      }
  }
  return out;
}

template <Scalar T>
Tensor<T> avgpool2d_backward(const Tensor<T>& gout, const Shape& in_shape, std::size_t k) {
  Tensor<T> gin(in_shape);
  const std::size_t h = in_shape[2], w = in_shape[3], ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t nc = 0; nc < in_shape[0] * in_shape[1]; ++nc) {
    const T* src = gout.ptr() + nc * ho * wo;
    T* dst = gin.ptr() + nc * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) dst[y * w + x] = src[(y / k) * wo + x / k] * inv;
  }
  return gin;
}

// [N,C,H,W] -> [N,C]
template <Scalar T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avgpool: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t n = x.extent(0), c = x.extent(1), p = x.extent(2) * x.extent(3);
  Tensor<T> out({n, c});
  const T inv = T(1) / static_cast<T>(p);
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    const T* src = x.ptr() + i * p;
    for (std::size_t k = 0; k < p; ++k) acc += src[k];
    out[i] = acc * inv;
  }
  return out;
}

// Nearest-neighbour 2x upsampling of a rank-4 tensor.
template <Scalar T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample2x: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t h = x.extent(2), w = x.extent(3);
  Tensor<T> out({x.extent(0), x.extent(1), 2 * h, 2 * w});
  for (std::size_t nc = 0; nc < x.extent(0) * x.extent(1); ++nc) {
    const T* src = x.ptr() + nc * h * w;
    T* dst = out.ptr() + nc * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return out;
}

template <Scalar T>
Tensor<T> upsample2x_backward(const Tensor<T>& gout, const Shape& in_shape) {
  const std::size_t h = in_shape[2], w = in_shape[3];
  Tensor<T> gin(in_shape);
  for (std::size_t nc = 0; nc < in_shape[0] * in_shape[1]; ++nc) {
    const T* src = gout.ptr() + nc * 4 * h * w;
    T* dst = gin.ptr() + nc * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const T* s = src + (2 * y) * 2 * w + 2 * x;
        dst[y * w + x] = ((s[0] + s[1]) + s[2 * w]) + s[2 * w + 1];
      }
  }
  return gin;
}

}  // namespace mirage::kern
