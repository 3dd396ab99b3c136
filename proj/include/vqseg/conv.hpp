#pragma once

#include <memory>
#include <vector>

#include "vqseg/blas.hpp"
#include "vqseg/errors.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

/// Output spatial size for a convolution along one axis.
inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

/// Gathers convolution patches for one image (Ci, H, W) into a column matrix
/// of shape (Ci*kh*kw, Ho*Wo): row (c*kh+u)*kw+v, column oy*Wo+ox.
template <typename T>
void im2col(const T* img, int Ci, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* col) {
  for (int c = 0; c < Ci; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        T* row = col + (int64_t((c * kh + u) * kw + v)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + u;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) row[oy * Wo + ox] = T(0);
            continue;
          }
          const T* src = img + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + v;
            row[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

/// Scatter-adds a column matrix back into an image; adjoint of im2col.
template <typename T>
void col2im(const T* col, int Ci, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* img) {
  for (int c = 0; c < Ci; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        const T* row = col + (int64_t((c * kh + u) * kw + v)) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + u;
          if (iy < 0 || iy >= H) continue;
          T* dst = img + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + v;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. Kernel shape (Co, Ci/groups, kh, kw); no bias (use
/// bias_channel). Output (n, Co, Ho, Wo) with Ho = (H + 2p - kh)/s + 1.
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& kernel,
                    int stride, int pad, int groups = 1) {
  const Shape4& xs = x->shape;
  const Shape4& ks = kernel->shape;
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  if (groups < 1 || xs.c % groups != 0 || ks.n % groups != 0 ||
      ks.c != xs.c / groups)
    throw ConfigError("conv2d: kernel " + ks.str() +
                      " incompatible with input " + xs.str() + " at groups=" +
                      std::to_string(groups));
  const int Ho = conv_out_dim(xs.h, ks.h, stride, pad);
  const int Wo = conv_out_dim(xs.w, ks.w, stride, pad);
  if (Ho < 1 || Wo < 1)
    throw ConfigError("conv2d: kernel " + ks.str() + " too large for input " +
                      xs.str());

  const int Cig = xs.c / groups;   // input channels per group
  const int Cog = ks.n / groups;   // output channels per group
  const int krows = Cig * ks.h * ks.w;
  const int64_t ocols = int64_t(Ho) * Wo;

  auto out = Tensor4<T>::make({xs.n, ks.n, Ho, Wo},
                              x->requires_grad || kernel->requires_grad);
  std::vector<T> col(size_t(krows) * ocols);
  for (int b = 0; b < xs.n; ++b)
    for (int g = 0; g < groups; ++g) {
      const T* img = x->v.data() + (int64_t(b) * xs.c + g * Cig) *
                                       (int64_t(xs.h) * xs.w);
      detail::im2col(img, Cig, xs.h, xs.w, ks.h, ks.w, stride, pad, Ho, Wo,
                     col.data());
      // (Cog, krows) x (krows, ocols) -> (Cog, ocols)
      gemm(false, false, Cog, int(ocols), krows, T(1),
           kernel->v.data() + int64_t(g) * Cog * krows, krows, col.data(),
           int(ocols), T(0),
           out->v.data() + (int64_t(b) * ks.n + g * Cog) * ocols,
           int(ocols));
    }

  if (out->requires_grad) {
    out->parents = {x, kernel};
    const int kh = ks.h, kw = ks.w;
    out->backward_fn = [x, kernel, stride, pad, groups, Cig, Cog, krows,
                        ocols, Ho, Wo, kh, kw](Tensor4<T>& self) {
      const Shape4& xs = x->shape;
      if (x->requires_grad) x->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      std::vector<T> col(size_t(krows) * ocols);
      for (int b = 0; b < xs.n; ++b)
        for (int g = 0; g < groups; ++g) {
          const T* dy = self.g.data() +
                        (int64_t(b) * self.shape.c + g * Cog) * ocols;
          if (kernel->requires_grad) {
            const T* img = x->v.data() + (int64_t(b) * xs.c + g * Cig) *
                                             (int64_t(xs.h) * xs.w);
            detail::im2col(img, Cig, xs.h, xs.w, kh, kw, stride, pad, Ho, Wo,
                           col.data());
            // dK += dY * col^T : (Cog, ocols) x (ocols, krows)
            gemm(false, true, Cog, krows, int(ocols), T(1), dy, int(ocols),
                 col.data(), int(ocols), T(1),
                 kernel->g.data() + int64_t(g) * Cog * krows, krows);
          }
          if (x->requires_grad) {
            // dcol = K^T * dY : (krows, Cog) x (Cog, ocols)
            gemm(true, false, krows, int(ocols), Cog, T(1),
                 kernel->v.data() + int64_t(g) * Cog * krows, krows, dy,
                 int(ocols), T(0), col.data(), int(ocols));
            detail::col2im(col.data(), Cig, xs.h, xs.w, kh, kw, stride, pad,
                           Ho, Wo,
                           x->g.data() + (int64_t(b) * xs.c + g * Cig) *
                                             (int64_t(xs.h) * xs.w));
          }
        }
    };
  }
  return out;
}

/// Transposed 2-D convolution (adjoint of conv2d with the same kernel
/// memory). Kernel shape (Ci, Co, kh, kw); output spatial size
/// (H - 1)*stride + kh - 2*pad.
template <typename T>
TensorPtr<T> conv2d_transpose(const TensorPtr<T>& x, const TensorPtr<T>& kernel,
                              int stride, int pad = 0) {
  const Shape4& xs = x->shape;
  const Shape4& ks = kernel->shape;
  if (stride < 1) throw ConfigError("conv2d_transpose: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d_transpose: pad must be >= 0");
  if (ks.n != xs.c)
    throw ConfigError("conv2d_transpose: kernel " + ks.str() +
                      " incompatible with input " + xs.str());
  const int Ho = (xs.h - 1) * stride + ks.h - 2 * pad;
  const int Wo = (xs.w - 1) * stride + ks.w - 2 * pad;
  if (Ho < 1 || Wo < 1)
    throw ConfigError("conv2d_transpose: empty output for input " + xs.str() +
                      " with kernel " + ks.str());

  const int Ci = ks.n, Co = ks.c;
  const int krows = Co * ks.h * ks.w;
  const int64_t icols = int64_t(xs.h) * xs.w;

  auto out = Tensor4<T>::make({xs.n, Co, Ho, Wo},
                              x->requires_grad || kernel->requires_grad);
  std::vector<T> col(size_t(krows) * icols);
  for (int b = 0; b < xs.n; ++b) {
    // col = K^T * X : (krows, Ci) x (Ci, icols); K viewed as (Ci, krows)
    gemm(true, false, krows, int(icols), Ci, T(1), kernel->v.data(), krows,
         x->v.data() + int64_t(b) * Ci * icols, int(icols), T(0), col.data(),
         int(icols));
    detail::col2im(col.data(), Co, Ho, Wo, ks.h, ks.w, stride, pad, xs.h,
                   xs.w, out->v.data() + int64_t(b) * Co * (int64_t(Ho) * Wo));
  }

  if (out->requires_grad) {
    out->parents = {x, kernel};
    const int kh = ks.h, kw = ks.w;
    out->backward_fn = [x, kernel, stride, pad, Ci, Co, krows, icols, Ho, Wo,
                        kh, kw](Tensor4<T>& self) {
      const Shape4& xs = x->shape;
      if (x->requires_grad) x->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      std::vector<T> col(size_t(krows) * icols);
      for (int b = 0; b < xs.n; ++b) {
        const T* dy = self.g.data() + int64_t(b) * Co * (int64_t(Ho) * Wo);
        detail::im2col(dy, Co, Ho, Wo, kh, kw, stride, pad, xs.h, xs.w,
                       col.data());
        if (x->requires_grad) {
          // dX += K * col : (Ci, krows) x (krows, icols)
          gemm(false, false, Ci, int(icols), krows, T(1), kernel->v.data(),
               krows, col.data(), int(icols), T(1),
               x->g.data() + int64_t(b) * Ci * icols, int(icols));
        }
        if (kernel->requires_grad) {
          // dK += X * col^T : (Ci, icols) x (icols, krows)
          gemm(false, true, Ci, krows, int(icols), T(1),
               x->v.data() + int64_t(b) * Ci * icols, int(icols), col.data(),
               int(icols), T(1), kernel->g.data(), krows);
        }
      }
    };
  }
  return out;
}

}  // namespace vqseg
