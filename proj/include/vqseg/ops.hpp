#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "vqseg/blas.hpp"
#include "vqseg/errors.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!(a->shape == b->shape))
    throw ConfigError("add: shape mismatch " + a->shape.str() + " vs " +
                      b->shape.str());
  auto out = Tensor4<T>::make(a->shape, a->requires_grad || b->requires_grad);
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
  if (out->requires_grad) {
    out->parents = {a, b};
    out->backward_fn = [a, b](Tensor4<T>& self) {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) a->g[i] += self.g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) b->g[i] += self.g[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (!(a->shape == b->shape))
    throw ConfigError("mul: shape mismatch " + a->shape.str() + " vs " +
                      b->shape.str());
  auto out = Tensor4<T>::make(a->shape, a->requires_grad || b->requires_grad);
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] * b->v[i];
  if (out->requires_grad) {
    out->parents = {a, b};
    out->backward_fn = [a, b](Tensor4<T>& self) {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i)
          a->g[i] += self.g[i] * b->v[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i)
          b->g[i] += self.g[i] * a->v[i];
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, T k) {
  auto out = Tensor4<T>::make(x->shape, x->requires_grad);
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = x->v[i] * k;
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x, k](Tensor4<T>& self) {
      x->ensure_grad();
      for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i] * k;
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> silu(const TensorPtr<T>& x) {
  auto out = Tensor4<T>::make(x->shape, x->requires_grad);
  for (size_t i = 0; i < out->v.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-x->v[i]));
    out->v[i] = x->v[i] * s;
  }
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x](Tensor4<T>& self) {
      x->ensure_grad();
      for (size_t i = 0; i < self.g.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x->v[i]));
        x->g[i] += self.g[i] * s * (T(1) + x->v[i] * (T(1) - s));
      }
    };
  }
  return out;
}

/// Adds a per-channel bias b of shape (1, C, 1, 1).
template <typename T>
TensorPtr<T> bias_channel(const TensorPtr<T>& x, const TensorPtr<T>& b) {
  if (b->shape.n != 1 || b->shape.h != 1 || b->shape.w != 1 ||
      b->shape.c != x->shape.c)
    throw ConfigError("bias_channel: bias " + b->shape.str() +
                      " does not match input " + x->shape.str());
  auto out = Tensor4<T>::make(x->shape, x->requires_grad || b->requires_grad);
  const int64_t plane = int64_t(x->shape.h) * x->shape.w;
  for (int bi = 0; bi < x->shape.n; ++bi)
    for (int c = 0; c < x->shape.c; ++c) {
      const T bias = b->v[size_t(c)];
      const int64_t base = (int64_t(bi) * x->shape.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i)
        out->v[size_t(base + i)] = x->v[size_t(base + i)] + bias;
    }
  if (out->requires_grad) {
    out->parents = {x, b};
    out->backward_fn = [x, b, plane](Tensor4<T>& self) {
      if (x->requires_grad) {
        x->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int bi = 0; bi < self.shape.n; ++bi)
          for (int c = 0; c < self.shape.c; ++c) {
            const int64_t base = (int64_t(bi) * self.shape.c + c) * plane;
            T s = 0;
            for (int64_t i = 0; i < plane; ++i) s += self.g[size_t(base + i)];
            b->g[size_t(c)] += s;
          }
      }
    };
  }
  return out;
}

/// Adds a bias b of shape (1, 1, 1, W) along the last axis.
template <typename T>
TensorPtr<T> bias_last(const TensorPtr<T>& x, const TensorPtr<T>& b) {
  if (b->shape.n != 1 || b->shape.c != 1 || b->shape.h != 1 ||
      b->shape.w != x->shape.w)
    throw ConfigError("bias_last: bias " + b->shape.str() +
                      " does not match input " + x->shape.str());
  auto out = Tensor4<T>::make(x->shape, x->requires_grad || b->requires_grad);
  const int W = x->shape.w;
  const int64_t rows = x->numel() / W;
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < W; ++j)
      out->v[size_t(r * W + j)] = x->v[size_t(r * W + j)] + b->v[size_t(j)];
  if (out->requires_grad) {
    out->parents = {x, b};
    out->backward_fn = [x, b, rows, W](Tensor4<T>& self) {
      if (x->requires_grad) {
        x->ensure_grad();
        for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < W; ++j)
            b->g[size_t(j)] += self.g[size_t(r * W + j)];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> concat_channels(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape.n != b->shape.n || a->shape.h != b->shape.h ||
      a->shape.w != b->shape.w)
    throw ConfigError("concat_channels: shape mismatch " + a->shape.str() +
                      " vs " + b->shape.str());
  Shape4 os{a->shape.n, a->shape.c + b->shape.c, a->shape.h, a->shape.w};
  auto out = Tensor4<T>::make(os, a->requires_grad || b->requires_grad);
  const int64_t plane = int64_t(os.h) * os.w;
  const int64_t asz = int64_t(a->shape.c) * plane;
  const int64_t bsz = int64_t(b->shape.c) * plane;
  for (int bi = 0; bi < os.n; ++bi) {
    std::copy_n(a->v.begin() + bi * asz, asz,
                out->v.begin() + bi * (asz + bsz));
    std::copy_n(b->v.begin() + bi * bsz, bsz,
                out->v.begin() + bi * (asz + bsz) + asz);
  }
  if (out->requires_grad) {
    out->parents = {a, b};
    out->backward_fn = [a, b, asz, bsz](Tensor4<T>& self) {
      for (int bi = 0; bi < self.shape.n; ++bi) {
        const int64_t base = bi * (asz + bsz);
        if (a->requires_grad) {
          a->ensure_grad();
          for (int64_t i = 0; i < asz; ++i)
            a->g[size_t(bi * asz + i)] += self.g[size_t(base + i)];
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (int64_t i = 0; i < bsz; ++i)
            b->g[size_t(bi * bsz + i)] += self.g[size_t(base + asz + i)];
        }
      }
    };
  }
  return out;
}

/// Nearest-neighbor 2x upsampling of the spatial dims.
template <typename T>
TensorPtr<T> resize_nearest2x(const TensorPtr<T>& x) {
  Shape4 os{x->shape.n, x->shape.c, x->shape.h * 2, x->shape.w * 2};
  auto out = Tensor4<T>::make(os, x->requires_grad);
  for (int b = 0; b < os.n; ++b)
    for (int c = 0; c < os.c; ++c)
      for (int y = 0; y < os.h; ++y)
        for (int xw = 0; xw < os.w; ++xw)
          out->at(b, c, y, xw) = x->at(b, c, y / 2, xw / 2);
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x](Tensor4<T>& self) {
      x->ensure_grad();
      for (int b = 0; b < self.shape.n; ++b)
        for (int c = 0; c < self.shape.c; ++c)
          for (int y = 0; y < self.shape.h; ++y)
            for (int xw = 0; xw < self.shape.w; ++xw)
              x->g[size_t(x->idx(b, c, y / 2, xw / 2))] +=
                  self.g[size_t(self.idx(b, c, y, xw))];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, Shape4 s) {
  if (s.numel() != x->numel())
    throw ConfigError("reshape: element count mismatch " + x->shape.str() +
                      " -> " + s.str());
  auto out = Tensor4<T>::make(s, x->requires_grad);
  out->v = x->v;
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x](Tensor4<T>& self) {
      x->ensure_grad();
      for (size_t i = 0; i < self.g.size(); ++i) x->g[i] += self.g[i];
    };
  }
  return out;
}

/// Permutes axes: output axis i is input axis order[i].
template <typename T>
TensorPtr<T> permute(const TensorPtr<T>& x, std::array<int, 4> order) {
  Shape4 os{x->shape.dim(order[0]), x->shape.dim(order[1]),
            x->shape.dim(order[2]), x->shape.dim(order[3])};
  auto out = Tensor4<T>::make(os, x->requires_grad);
  const std::array<int64_t, 4> in_stride = {
      int64_t(x->shape.c) * x->shape.h * x->shape.w,
      int64_t(x->shape.h) * x->shape.w, int64_t(x->shape.w), 1};
  int64_t p = 0;
  for (int i0 = 0; i0 < os.n; ++i0)
    for (int i1 = 0; i1 < os.c; ++i1)
      for (int i2 = 0; i2 < os.h; ++i2)
        for (int i3 = 0; i3 < os.w; ++i3)
          out->v[size_t(p++)] =
              x->v[size_t(i0 * in_stride[size_t(order[0])] +
                          i1 * in_stride[size_t(order[1])] +
                          i2 * in_stride[size_t(order[2])] +
                          i3 * in_stride[size_t(order[3])])];
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x, order, in_stride](Tensor4<T>& self) {
      x->ensure_grad();
      int64_t q = 0;
      for (int i0 = 0; i0 < self.shape.n; ++i0)
        for (int i1 = 0; i1 < self.shape.c; ++i1)
          for (int i2 = 0; i2 < self.shape.h; ++i2)
            for (int i3 = 0; i3 < self.shape.w; ++i3)
              x->g[size_t(i0 * in_stride[size_t(order[0])] +
                          i1 * in_stride[size_t(order[1])] +
                          i2 * in_stride[size_t(order[2])] +
                          i3 * in_stride[size_t(order[3])])] +=
                  self.g[size_t(q++)];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x) {
  auto out = Tensor4<T>::make({1, 1, 1, 1}, x->requires_grad);
  T s = 0;
  for (const T& e : x->v) s += e;
  out->v[0] = s;
  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x](Tensor4<T>& self) {
      x->ensure_grad();
      const T gv = self.g[0];
      for (auto& e : x->g) e += gv;
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> mean_all(const TensorPtr<T>& x) {
  return scale(sum_all(x), T(1) / T(x->numel()));
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// Batched matrix multiply over the last two axes. The two leading axes are
/// batch dims; b may broadcast with leading dims (1, 1). trans_a / trans_b
/// transpose the last two axes of the respective operand.
template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b,
                    bool trans_a = false, bool trans_b = false) {
  const int M = trans_a ? a->shape.w : a->shape.h;
  const int K = trans_a ? a->shape.h : a->shape.w;
  const int Kb = trans_b ? b->shape.w : b->shape.h;
  const int N = trans_b ? b->shape.h : b->shape.w;
  const bool bcast = (b->shape.n == 1 && b->shape.c == 1);
  if (K != Kb || (!bcast && (a->shape.n != b->shape.n ||
                             a->shape.c != b->shape.c)))
    throw ConfigError("matmul: shape mismatch " + a->shape.str() + " vs " +
                      b->shape.str());
  const int batch = a->shape.n * a->shape.c;
  Shape4 os{a->shape.n, a->shape.c, M, N};
  auto out = Tensor4<T>::make(os, a->requires_grad || b->requires_grad);

  const int lda = a->shape.w, ldb = b->shape.w;
  const int64_t a_sz = int64_t(a->shape.h) * a->shape.w;
  const int64_t b_sz = int64_t(b->shape.h) * b->shape.w;
  const int64_t o_sz = int64_t(M) * N;

  if (bcast && !trans_a) {
    // One fused GEMM across the whole batch.
    gemm(false, trans_b, batch * M, N, K, T(1), a->v.data(), lda, b->v.data(),
         ldb, T(0), out->v.data(), N);
  } else {
    for (int i = 0; i < batch; ++i)
      gemm(trans_a, trans_b, M, N, K, T(1), a->v.data() + i * a_sz, lda,
           b->v.data() + (bcast ? 0 : i * b_sz), ldb, T(0),
           out->v.data() + i * o_sz, N);
  }

  if (out->requires_grad) {
    out->parents = {a, b};
    out->backward_fn = [a, b, trans_a, trans_b, batch, M, N, K, lda, ldb, a_sz,
                        b_sz, o_sz, bcast](Tensor4<T>& self) {
      for (int i = 0; i < batch; ++i) {
        const T* dc = self.g.data() + i * o_sz;
        const T* av = a->v.data() + i * a_sz;
        const T* bv = b->v.data() + (bcast ? 0 : i * b_sz);
        if (a->requires_grad) {
          a->ensure_grad();
          T* da = a->g.data() + i * a_sz;
          if (!trans_a)  // dA += dC * op(B)^T
            gemm(false, !trans_b, M, K, N, T(1), dc, N, bv, ldb, T(1), da,
                 lda);
          else  // dA += op(B) * dC^T
            gemm(trans_b, true, K, M, N, T(1), bv, ldb, dc, N, T(1), da, lda);
        }
        if (b->requires_grad) {
          b->ensure_grad();
          T* db = b->g.data() + (bcast ? 0 : i * b_sz);
          if (!trans_b)  // dB += op(A)^T * dC
            gemm(!trans_a, false, K, N, M, T(1), av, lda, dc, N, T(1), db,
                 ldb);
          else  // dB += dC^T * op(A)
            gemm(true, trans_a, N, K, M, T(1), dc, N, av, lda, T(1), db, ldb);
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the given axis (0..3).
template <typename T>
TensorPtr<T> softmax(const TensorPtr<T>& x, int axis) {
  internal_check(axis >= 0 && axis < 4, "softmax axis out of range");
  const int len = x->shape.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < 4; ++i) inner *= x->shape.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x->shape.dim(i);

  auto out = Tensor4<T>::make(x->shape, x->requires_grad);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      T mx = x->v[size_t(base)];
      for (int k = 1; k < len; ++k)
        mx = std::max(mx, x->v[size_t(base + k * inner)]);
      T sum = 0;
      for (int k = 0; k < len; ++k) {
        const T e = std::exp(x->v[size_t(base + k * inner)] - mx);
        out->v[size_t(base + k * inner)] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int k = 0; k < len; ++k) out->v[size_t(base + k * inner)] *= inv;
    }

  if (out->requires_grad) {
    out->parents = {x};
    out->backward_fn = [x, len, inner, outer](Tensor4<T>& self) {
      x->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * len * inner + in;
          T dot = 0;
          for (int k = 0; k < len; ++k)
            dot += self.g[size_t(base + k * inner)] *
                   self.v[size_t(base + k * inner)];
          for (int k = 0; k < len; ++k)
            x->g[size_t(base + k * inner)] +=
                self.v[size_t(base + k * inner)] *
                (self.g[size_t(base + k * inner)] - dot);
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization (over the last axis)
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> layer_norm(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, T eps = T(1e-5)) {
  const int D = x->shape.w;
  if (gamma->shape.w != D || beta->shape.w != D)
    throw ConfigError("layer_norm: parameter width does not match input " +
                      x->shape.str());
  const int64_t rows = x->numel() / D;
  auto out = Tensor4<T>::make(
      x->shape,
      x->requires_grad || gamma->requires_grad || beta->requires_grad);
  std::vector<T> xhat(size_t(x->numel()));
  std::vector<T> invstd(size_t(rows), T(0));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xv = x->v.data() + r * D;
    T mean = 0;
    for (int j = 0; j < D; ++j) mean += xv[j];
    mean /= T(D);
    T var = 0;
    for (int j = 0; j < D; ++j) {
      const T d = xv[j] - mean;
      var += d * d;
    }
    var /= T(D);
    const T is = T(1) / std::sqrt(var + eps);
    invstd[size_t(r)] = is;
    for (int j = 0; j < D; ++j) {
      const T xh = (xv[j] - mean) * is;
      xhat[size_t(r * D + j)] = xh;
      out->v[size_t(r * D + j)] = xh * gamma->v[size_t(j)] + beta->v[size_t(j)];
    }
  }
  if (out->requires_grad) {
    out->parents = {x, gamma, beta};
    out->backward_fn = [x, gamma, beta, rows, D, xhat = std::move(xhat),
                        invstd = std::move(invstd)](Tensor4<T>& self) {
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* dy = self.g.data() + r * D;
        const T* xh = xhat.data() + r * D;
        if (gamma->requires_grad || beta->requires_grad) {
          for (int j = 0; j < D; ++j) {
            if (gamma->requires_grad) gamma->g[size_t(j)] += dy[j] * xh[j];
            if (beta->requires_grad) beta->g[size_t(j)] += dy[j];
          }
        }
        if (x->requires_grad) {
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int j = 0; j < D; ++j) {
            const T dxh = dy[j] * gamma->v[size_t(j)];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
          }
          const T is = invstd[size_t(r)];
          for (int j = 0; j < D; ++j) {
            const T dxh = dy[j] * gamma->v[size_t(j)];
            x->g[size_t(r * D + j)] +=
                is * (dxh - sum_dxhat / T(D) - xh[j] * sum_dxhat_xhat / T(D));
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Running statistics for one batch-norm layer; not learnable, serialized
/// with checkpoints so that eval-mode outputs reproduce exactly.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean, running_var;
  explicit BatchNormState(int channels)
      : running_mean(size_t(channels), T(0)),
        running_var(size_t(channels), T(1)) {}
};

/// Per-channel batch normalization over (batch, height, width).
/// Training mode normalizes with batch statistics and, when update_running
/// is set, folds them into the running stats (momentum 0.1, unbiased var).
/// Eval mode normalizes with the running stats.
template <typename T>
TensorPtr<T> batch_norm(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta,
                        const std::shared_ptr<BatchNormState<T>>& state,
                        bool training, bool update_running = true,
                        T momentum = T(0.1), T eps = T(1e-5)) {
  const int C = x->shape.c;
  if (gamma->shape.c != C || beta->shape.c != C ||
      int(state->running_mean.size()) != C)
    throw ConfigError("batch_norm: parameter channels do not match input " +
                      x->shape.str());
  const int64_t plane = int64_t(x->shape.h) * x->shape.w;
  const int64_t count = int64_t(x->shape.n) * plane;
  auto out = Tensor4<T>::make(
      x->shape,
      x->requires_grad || gamma->requires_grad || beta->requires_grad);

  std::vector<T> mean(size_t(C), T(0)), invstd(size_t(C), T(0));
  if (training) {
    for (int c = 0; c < C; ++c) {
      T m = 0;
      for (int b = 0; b < x->shape.n; ++b) {
        const T* p = x->v.data() + (int64_t(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= T(count);
      T var = 0;
      for (int b = 0; b < x->shape.n; ++b) {
        const T* p = x->v.data() + (int64_t(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - m;
          var += d * d;
        }
      }
      var /= T(count);
      mean[size_t(c)] = m;
      invstd[size_t(c)] = T(1) / std::sqrt(var + eps);
      if (update_running) {
        const T unbiased = count > 1 ? var * T(count) / T(count - 1) : var;
        state->running_mean[size_t(c)] =
            (T(1) - momentum) * state->running_mean[size_t(c)] + momentum * m;
        state->running_var[size_t(c)] =
            (T(1) - momentum) * state->running_var[size_t(c)] +
            momentum * unbiased;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[size_t(c)] = state->running_mean[size_t(c)];
      invstd[size_t(c)] =
          T(1) / std::sqrt(state->running_var[size_t(c)] + eps);
    }
  }

  std::vector<T> xhat(size_t(x->numel()));
  for (int b = 0; b < x->shape.n; ++b)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (int64_t(b) * C + c) * plane;
      const T m = mean[size_t(c)], is = invstd[size_t(c)];
      const T gm = gamma->v[size_t(c)], bt = beta->v[size_t(c)];
      for (int64_t i = 0; i < plane; ++i) {
        const T xh = (x->v[size_t(base + i)] - m) * is;
        xhat[size_t(base + i)] = xh;
        out->v[size_t(base + i)] = xh * gm + bt;
      }
    }

  if (out->requires_grad) {
    out->parents = {x, gamma, beta};
    out->backward_fn = [x, gamma, beta, training, C, plane, count,
                        xhat = std::move(xhat),
                        invstd = std::move(invstd)](Tensor4<T>& self) {
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      for (int c = 0; c < C; ++c) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int b = 0; b < self.shape.n; ++b) {
          const int64_t base = (int64_t(b) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            sum_dy += self.g[size_t(base + i)];
            sum_dy_xhat += self.g[size_t(base + i)] * xhat[size_t(base + i)];
          }
        }
        if (gamma->requires_grad) gamma->g[size_t(c)] += sum_dy_xhat;
        if (beta->requires_grad) beta->g[size_t(c)] += sum_dy;
        if (x->requires_grad) {
          const T gm = gamma->v[size_t(c)], is = invstd[size_t(c)];
          for (int b = 0; b < self.shape.n; ++b) {
            const int64_t base = (int64_t(b) * C + c) * plane;
            if (training) {
              for (int64_t i = 0; i < plane; ++i)
                x->g[size_t(base + i)] +=
                    gm * is *
                    (self.g[size_t(base + i)] - sum_dy / T(count) -
                     xhat[size_t(base + i)] * sum_dy_xhat / T(count));
            } else {
              for (int64_t i = 0; i < plane; ++i)
                x->g[size_t(base + i)] += gm * is * self.g[size_t(base + i)];
            }
          }
        }
      }
    };
  }
  return out;
}

}  // namespace vqseg
