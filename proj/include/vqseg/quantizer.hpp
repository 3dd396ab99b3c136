#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/rng.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

struct VQConfig {
  double beta = 0.25;  // commitment weight
  int K = 19;          // number of code vectors
  int d = 64;          // code dimension
  uint64_t seed = 0;
};

inline void validate(const VQConfig& cfg) {
  if (cfg.K < 1 || cfg.d < 1)
    throw ConfigError("vq: K and d must be >= 1");
  if (!(cfg.beta > 0)) throw ConfigError("vq: beta must be > 0");
}

/// Codebook of K code vectors, stored as a (1, 1, K, d) tensor. Entries are
/// initialized i.i.d. uniform in [-1/K, 1/K].
template <typename T>
TensorPtr<T> init_codebook(const VQConfig& cfg) {
  validate(cfg);
  auto cb = Tensor4<T>::make({1, 1, cfg.K, cfg.d}, true);
  Rng rng(cfg.seed);
  const double lim = 1.0 / double(cfg.K);
  for (auto& e : cb->v) e = T(rng.uniform(-lim, lim));
  return cb;
}

/// Index of the nearest code vector by squared Euclidean distance; ties go to
/// the lowest index. x is read at the given stride (d elements).
template <typename T>
int nearest_code_strided(const T* x, int64_t stride, const Tensor4<T>& cb) {
  const int K = cb.shape.h, d = cb.shape.w;
  for (int c = 0; c < d; ++c)
    if (!std::isfinite(double(x[c * stride])))
      throw NumericalError("nearest_code: non-finite input vector");
  T best = std::numeric_limits<T>::infinity();
  int best_k = 0;
  for (int k = 0; k < K; ++k) {
    const T* e = cb.v.data() + int64_t(k) * d;
    T dist = 0;
    for (int c = 0; c < d; ++c) {
      const T diff = x[c * stride] - e[c];
      dist += diff * diff;
    }
    if (dist < best) {
      best = dist;
      best_k = k;
    }
  }
  return best_k;
}

template <typename T>
int nearest_code(const std::vector<T>& x, const Tensor4<T>& cb) {
  if (int(x.size()) != cb.shape.w)
    throw ConfigError("nearest_code: vector length " +
                      std::to_string(x.size()) + " != code dimension " +
                      std::to_string(cb.shape.w));
  return nearest_code_strided(x.data(), 1, cb);
}

template <typename T>
struct QuantizationResult {
  std::vector<int32_t> indices;  // one per position, row-major (n, h, w)
  TensorPtr<T> quantized;        // same shape as the input field
  T codebook_loss = 0;
  T commitment_loss = 0;
};

/// Quantizes a (n, d, H, W) feature field: each spatial position is replaced
/// by its nearest code vector. Losses are means over positions of the
/// channel-summed squared distances (see README on normalization).
/// Pure forward; no graph is built.
template <typename T>
QuantizationResult<T> quantize_field(const TensorPtr<T>& X,
                                     const TensorPtr<T>& cb,
                                     const VQConfig& cfg) {
  validate(cfg);
  if (X->shape.c != cb->shape.w || cb->shape.h != cfg.K ||
      cb->shape.w != cfg.d)
    throw ConfigError("quantize_field: field " + X->shape.str() +
                      " does not match codebook d=" +
                      std::to_string(cb->shape.w) + " K=" +
                      std::to_string(cb->shape.h));
  const int n = X->shape.n, d = X->shape.c, H = X->shape.h, W = X->shape.w;
  const int64_t plane = int64_t(H) * W;
  QuantizationResult<T> r;
  r.indices.resize(size_t(n) * H * W);
  r.quantized = Tensor4<T>::make(X->shape, false);
  T dist_sum = 0;
  for (int b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const T* xv = X->v.data() + int64_t(b) * d * plane + p;
      const int k = nearest_code_strided(xv, plane, *cb);
      r.indices[size_t(int64_t(b) * plane + p)] = k;
      const T* e = cb->v.data() + int64_t(k) * d;
      T* q = r.quantized->v.data() + int64_t(b) * d * plane + p;
      T dist = 0;
      for (int c = 0; c < d; ++c) {
        q[c * plane] = e[c];
        const T diff = xv[c * plane] - e[c];
        dist += diff * diff;
      }
      dist_sum += dist;
    }
  const T norm = T(int64_t(n) * plane);
  r.codebook_loss = dist_sum / norm;
  r.commitment_loss = dist_sum / norm;
  return r;
}

template <typename T>
struct VQOutput {
  TensorPtr<T> zq;       // straight-through quantized field
  TensorPtr<T> vq_loss;  // codebook_loss + beta * commitment_loss, scalar
  std::vector<int32_t> indices;
  T codebook_loss = 0;
  T commitment_loss = 0;
};

/// Graph-building quantization with straight-through gradients. The zq node
/// copies its gradient to X unchanged; the vq_loss node routes the commitment
/// gradient to X and the codebook gradient to the selected rows only.
/// If frozen is given, those indices are used instead of the argmin (for
/// finite-difference checks that hold the assignment fixed).
template <typename T>
VQOutput<T> vq_quantize(const TensorPtr<T>& X, const TensorPtr<T>& cb,
                        const VQConfig& cfg,
                        const std::vector<int32_t>* frozen = nullptr) {
  validate(cfg);
  if (X->shape.c != cb->shape.w)
    throw ConfigError("vq_quantize: field " + X->shape.str() +
                      " does not match codebook d=" +
                      std::to_string(cb->shape.w));
  const int n = X->shape.n, d = X->shape.c, H = X->shape.h, W = X->shape.w;
  const int64_t plane = int64_t(H) * W;
  const int64_t npos = int64_t(n) * plane;

  VQOutput<T> out;
  out.indices.resize(size_t(npos));
  if (frozen) {
    if (int64_t(frozen->size()) != npos)
      throw ConfigError("vq_quantize: frozen index count mismatch");
    out.indices = *frozen;
  }

  auto zq = Tensor4<T>::make(X->shape, X->requires_grad);
  T dist_sum = 0;
  for (int b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const T* xv = X->v.data() + int64_t(b) * d * plane + p;
      int k;
      if (frozen) {
        k = out.indices[size_t(int64_t(b) * plane + p)];
        internal_check(k >= 0 && k < cb->shape.h,
                       "vq_quantize: frozen index out of range");
      } else {
        k = nearest_code_strided(xv, plane, *cb);
        out.indices[size_t(int64_t(b) * plane + p)] = k;
      }
      const T* e = cb->v.data() + int64_t(k) * d;
      T* q = zq->v.data() + int64_t(b) * d * plane + p;
      T dist = 0;
      for (int c = 0; c < d; ++c) {
        q[c * plane] = e[c];
        const T diff = xv[c * plane] - e[c];
        dist += diff * diff;
      }
      dist_sum += dist;
    }
  out.codebook_loss = dist_sum / T(npos);
  out.commitment_loss = out.codebook_loss;

  if (zq->requires_grad) {
    zq->parents = {X};
    zq->backward_fn = [X](Tensor4<T>& self) {
      X->ensure_grad();
      for (size_t i = 0; i < self.g.size(); ++i) X->g[i] += self.g[i];
    };
  }
  out.zq = zq;

  auto loss = Tensor4<T>::scalar(
      out.codebook_loss + T(cfg.beta) * out.commitment_loss,
      X->requires_grad || cb->requires_grad);
  if (loss->requires_grad) {
    loss->parents = {X, cb};
    const T beta = T(cfg.beta);
    auto indices = out.indices;  // captured by value
    loss->backward_fn = [X, cb, zq, indices, beta, n, d, plane,
                         npos](Tensor4<T>& self) {
      const T g0 = self.g[0];
      if (X->requires_grad) {
        X->ensure_grad();
        const T s = g0 * beta * T(2) / T(npos);
        for (size_t i = 0; i < X->v.size(); ++i)
          X->g[i] += s * (X->v[i] - zq->v[i]);
      }
      if (cb->requires_grad) {
        cb->ensure_grad();
        const T s = g0 * T(2) / T(npos);
        for (int b = 0; b < n; ++b)
          for (int64_t p = 0; p < plane; ++p) {
            const int k = indices[size_t(int64_t(b) * plane + p)];
            const T* xv = X->v.data() + int64_t(b) * d * plane + p;
            T* ge = cb->g.data() + int64_t(k) * d;
            const T* e = cb->v.data() + int64_t(k) * d;
            for (int c = 0; c < d; ++c)
              ge[c] += s * (e[c] - xv[c * plane]);
          }
      }
    };
  }
  out.vq_loss = loss;
  return out;
}

/// Standalone gradient routing for one quantization, matching vq_quantize's
/// backward exactly. Recomputes the assignment from (X, cb) and verifies that
/// Zq holds the selected codebook rows bit-for-bit.
template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> vq_backward(const Tensor4<T>& grad_zq,
                                                  const TensorPtr<T>& X,
                                                  const Tensor4<T>& Zq,
                                                  const TensorPtr<T>& cb,
                                                  const VQConfig& cfg) {
  validate(cfg);
  if (!(grad_zq.shape == X->shape) || !(Zq.shape == X->shape))
    throw ConfigError("vq_backward: shape mismatch");
  const int n = X->shape.n, d = X->shape.c;
  const int64_t plane = int64_t(X->shape.h) * X->shape.w;
  const int64_t npos = int64_t(n) * plane;

  auto gx = Tensor4<T>::make(X->shape, false);
  auto gcb = Tensor4<T>::make(cb->shape, false);
  const T beta = T(cfg.beta);
  for (int b = 0; b < n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const T* xv = X->v.data() + int64_t(b) * d * plane + p;
      const int k = nearest_code_strided(xv, plane, *cb);
      internal_check(k >= 0 && k < cb->shape.h,
                     "vq_backward: index out of range");
      const T* e = cb->v.data() + int64_t(k) * d;
      const T* zv = Zq.v.data() + int64_t(b) * d * plane + p;
      T* gxe = gx->v.data() + int64_t(b) * d * plane + p;
      T* ge = gcb->v.data() + int64_t(k) * d;
      const T* gz = grad_zq.v.data() + int64_t(b) * d * plane + p;
      for (int c = 0; c < d; ++c) {
        internal_check(zv[c * plane] == e[c],
                       "vq_backward: Zq does not hold the selected code");
        gxe[c * plane] =
            gz[c * plane] + beta * T(2) * (xv[c * plane] - e[c]) / T(npos);
        ge[c] += T(2) * (e[c] - xv[c * plane]) / T(npos);
      }
    }
  return {gx, gcb};
}

struct CodeUsageStats {
  std::vector<int64_t> histogram;
  double usage_fraction = 0;
  double perplexity = 1;
};

inline CodeUsageStats usage_stats(const std::vector<int32_t>& indices, int K) {
  internal_check(K >= 1, "usage_stats: K must be >= 1");
  CodeUsageStats s;
  s.histogram.assign(size_t(K), 0);
  for (int32_t k : indices) {
    internal_check(k >= 0 && k < K, "usage_stats: index out of range");
    ++s.histogram[size_t(k)];
  }
  const double total = double(indices.size());
  if (total == 0) return s;  // empty pass: usage 0, perplexity 1
  int used = 0;
  double entropy = 0;
  for (int64_t c : s.histogram) {
    if (c == 0) continue;
    ++used;
    const double p = double(c) / total;
    entropy -= p * std::log(p);
  }
  s.usage_fraction = double(used) / double(K);
  s.perplexity = std::exp(entropy);
  return s;
}

}  // namespace vqseg
