#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/quantizer.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

constexpr int kIgnoreIndex = 255;

/// Mean over non-ignored pixels of -log softmax(logits)[label], fused for
/// numerical stability. labels is row-major (n, h, w); every entry must be a
/// class id in [0, C) or ignore_index. When every pixel is ignored the loss
/// is 0 with zero gradient and a warning is printed.
template <typename T>
TensorPtr<T> cross_entropy(const TensorPtr<T>& logits,
                           const std::vector<int32_t>& labels,
                           int ignore_index = kIgnoreIndex) {
  const Shape4 s = logits->shape;
  const int C = s.c;
  const int64_t plane = int64_t(s.h) * s.w;
  const int64_t npix = int64_t(s.n) * plane;
  if (int64_t(labels.size()) != npix)
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) +
                      " labels for logits " + s.str());

  std::vector<T> probs(size_t(npix) * C);
  int64_t valid = 0;
  T loss_sum = 0;
  for (int b = 0; b < s.n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const int32_t lab = labels[size_t(b * plane + p)];
      const T* base = logits->v.data() + int64_t(b) * C * plane + p;
      T* pr = probs.data() + (b * plane + p) * C;
      T mx = base[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, base[c * plane]);
      T sum = 0;
      for (int c = 0; c < C; ++c) {
        const T e = std::exp(base[c * plane] - mx);
        pr[c] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int c = 0; c < C; ++c) pr[c] *= inv;
      if (lab == ignore_index) continue;
      if (lab < 0 || lab >= C)
        throw DataError("cross_entropy: label " + std::to_string(lab) +
                        " out of range at pixel (" +
                        std::to_string(p / s.w) + ", " +
                        std::to_string(p % s.w) + ") of image " +
                        std::to_string(b));
      ++valid;
      loss_sum -= std::log(pr[lab]);
    }

  if (valid == 0) {
    std::cerr << "warning: cross_entropy: every pixel carries the ignore "
                 "label; loss is 0\n";
    return Tensor4<T>::scalar(T(0), false);
  }

  auto out = Tensor4<T>::scalar(loss_sum / T(valid), logits->requires_grad);
  if (out->requires_grad) {
    out->parents = {logits};
    out->backward_fn = [logits, labels, ignore_index, C, plane, valid,
                        probs = std::move(probs)](Tensor4<T>& self) {
      logits->ensure_grad();
      const T g0 = self.g[0] / T(valid);
      for (int b = 0; b < logits->shape.n; ++b)
        for (int64_t p = 0; p < plane; ++p) {
          const int32_t lab = labels[size_t(b * plane + p)];
          if (lab == ignore_index) continue;
          const T* pr = probs.data() + (b * plane + p) * C;
          T* gl = logits->g.data() + int64_t(b) * C * plane + p;
          for (int c = 0; c < C; ++c)
            gl[c * plane] += g0 * (pr[c] - (c == lab ? T(1) : T(0)));
        }
    };
  }
  return out;
}

template <typename T>
struct LossTerms {
  T ce = 0, vq = 0, total = 0;
};

/// Combined objective: total = ce + codebook_loss + beta * commitment_loss.
template <typename T>
LossTerms<T> total_loss(T ce, const QuantizationResult<T>& qr, T beta) {
  LossTerms<T> t;
  t.ce = ce;
  t.vq = qr.codebook_loss + beta * qr.commitment_loss;
  t.total = t.ce + t.vq;
  return t;
}

}  // namespace vqseg
