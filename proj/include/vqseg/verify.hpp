#pragma once

// Independent reference implementations ("oracles") used to cross-check the
// fast paths, plus the selftest suite exposed by the CLI. Oracles here are
// deliberately structured differently from the production code: direct loop
// nests instead of im2col/GEMM, materialized distance tables instead of
// streaming minima, nested-loop counting instead of incremental updates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <vector>

#include "vqseg/blocks.hpp"
#include "vqseg/conv.hpp"
#include "vqseg/gradcheck.hpp"
#include "vqseg/losses.hpp"
#include "vqseg/metrics.hpp"
#include "vqseg/model.hpp"
#include "vqseg/optim.hpp"
#include "vqseg/quantizer.hpp"

namespace vqseg {

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> conv2d_naive(const Tensor4<T>& x, const Tensor4<T>& k,
                          int stride, int pad, int groups = 1) {
  const int Ho = conv_out_dim(x.shape.h, k.shape.h, stride, pad);
  const int Wo = conv_out_dim(x.shape.w, k.shape.w, stride, pad);
  const int Cig = x.shape.c / groups, Cog = k.shape.n / groups;
  auto out = Tensor4<T>::make({x.shape.n, k.shape.n, Ho, Wo}, false);
  for (int b = 0; b < x.shape.n; ++b)
    for (int g = 0; g < groups; ++g)
      for (int co = 0; co < Cog; ++co)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            T acc = 0;
            for (int ci = 0; ci < Cig; ++ci)
              for (int u = 0; u < k.shape.h; ++u)
                for (int v = 0; v < k.shape.w; ++v) {
                  const int iy = oy * stride - pad + u;
                  const int ix = ox * stride - pad + v;
                  if (iy < 0 || iy >= x.shape.h || ix < 0 || ix >= x.shape.w)
                    continue;
                  acc += x.at(b, g * Cig + ci, iy, ix) *
                         k.at(g * Cog + co, ci, u, v);
                }
            out->at(b, g * Cog + co, oy, ox) = acc;
          }
  return out;
}

template <typename T>
TensorPtr<T> conv2d_transpose_naive(const Tensor4<T>& x, const Tensor4<T>& k,
                                    int stride, int pad = 0) {
  const int Ho = (x.shape.h - 1) * stride + k.shape.h - 2 * pad;
  const int Wo = (x.shape.w - 1) * stride + k.shape.w - 2 * pad;
  auto out = Tensor4<T>::make({x.shape.n, k.shape.c, Ho, Wo}, false);
  for (int b = 0; b < x.shape.n; ++b)
    for (int ci = 0; ci < x.shape.c; ++ci)
      for (int iy = 0; iy < x.shape.h; ++iy)
        for (int ix = 0; ix < x.shape.w; ++ix)
          for (int co = 0; co < k.shape.c; ++co)
            for (int u = 0; u < k.shape.h; ++u)
              for (int v = 0; v < k.shape.w; ++v) {
                const int oy = iy * stride - pad + u;
                const int ox = ix * stride - pad + v;
                if (oy < 0 || oy >= Ho || ox < 0 || ox >= Wo) continue;
                out->at(b, co, oy, ox) +=
                    x.at(b, ci, iy, ix) * k.at(ci, co, u, v);
              }
  return out;
}

/// Exhaustive nearest-code search: materialize every distance, then take the
/// first minimum.
template <typename T>
int brute_force_nearest(const std::vector<T>& x, const Tensor4<T>& cb) {
  const int K = cb.shape.h, d = cb.shape.w;
  std::vector<T> dist(size_t(K), T(0));
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < d; ++c) {
      const T diff = x[size_t(c)] - cb.at(0, 0, k, c);
      dist[size_t(k)] += diff * diff;
    }
  return int(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

/// Nested-loop confusion counting and textbook IoU.
inline std::pair<double, std::vector<std::optional<double>>> iou_oracle(
    const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int C,
    int ignore_index) {
  std::vector<std::vector<int64_t>> cnt(size_t(C),
                                        std::vector<int64_t>(size_t(C), 0));
  for (size_t i = 0; i < gt.size(); ++i)
    if (gt[i] != ignore_index) ++cnt[size_t(gt[i])][size_t(pred[i])];
  std::vector<std::optional<double>> per(size_t(C), std::nullopt);
  double sum = 0;
  int defined = 0;
  for (int c = 0; c < C; ++c) {
    int64_t inter = cnt[size_t(c)][size_t(c)], uni = 0;
    for (int j = 0; j < C; ++j) uni += cnt[size_t(c)][size_t(j)];
    for (int j = 0; j < C; ++j) uni += cnt[size_t(j)][size_t(c)];
    uni -= inter;
    if (uni == 0) continue;
    per[size_t(c)] = double(inter) / double(uni);
    sum += *per[size_t(c)];
    ++defined;
  }
  return {defined ? sum / defined : 0.0, per};
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

namespace detail {

template <typename T>
TensorPtr<T> rand_tensor(Shape4 s, Rng& rng, bool rg = false, T scale = 1) {
  auto t = Tensor4<T>::make(s, rg);
  for (auto& e : t->v) e = T(rng.normal()) * scale;
  return t;
}

}  // namespace detail

inline std::vector<CheckResult> run_selftest() {
  using D = double;
  std::vector<CheckResult> results;
  auto check = [&](const std::string& name, std::function<std::string()> fn) {
    CheckResult r;
    r.name = name;
    try {
      r.detail = fn();  // empty string means pass
      r.ok = r.detail.empty();
    } catch (const std::exception& e) {
      r.ok = false;
      r.detail = std::string("exception: ") + e.what();
    }
    results.push_back(std::move(r));
  };
  Rng rng(0xc0ffee);

  check("nearest_code equals exhaustive argmin (1000 cases)", [&] {
    for (int i = 0; i < 1000; ++i) {
      const int K = 1 + rng.below(256);
      const int d = 1 + rng.below(64);
      auto cb = detail::rand_tensor<D>({1, 1, K, d}, rng);
      std::vector<D> x(size_t(d), D(0));
      // Occasionally collide with a codebook row to exercise exact ties.
      if (rng.below(4) == 0) {
        const int k = rng.below(K);
        for (int c = 0; c < d; ++c) x[size_t(c)] = cb->at(0, 0, k, c);
      } else {
        for (auto& e : x) e = rng.normal();
      }
      const int got = nearest_code(x, *cb);
      const int want = brute_force_nearest(x, *cb);
      if (got != want)
        return "case " + std::to_string(i) + ": got " + std::to_string(got) +
               " want " + std::to_string(want);
    }
    return std::string();
  });

  check("quantize_field hand example (unit distance, beta 0.25)", [&] {
    VQConfig cfg;
    cfg.K = 2;
    cfg.d = 2;
    cfg.beta = 0.25;
    auto cb = Tensor4<D>::from({1, 1, 2, 2}, {0, 0, 5, 5});
    auto X = Tensor4<D>::from({1, 2, 1, 1}, {1, 0});
    auto r = quantize_field(X, cb, cfg);
    if (r.indices[0] != 0) return std::string("wrong assignment");
    const double lvq = r.codebook_loss + cfg.beta * r.commitment_loss;
    if (std::abs(r.codebook_loss - 1.0) > 1e-15 ||
        std::abs(r.commitment_loss - 1.0) > 1e-15 ||
        std::abs(lvq - 1.25) > 1e-15)
      return "losses " + std::to_string(r.codebook_loss) + ", " +
             std::to_string(r.commitment_loss);
    return std::string();
  });

  check("usage stats: counts (3,1,0)", [&] {
    const auto s = usage_stats({0, 0, 0, 1}, 3);
    const double want = std::exp(-(0.75 * std::log(0.75) +
                                   0.25 * std::log(0.25)));
    if (std::abs(s.usage_fraction - 2.0 / 3.0) > 1e-15)
      return std::string("usage wrong");
    if (std::abs(s.perplexity - want) > 1e-12)
      return std::string("perplexity wrong");
    return std::string();
  });

  check("conv2d equals direct convolution", [&] {
    struct Case {
      int ci, co, k, s, p, g, h, w;
    } cases[] = {{3, 8, 3, 1, 1, 1, 7, 9},
                 {4, 6, 3, 2, 1, 2, 8, 8},
                 {5, 5, 3, 1, 1, 5, 6, 6},
                 {2, 4, 1, 1, 0, 1, 5, 5}};
    for (const auto& c : cases) {
      auto x = detail::rand_tensor<D>({2, c.ci, c.h, c.w}, rng);
      auto k = detail::rand_tensor<D>({c.co, c.ci / c.g, c.k, c.k}, rng);
      auto got = conv2d(x, k, c.s, c.p, c.g);
      auto want = conv2d_naive(*x, *k, c.s, c.p, c.g);
      for (size_t i = 0; i < got->v.size(); ++i)
        if (std::abs(got->v[i] - want->v[i]) > 1e-10)
          return std::string("mismatch at element ") + std::to_string(i);
    }
    return std::string();
  });

  check("conv2d_transpose adjoint identity and direct oracle", [&] {
    auto A = detail::rand_tensor<D>({1, 3, 7, 5}, rng);
    auto K = detail::rand_tensor<D>({4, 3, 3, 3}, rng);  // (Co, Ci, kh, kw)
    auto Y = conv2d(A, K, 2, 1);
    auto B = detail::rand_tensor<D>(Y->shape, rng);
    // <conv2d(A), B> must equal <A, conv2d_transpose(B)> with shared kernel
    // memory reinterpreted as (Ci_t = Co, Co_t = Ci).
    auto Kt = Tensor4<D>::from({4, 3, 3, 3}, K->v);
    auto At = conv2d_transpose(B, Kt, 2, 1);
    if (!(At->shape == A->shape))
      return std::string("adjoint output shape mismatch");
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < Y->v.size(); ++i) lhs += Y->v[i] * B->v[i];
    for (size_t i = 0; i < A->v.size(); ++i) rhs += A->v[i] * At->v[i];
    if (std::abs(lhs - rhs) > 1e-9 * std::max(1.0, std::abs(lhs)))
      return "adjoint mismatch " + std::to_string(lhs) + " vs " +
             std::to_string(rhs);
    auto want = conv2d_transpose_naive(*B, *Kt, 2, 1);
    for (size_t i = 0; i < At->v.size(); ++i)
      if (std::abs(At->v[i] - want->v[i]) > 1e-10)
        return std::string("direct oracle mismatch");
    return std::string();
  });

  check("fold(unfold) bit-exact round trip", [&] {
    for (int i = 0; i < 20; ++i) {
      const int ph = 1 + rng.below(3), pw = 1 + rng.below(3);
      const int H = ph * (1 + rng.below(5));
      const int W = pw * (1 + rng.below(5));
      auto x = detail::rand_tensor<D>({2, 1 + rng.below(6), H, W}, rng);
      auto back = fold(unfold(x, pw, ph));
      if (back->v != x->v) return std::string("round trip differs");
    }
    return std::string();
  });

  auto gc = [&](const std::string& name, auto make_loss, Shape4 in_shape,
                double tol) {
    check(name, [&, make_loss, in_shape, tol]() -> std::string {
      auto x = detail::rand_tensor<D>(in_shape, rng, true);
      const double err = grad_check<D>(make_loss, x, 1e-5);
      if (err > tol)
        return "max_rel_err " + std::to_string(err) + " > " +
               std::to_string(tol);
      return {};
    });
  };

  {
    auto w = detail::rand_tensor<D>({1, 2, 3, 4}, rng);
    gc("softmax gradient", [w](const TensorPtr<D>& x) {
      return sum_all(mul(softmax(x, 3), w));
    }, {1, 2, 3, 4}, 1e-6);
  }
  {
    auto gamma = detail::rand_tensor<D>({1, 1, 1, 5}, rng);
    auto beta = detail::rand_tensor<D>({1, 1, 1, 5}, rng);
    auto w = detail::rand_tensor<D>({2, 1, 3, 5}, rng);
    gc("layer_norm gradient", [gamma, beta, w](const TensorPtr<D>& x) {
      return sum_all(mul(layer_norm(x, gamma, beta), w));
    }, {2, 1, 3, 5}, 1e-6);
  }
  {
    auto gamma = detail::rand_tensor<D>({1, 3, 1, 1}, rng);
    auto beta = detail::rand_tensor<D>({1, 3, 1, 1}, rng);
    auto st = std::make_shared<BatchNormState<D>>(3);
    auto w = detail::rand_tensor<D>({2, 3, 4, 4}, rng);
    gc("batch_norm gradient (training mode)",
       [gamma, beta, st, w](const TensorPtr<D>& x) {
         return sum_all(
             mul(batch_norm(x, gamma, beta, st, true, false), w));
       },
       {2, 3, 4, 4}, 1e-6);
  }
  {
    auto k = detail::rand_tensor<D>({4, 3, 3, 3}, rng);
    auto w = detail::rand_tensor<D>({1, 4, 3, 3}, rng);
    gc("conv2d input gradient", [k, w](const TensorPtr<D>& x) {
      return sum_all(mul(conv2d(x, k, 2, 1), w));
    }, {1, 3, 6, 6}, 1e-6);
    auto x0 = detail::rand_tensor<D>({1, 3, 6, 6}, rng);
    gc("conv2d kernel gradient", [x0, w](const TensorPtr<D>& k2) {
      return sum_all(mul(conv2d(x0, k2, 2, 1), w));
    }, {4, 3, 3, 3}, 1e-6);
  }

  check("cross_entropy uniform logits = ln C", [&] {
    auto logits = Tensor4<D>::make({1, 5, 2, 2}, false);
    std::vector<int32_t> labels = {0, 1, 2, 3};
    const double got = cross_entropy(logits, labels)->item();
    if (std::abs(got - std::log(5.0)) > 1e-12)
      return "got " + std::to_string(got);
    return std::string();
  });

  {
    std::vector<int32_t> labels = {0, 2, 255, 1, 1, 0};
    gc("cross_entropy gradient",
       [labels](const TensorPtr<D>& x) {
         return cross_entropy(x, labels);
       },
       {1, 3, 2, 3}, 1e-8);
  }

  check("straight-through decomposition (term-by-term)", [&] {
    VQConfig cfg;
    cfg.K = 4;
    cfg.d = 3;
    cfg.beta = 0.25;
    cfg.seed = 9;
    auto cb = init_codebook<D>(cfg);
    auto X = detail::rand_tensor<D>({1, 3, 2, 2}, rng, true, 0.3);
    auto w = detail::rand_tensor<D>({1, 3, 2, 2}, rng);
    auto vq = vq_quantize(X, cb, cfg);
    auto loss = add(sum_all(mul(vq.zq, w)), vq.vq_loss);
    backward(loss);
    const double npos = 4.0;
    for (size_t i = 0; i < X->v.size(); ++i) {
      const double expect =
          w->v[i] + cfg.beta * 2.0 * (X->v[i] - vq.zq->v[i]) / npos;
      if (std::abs(X->g[i] - expect) > 1e-10)
        return std::string("encoder grad term mismatch");
    }
    // Task loss alone must leave the codebook untouched.
    cb->zero_grad();
    auto vq2 = vq_quantize(X, cb, cfg);
    backward(sum_all(mul(vq2.zq, w)));
    for (const auto& g : cb->g)
      if (g != 0.0) return std::string("codebook received task gradient");
    return std::string();
  });

  check("vq_backward matches the autodiff routing", [&] {
    VQConfig cfg;
    cfg.K = 5;
    cfg.d = 2;
    cfg.beta = 0.25;
    cfg.seed = 3;
    auto cb = init_codebook<D>(cfg);
    auto X = detail::rand_tensor<D>({1, 2, 2, 3}, rng, true, 0.2);
    auto w = detail::rand_tensor<D>({1, 2, 2, 3}, rng);
    auto vq = vq_quantize(X, cb, cfg);
    backward(add(sum_all(mul(vq.zq, w)), vq.vq_loss));
    auto [gx, gcb] = vq_backward(*w, X, *vq.zq, cb, cfg);
    for (size_t i = 0; i < X->v.size(); ++i)
      if (std::abs(gx->v[i] - X->g[i]) > 1e-12)
        return std::string("grad_x mismatch");
    for (size_t i = 0; i < cb->v.size(); ++i)
      if (std::abs(gcb->v[i] - cb->g[i]) > 1e-12)
        return std::string("grad_codebook mismatch");
    return std::string();
  });

  check("iou_report equals counting oracle (50 cases)", [&] {
    for (int i = 0; i < 50; ++i) {
      const int C = 2 + rng.below(5);
      const int H = 3 + rng.below(6), W = 3 + rng.below(6);
      std::vector<int32_t> pred(size_t(H) * W), gt(size_t(H) * W);
      for (auto& p : pred) p = int32_t(rng.below(C));
      for (auto& g : gt)
        g = rng.below(8) == 0 ? kIgnoreIndex : int32_t(rng.below(C));
      ConfusionMatrix cm(C);
      accumulate_confusion(pred, gt, H, W, kIgnoreIndex, cm);
      bool any = cm.total() > 0;
      if (!any) continue;
      const IoUReport got = iou_report(cm);
      const auto [want_miou, want_per] =
          iou_oracle(pred, gt, C, kIgnoreIndex);
      if (std::abs(got.miou - want_miou) > 1e-12)
        return std::string("mIoU mismatch");
      for (int c = 0; c < C; ++c) {
        const auto& a = got.per_class[size_t(c)];
        const auto& b = want_per[size_t(c)];
        if (a.has_value() != b.has_value())
          return std::string("definedness mismatch");
        if (a && std::abs(*a - *b) > 1e-12)
          return std::string("per-class mismatch");
      }
    }
    return std::string();
  });

  check("poly_lr boundary and midpoint values", [&] {
    if (poly_lr(0, 0.01, 100, 1.0) != 0.01) return std::string("iter 0");
    if (poly_lr(100, 0.01, 100, 1.0) != 0.0) return std::string("iter max");
    if (std::abs(poly_lr(50, 0.01, 100, 1.0) - 0.005) > 1e-18)
      return std::string("midpoint");
    return std::string();
  });

  check("adamw fixed point and decoupled decay", [&] {
    auto p = Tensor4<D>::from({1, 1, 1, 3}, {1.0, -2.0, 0.5}, true);
    p->ensure_grad();
    std::vector<std::pair<std::string, TensorPtr<D>>> params = {{"p", p}};
    AdamW<D> no_decay(0.9, 0.999, 1e-8, 0.0);
    no_decay.step(params, 0.1);
    if (p->v != std::vector<D>{1.0, -2.0, 0.5})
      return std::string("zero grad, zero decay moved parameters");
    AdamW<D> decay(0.9, 0.999, 1e-8, 0.01);
    decay.step(params, 0.1);
    const double f = 1.0 - 0.1 * 0.01;
    if (std::abs(p->v[0] - 1.0 * f) > 1e-15 ||
        std::abs(p->v[1] - -2.0 * f) > 1e-15 ||
        std::abs(p->v[2] - 0.5 * f) > 1e-15)
      return std::string("decay factor wrong");
    return std::string();
  });

  return results;
}

/// Prints one PASS/FAIL line per check; returns true iff all pass.
inline bool selftest_main(std::ostream& os) {
  const auto results = run_selftest();
  bool all = true;
  for (const auto& r : results) {
    os << (r.ok ? "PASS" : "FAIL") << "  " << r.name;
    if (!r.ok) os << "  (" << r.detail << ")";
    os << "\n";
    all = all && r.ok;
  }
  os << (all ? "selftest: all checks passed\n" : "selftest: FAILURES\n");
  return all;
}

}  // namespace vqseg
