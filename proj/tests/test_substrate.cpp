#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vqseg/conv.hpp"
#include "vqseg/gradcheck.hpp"
#include "vqseg/ops.hpp"
#include "vqseg/verify.hpp"

using namespace vqseg;
using Catch::Approx;
using D = double;

namespace {

TensorPtr<D> randn(Shape4 s, Rng& rng, bool rg = false) {
  return Tensor4<D>::randn(s, rng, 1.0, rg);
}

// Plain triple-loop matmul over the two trailing dims, honoring transposes
// and (1,1) batch broadcast on b.
TensorPtr<D> matmul_naive(const Tensor4<D>& a, const Tensor4<D>& b,
                          bool ta, bool tb) {
  const int M = ta ? a.shape.w : a.shape.h;
  const int K = ta ? a.shape.h : a.shape.w;
  const int N = tb ? b.shape.h : b.shape.w;
  auto out = Tensor4<D>::make({a.shape.n, a.shape.c, M, N}, false);
  const bool bcast = b.shape.n == 1 && b.shape.c == 1;
  for (int n = 0; n < a.shape.n; ++n)
    for (int c = 0; c < a.shape.c; ++c) {
      const int bn = bcast ? 0 : n, bc = bcast ? 0 : c;
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
          D acc = 0;
          for (int k = 0; k < K; ++k) {
            const D av = ta ? a.at(n, c, k, i) : a.at(n, c, i, k);
            const D bv = tb ? b.at(bn, bc, j, k) : b.at(bn, bc, k, j);
            acc += av * bv;
          }
          out->at(n, c, i, j) = acc;
        }
    }
  return out;
}

}  // namespace

TEST_CASE("tensor layout is row-major over (n, c, h, w)") {
  auto t = Tensor4<D>::make({2, 3, 4, 5});
  REQUIRE(t->numel() == 120);
  REQUIRE(t->idx(0, 0, 0, 1) == 1);
  REQUIRE(t->idx(0, 0, 1, 0) == 5);
  REQUIRE(t->idx(0, 1, 0, 0) == 20);
  REQUIRE(t->idx(1, 0, 0, 0) == 60);
  REQUIRE(t->idx(1, 2, 3, 4) == 119);
  REQUIRE_THROWS_AS(Tensor4<D>::from({1, 1, 2, 2}, {1.0, 2.0, 3.0}),
                    ConfigError);
}

TEST_CASE("backward through a small composite graph") {
  auto x = Tensor4<D>::scalar(3.0, true);
  auto y = Tensor4<D>::scalar(5.0, true);
  auto loss = add(mul(x, y), x);  // x*y + x
  REQUIRE(loss->item() == Approx(18.0));
  backward(loss);
  REQUIRE(x->g[0] == Approx(6.0));  // y + 1
  REQUIRE(y->g[0] == Approx(3.0));  // x
}

TEST_CASE("gradient accumulates when one node feeds two consumers") {
  auto x = Tensor4<D>::scalar(7.0, true);
  backward(add(x, x));
  REQUIRE(x->g[0] == Approx(2.0));
}

TEST_CASE("backward zeroes gradients from earlier passes") {
  auto x = Tensor4<D>::scalar(2.0, true);
  backward(mul(x, x));
  REQUIRE(x->g[0] == Approx(4.0));
  backward(mul(x, x));  // fresh graph, same leaf
  REQUIRE(x->g[0] == Approx(4.0));
}

TEST_CASE("backward requires a scalar root") {
  auto x = Tensor4<D>::from({1, 1, 1, 2}, {1.0, 2.0}, true);
  auto y = add(x, x);
  REQUIRE_THROWS_AS(backward(y), ConfigError);
}

TEST_CASE("elementwise ops: values") {
  auto a = Tensor4<D>::from({1, 1, 1, 3}, {1.0, -2.0, 0.5});
  auto b = Tensor4<D>::from({1, 1, 1, 3}, {4.0, 0.25, -1.0});
  auto s = add(a, b);
  REQUIRE(s->v == std::vector<D>{5.0, -1.75, -0.5});
  auto p = mul(a, b);
  REQUIRE(p->v == std::vector<D>{4.0, -0.5, -0.5});
  auto k = scale(a, 2.0);
  REQUIRE(k->v == std::vector<D>{2.0, -4.0, 1.0});

  auto z = silu(Tensor4<D>::from({1, 1, 1, 2}, {0.0, 1.0}));
  REQUIRE(z->v[0] == Approx(0.0));
  REQUIRE(z->v[1] == Approx(1.0 / (1.0 + std::exp(-1.0))));

  REQUIRE_THROWS_AS(add(a, Tensor4<D>::make({1, 1, 1, 4})), ConfigError);
  REQUIRE_THROWS_AS(mul(a, Tensor4<D>::make({1, 1, 2, 3})), ConfigError);
}

TEST_CASE("elementwise ops: gradients match finite differences") {
  Rng rng(11);
  auto w = randn({1, 2, 3, 4}, rng);
  auto b = randn({1, 2, 3, 4}, rng);

  auto x1 = randn({1, 2, 3, 4}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& x) { return sum_all(mul(add(x, b), w)); },
              x1, 1e-6) < 1e-8);
  auto x2 = randn({1, 2, 3, 4}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& x) {
                return sum_all(mul(silu(scale(x, 0.7)), w));
              },
              x2, 1e-6) < 1e-7);
  auto x3 = randn({1, 2, 3, 4}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& x) { return mean_all(mul(x, x)); },
              x3, 1e-6) < 1e-8);
}

TEST_CASE("bias broadcasts over channels and over the last axis") {
  auto x = Tensor4<D>::from({1, 2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  auto bc = Tensor4<D>::from({1, 2, 1, 1}, {10.0, 20.0});
  auto yc = bias_channel(x, bc);
  REQUIRE(yc->v == std::vector<D>{11.0, 12.0, 23.0, 24.0});

  auto bl = Tensor4<D>::from({1, 1, 1, 2}, {100.0, 200.0});
  auto yl = bias_last(x, bl);
  REQUIRE(yl->v == std::vector<D>{101.0, 202.0, 103.0, 204.0});

  Rng rng(3);
  auto xx = randn({2, 3, 2, 5}, rng, true);
  auto w = randn({2, 3, 2, 5}, rng);
  auto b3 = randn({1, 3, 1, 1}, rng);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(bias_channel(t, b3), w));
              },
              xx, 1e-6) < 1e-8);
  auto bb = randn({1, 3, 1, 1}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(bias_channel(xx, t), w));
              },
              bb, 1e-6) < 1e-8);
  auto bw = randn({1, 1, 1, 5}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(bias_last(xx, t), w));
              },
              bw, 1e-6) < 1e-8);
}

TEST_CASE("concat_channels stacks values and splits gradients") {
  auto a = Tensor4<D>::from({1, 1, 1, 2}, {1.0, 2.0});
  auto b = Tensor4<D>::from({1, 2, 1, 2}, {3.0, 4.0, 5.0, 6.0});
  auto c = concat_channels(a, b);
  REQUIRE(c->shape == Shape4{1, 3, 1, 2});
  REQUIRE(c->v == std::vector<D>{1.0, 2.0, 3.0, 4.0, 5.0, 6.0});

  Rng rng(4);
  auto w = randn({1, 3, 1, 2}, rng);
  auto aa = randn({1, 1, 1, 2}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(concat_channels(t, b), w));
              },
              aa, 1e-6) < 1e-8);
  auto bb = randn({1, 2, 1, 2}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(concat_channels(a, t), w));
              },
              bb, 1e-6) < 1e-8);
  REQUIRE_THROWS_AS(concat_channels(a, Tensor4<D>::make({1, 1, 2, 2})),
                    ConfigError);
}

TEST_CASE("resize_nearest2x repeats pixels; its adjoint sums them") {
  auto x = Tensor4<D>::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  auto y = resize_nearest2x(x);
  REQUIRE(y->shape == Shape4{1, 1, 4, 4});
  REQUIRE(y->at(0, 0, 0, 0) == 1.0);
  REQUIRE(y->at(0, 0, 0, 1) == 1.0);
  REQUIRE(y->at(0, 0, 1, 1) == 1.0);
  REQUIRE(y->at(0, 0, 2, 3) == 4.0);
  backward(sum_all(y));
  for (D g : x->g) REQUIRE(g == Approx(4.0));
}

TEST_CASE("reshape keeps data, permute moves it") {
  auto x = Tensor4<D>::from({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  auto r = reshape(x, {2, 1, 2, 2});
  REQUIRE(r->v == x->v);
  REQUIRE_THROWS_AS(reshape(x, Shape4{1, 1, 3, 3}), ConfigError);

  auto p = permute(x, {0, 2, 3, 1});  // (1,2,2,2) -> (1,2,2,2), c to last
  REQUIRE(p->at(0, 0, 0, 0) == x->at(0, 0, 0, 0));
  REQUIRE(p->at(0, 0, 0, 1) == x->at(0, 1, 0, 0));
  REQUIRE(p->at(0, 1, 1, 0) == x->at(0, 0, 1, 1));

  // Applying the inverse order restores the original bit pattern.
  auto back = permute(p, {0, 3, 1, 2});
  REQUIRE(back->v == x->v);

  Rng rng(5);
  auto w = randn({1, 2, 2, 2}, rng);
  auto xx = randn({1, 2, 2, 2}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(
                    mul(reshape(permute(t, {0, 2, 3, 1}), t->shape), w));
              },
              xx, 1e-6) < 1e-8);
}

TEST_CASE("matmul matches a straightforward triple loop") {
  Rng rng(21);
  const bool flags[2] = {false, true};
  for (bool ta : flags)
    for (bool tb : flags) {
      const int M = 3, K = 4, N = 5;
      auto a = randn(ta ? Shape4{2, 3, K, M} : Shape4{2, 3, M, K}, rng);
      auto b = randn(tb ? Shape4{2, 3, N, K} : Shape4{2, 3, K, N}, rng);
      auto got = matmul(a, b, ta, tb);
      auto want = matmul_naive(*a, *b, ta, tb);
      REQUIRE(got->shape == want->shape);
      for (size_t i = 0; i < got->v.size(); ++i)
        REQUIRE(got->v[i] == Approx(want->v[i]).margin(1e-12));
    }

  // (1,1) batch on b broadcasts across a's batch dims.
  auto a = randn({2, 3, 3, 4}, rng);
  auto b = randn({1, 1, 4, 5}, rng);
  auto got = matmul(a, b);
  auto want = matmul_naive(*a, *b, false, false);
  for (size_t i = 0; i < got->v.size(); ++i)
    REQUIRE(got->v[i] == Approx(want->v[i]).margin(1e-12));

  REQUIRE_THROWS_AS(matmul(randn({1, 1, 2, 3}, rng), randn({1, 1, 4, 2}, rng)),
                    ConfigError);
  REQUIRE_THROWS_AS(matmul(randn({2, 1, 2, 3}, rng), randn({3, 1, 3, 2}, rng)),
                    ConfigError);
}

TEST_CASE("matmul gradients for every transpose and broadcast case") {
  Rng rng(22);
  const bool flags[2] = {false, true};
  for (bool ta : flags)
    for (bool tb : flags) {
      const int M = 2, K = 3, N = 2;
      auto a = randn(ta ? Shape4{1, 2, K, M} : Shape4{1, 2, M, K}, rng, true);
      auto b = randn(tb ? Shape4{1, 2, N, K} : Shape4{1, 2, K, N}, rng);
      auto w = randn({1, 2, M, N}, rng);
      REQUIRE(grad_check<D>(
                  [&](const TensorPtr<D>& t) {
                    return sum_all(mul(matmul(t, b, ta, tb), w));
                  },
                  a, 1e-6) < 1e-7);
      auto b2 = randn(tb ? Shape4{1, 2, N, K} : Shape4{1, 2, K, N}, rng, true);
      REQUIRE(grad_check<D>(
                  [&](const TensorPtr<D>& t) {
                    return sum_all(mul(matmul(a, t, ta, tb), w));
                  },
                  b2, 1e-6) < 1e-7);
    }

  // Broadcast b: gradient must accumulate across all batch slices.
  auto a = randn({2, 2, 2, 3}, rng);
  auto bb = randn({1, 1, 3, 2}, rng, true);
  auto w = randn({2, 2, 2, 2}, rng);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(matmul(a, t), w));
              },
              bb, 1e-6) < 1e-7);
  auto aa = randn({2, 2, 2, 3}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(matmul(t, bb), w));
              },
              aa, 1e-6) < 1e-7);
}

TEST_CASE("softmax normalizes, shifts away constants, and differentiates") {
  auto x = Tensor4<D>::from({1, 1, 1, 2}, {0.0, std::log(3.0)});
  auto p = softmax(x, 3);
  REQUIRE(p->v[0] == Approx(0.25));
  REQUIRE(p->v[1] == Approx(0.75));

  Rng rng(31);
  auto big = randn({2, 3, 4, 5}, rng);
  for (int axis = 0; axis < 4; ++axis) {
    auto q = softmax(big, axis);
    // Sum along the softmax axis is 1 everywhere.
    const int len = big->shape.dim(axis);
    std::vector<D> sums(size_t(big->numel() / len), 0.0);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= big->shape.dim(i);
    for (int i = axis + 1; i < 4; ++i) inner *= big->shape.dim(i);
    for (int64_t o = 0; o < outer; ++o)
      for (int l = 0; l < len; ++l)
        for (int64_t in = 0; in < inner; ++in)
          sums[size_t(o * inner + in)] += q->v[size_t((o * len + l) * inner + in)];
    for (D s : sums) REQUIRE(s == Approx(1.0));
  }

  // Adding a constant along the axis leaves the result unchanged.
  auto shifted = Tensor4<D>::from({1, 1, 1, 2},
                                  {0.0 + 42.0, std::log(3.0) + 42.0});
  auto p2 = softmax(shifted, 3);
  REQUIRE(p2->v[0] == Approx(p->v[0]));
  REQUIRE(p2->v[1] == Approx(p->v[1]));

  auto w = randn({1, 2, 3, 4}, rng);
  for (int axis : {1, 3}) {
    auto xx = randn({1, 2, 3, 4}, rng, true);
    REQUIRE(grad_check<D>(
                [&](const TensorPtr<D>& t) {
                  return sum_all(mul(softmax(t, axis), w));
                },
                xx, 1e-6) < 1e-7);
  }
}

TEST_CASE("layer_norm standardizes the last axis") {
  Rng rng(41);
  const int W = 6;
  auto x = randn({2, 1, 3, W}, rng);
  auto gamma = Tensor4<D>::make({1, 1, 1, W});
  auto beta = Tensor4<D>::make({1, 1, 1, W});
  for (auto& g : gamma->v) g = 1.0;
  auto y = layer_norm(x, gamma, beta);
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 3; ++h) {
      D mean = 0, var = 0;
      for (int w = 0; w < W; ++w) mean += y->at(n, 0, h, w);
      mean /= W;
      for (int w = 0; w < W; ++w) {
        const D d = y->at(n, 0, h, w) - mean;
        var += d * d;
      }
      var /= W;
      REQUIRE(mean == Approx(0.0).margin(1e-12));
      REQUIRE(var == Approx(1.0).margin(1e-4));  // eps in the denominator
    }

  auto g2 = randn({1, 1, 1, W}, rng);
  auto b2 = randn({1, 1, 1, W}, rng);
  auto w = randn({2, 1, 3, W}, rng);
  auto xx = randn({2, 1, 3, W}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(layer_norm(t, g2, b2), w));
              },
              xx, 1e-6) < 1e-6);
  auto gg = randn({1, 1, 1, W}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(layer_norm(xx, t, b2), w));
              },
              gg, 1e-6) < 1e-7);
  auto bb = randn({1, 1, 1, W}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(layer_norm(xx, g2, t), w));
              },
              bb, 1e-6) < 1e-7);
}

TEST_CASE("batch_norm: training stats, running updates, eval path") {
  Rng rng(51);
  const int C = 3;
  auto x = randn({4, C, 5, 5}, rng);
  auto gamma = Tensor4<D>::make({1, C, 1, 1});
  auto beta = Tensor4<D>::make({1, C, 1, 1});
  for (auto& g : gamma->v) g = 1.0;
  auto st = std::make_shared<BatchNormState<D>>(C);

  auto y = batch_norm(x, gamma, beta, st, true, true);
  const int64_t N = 4 * 5 * 5;
  for (int c = 0; c < C; ++c) {
    D mean = 0, var = 0, bmean = 0, bvar = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          mean += y->at(n, c, i, j);
          bmean += x->at(n, c, i, j);
        }
    mean /= D(N);
    bmean /= D(N);
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          D d = y->at(n, c, i, j) - mean;
          var += d * d;
          d = x->at(n, c, i, j) - bmean;
          bvar += d * d;
        }
    var /= D(N);
    REQUIRE(mean == Approx(0.0).margin(1e-12));
    REQUIRE(var == Approx(1.0).epsilon(1e-3));  // eps shifts it slightly
    // Running stats: 0.9 * init + 0.1 * batch (unbiased variance).
    REQUIRE(st->running_mean[size_t(c)] == Approx(0.1 * bmean).margin(1e-12));
    REQUIRE(st->running_var[size_t(c)] ==
            Approx(0.9 * 1.0 + 0.1 * (bvar / D(N - 1))).margin(1e-12));
  }

  // Eval mode reproduces the closed-form affine using running stats.
  auto ye = batch_norm(x, gamma, beta, st, false);
  for (int c = 0; c < C; ++c) {
    const D inv = 1.0 / std::sqrt(st->running_var[size_t(c)] + 1e-5);
    REQUIRE(ye->at(1, c, 2, 3) ==
            Approx((x->at(1, c, 2, 3) - st->running_mean[size_t(c)]) * inv));
  }

  // update_running=false leaves the stats alone.
  const auto keep_mean = st->running_mean;
  auto y2 = batch_norm(x, gamma, beta, st, true, false);
  REQUIRE(st->running_mean == keep_mean);

  auto w = randn({2, C, 3, 3}, rng);
  auto g2 = randn({1, C, 1, 1}, rng);
  auto b2 = randn({1, C, 1, 1}, rng);
  for (bool training : {true, false}) {
    auto xx = randn({2, C, 3, 3}, rng, true);
    auto st2 = std::make_shared<BatchNormState<D>>(C);
    REQUIRE(grad_check<D>(
                [&](const TensorPtr<D>& t) {
                  return sum_all(
                      mul(batch_norm(t, g2, b2, st2, training, false), w));
                },
                xx, 1e-6) < 1e-6);
  }
  auto xx = randn({2, C, 3, 3}, rng);
  auto st3 = std::make_shared<BatchNormState<D>>(C);
  auto gg = randn({1, C, 1, 1}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(
                    mul(batch_norm(xx, t, b2, st3, true, false), w));
              },
              gg, 1e-6) < 1e-6);
}

TEST_CASE("conv2d equals the direct loop across strides, pads, groups") {
  Rng rng(61);
  struct Case {
    int ci, co, k, s, p, g, h, w;
  };
  for (const Case c : {Case{3, 8, 3, 1, 1, 1, 7, 9},   //
                       Case{4, 6, 3, 2, 1, 2, 8, 8},   //
                       Case{5, 5, 3, 1, 1, 5, 6, 6},   // depthwise
                       Case{2, 4, 1, 1, 0, 1, 5, 5},   // pointwise
                       Case{3, 2, 3, 2, 1, 1, 9, 7}}) {
    auto x = randn({2, c.ci, c.h, c.w}, rng);
    auto k = randn({c.co, c.ci / c.g, c.k, c.k}, rng);
    auto got = conv2d(x, k, c.s, c.p, c.g);
    auto want = conv2d_naive(*x, *k, c.s, c.p, c.g);
    REQUIRE(got->shape == want->shape);
    for (size_t i = 0; i < got->v.size(); ++i)
      REQUIRE(got->v[i] == Approx(want->v[i]).margin(1e-10));
  }

  // 1x1 identity kernel passes the input through.
  auto x = randn({1, 2, 3, 3}, rng);
  auto eye = Tensor4<D>::from({2, 2, 1, 1}, {1.0, 0.0, 0.0, 1.0});
  auto y = conv2d(x, eye, 1, 0);
  REQUIRE(y->v == x->v);

  REQUIRE_THROWS_AS(conv2d(randn({1, 3, 4, 4}, rng),
                           randn({4, 2, 3, 3}, rng), 1, 1),
                    ConfigError);
  REQUIRE_THROWS_AS(conv2d(randn({1, 3, 4, 4}, rng),
                           randn({4, 3, 3, 3}, rng), 0, 1),
                    ConfigError);
  REQUIRE_THROWS_AS(conv2d(randn({1, 4, 4, 4}, rng),
                           randn({4, 1, 3, 3}, rng), 1, 1, 3),
                    ConfigError);
}

TEST_CASE("conv2d gradients (input and kernel) match finite differences") {
  Rng rng(62);
  auto w = randn({1, 4, 3, 3}, rng);
  auto k = randn({4, 3, 3, 3}, rng);
  auto x = randn({1, 3, 6, 6}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(conv2d(t, k, 2, 1), w));
              },
              x, 1e-6) < 1e-7);
  auto kk = randn({4, 3, 3, 3}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(conv2d(x, t, 2, 1), w));
              },
              kk, 1e-6) < 1e-7);

  // Grouped case.
  auto wg = randn({1, 4, 4, 4}, rng);
  auto xg = randn({1, 4, 4, 4}, rng, true);
  auto kg = randn({4, 2, 3, 3}, rng);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(conv2d(t, kg, 1, 1, 2), wg));
              },
              xg, 1e-6) < 1e-7);
}

TEST_CASE("conv2d_transpose: shape, adjoint identity, gradients") {
  Rng rng(71);
  // 2x2 stride-2 kernel doubles spatial dims.
  auto x = randn({1, 3, 5, 7}, rng);
  auto k = randn({3, 2, 2, 2}, rng);  // (Ci, Co, kh, kw)
  auto y = conv2d_transpose(x, k, 2, 0);
  REQUIRE(y->shape == Shape4{1, 2, 10, 14});

  auto want = conv2d_transpose_naive(*x, *k, 2, 0);
  for (size_t i = 0; i < y->v.size(); ++i)
    REQUIRE(y->v[i] == Approx(want->v[i]).margin(1e-10));

  // <conv2d(A, K), B> == <A, conv2d_transpose(B, K)> on the same kernel data.
  // Shapes chosen so (H + 2p - k) divides the stride and the geometry
  // round-trips exactly.
  auto A = randn({2, 4, 7, 7}, rng);
  auto K = randn({5, 4, 3, 3}, rng);
  auto Y = conv2d(A, K, 2, 1);
  auto B = randn(Y->shape, rng);
  auto Kt = Tensor4<D>::from({5, 4, 3, 3}, K->v);
  auto At = conv2d_transpose(B, Kt, 2, 1);
  REQUIRE(At->shape == A->shape);
  D lhs = 0, rhs = 0;
  for (size_t i = 0; i < Y->v.size(); ++i) lhs += Y->v[i] * B->v[i];
  for (size_t i = 0; i < A->v.size(); ++i) rhs += A->v[i] * At->v[i];
  REQUIRE(lhs == Approx(rhs));

  auto w = randn({1, 2, 10, 14}, rng);
  auto xx = randn({1, 3, 5, 7}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(conv2d_transpose(t, k, 2, 0), w));
              },
              xx, 1e-6) < 1e-7);
  auto kk = randn({3, 2, 2, 2}, rng, true);
  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) {
                return sum_all(mul(conv2d_transpose(x, t, 2, 0), w));
              },
              kk, 1e-6) < 1e-7);
}

TEST_CASE("grad_check guards its inputs and catches wrong derivatives") {
  Rng rng(81);
  auto x = randn({1, 1, 2, 2}, rng, true);
  auto quad = [](const TensorPtr<D>& t) { return sum_all(mul(t, t)); };
  REQUIRE_THROWS_AS(grad_check<D>(quad, x, 0.0), ConfigError);
  REQUIRE_THROWS_AS(grad_check<D>(quad, x, 0.5), ConfigError);
  REQUIRE(grad_check<D>(quad, x, 1e-6) < 1e-9);

  // A deliberately wrong backward must be flagged, not absorbed.
  auto broken = [](const TensorPtr<D>& t) {
    auto y = Tensor4<D>::make(t->shape, true);
    y->v = t->v;
    if (y->requires_grad) {
      y->parents = {t};
      y->backward_fn = [t](Tensor4<D>& self) {
        t->ensure_grad();
        for (size_t i = 0; i < t->v.size(); ++i)
          t->g[i] += 2.0 * self.g[i];  // claims dy/dx = 2
      };
    }
    return sum_all(y);
  };
  REQUIRE(grad_check<D>(broken, x, 1e-6) > 0.4);
}

TEST_CASE("NoGradGuard builds no graph") {
  Rng rng(91);
  auto x = randn({1, 2, 2, 2}, rng, true);
  {
    NoGradGuard ng;
    auto y = mul(add(x, x), x);
    REQUIRE_FALSE(y->requires_grad);
    REQUIRE(y->parents.empty());
    REQUIRE_FALSE(y->backward_fn);
  }
  // Graph construction resumes after the guard.
  auto y = add(x, x);
  REQUIRE(y->requires_grad);
  REQUIRE(y->parents.size() == 2);
}

TEST_CASE("sum_all and mean_all reduce with unit gradients") {
  auto x = Tensor4<D>::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  auto s = sum_all(x);
  REQUIRE(s->item() == Approx(10.0));
  backward(s);
  for (D g : x->g) REQUIRE(g == Approx(1.0));

  auto m = mean_all(x);
  REQUIRE(m->item() == Approx(2.5));
  backward(m);
  for (D g : x->g) REQUIRE(g == Approx(0.25));
}
