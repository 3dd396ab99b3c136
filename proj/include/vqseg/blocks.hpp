#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vqseg/conv.hpp"
#include "vqseg/errors.hpp"
#include "vqseg/ops.hpp"
#include "vqseg/rng.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

/// Mode flags threaded through every forward pass. update_running lets
/// finite-difference checks run training-mode batch norm without mutating
/// the running statistics between probe evaluations.
struct RunFlags {
  bool training = false;
  bool update_running = true;
};

/// Ordered registry of learnable tensors and batch-norm running statistics.
/// Declaration order here fixes the checkpoint serialization order.
template <typename T>
class ParamStore {
 public:
  TensorPtr<T> add(const std::string& name, Shape4 s) {
    auto t = Tensor4<T>::make(s, true);
    params_.emplace_back(name, t);
    return t;
  }
  TensorPtr<T> adopt(const std::string& name, TensorPtr<T> t) {
    params_.emplace_back(name, t);
    return t;
  }
  std::shared_ptr<BatchNormState<T>> add_bn(const std::string& name,
                                            int channels) {
    auto st = std::make_shared<BatchNormState<T>>(channels);
    buffers_.emplace_back(name, st);
    return st;
  }
  TensorPtr<T> find(const std::string& name) const {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    return nullptr;
  }
  const std::vector<std::pair<std::string, TensorPtr<T>>>& params() const {
    return params_;
  }
  const std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>>&
  buffers() const {
    return buffers_;
  }
  int64_t count() const {
    int64_t c = 0;
    for (auto& [n, t] : params_) c += t->numel();
    return c;
  }
  int64_t count_prefix(const std::string& prefix) const {
    int64_t c = 0;
    for (auto& [n, t] : params_)
      if (n.rfind(prefix, 0) == 0) c += t->numel();
    return c;
  }

 private:
  std::vector<std::pair<std::string, TensorPtr<T>>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>>
      buffers_;
};

namespace detail {

template <typename T>
void normal_init(Tensor4<T>& t, double stddev, Rng& rng) {
  for (auto& e : t.v) e = T(rng.normal() * stddev);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution + batch norm + optional SiLU
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBnAct {
  TensorPtr<T> kernel, gamma, beta;
  std::shared_ptr<BatchNormState<T>> bn;
  int stride, pad, groups;
  bool act;

  ConvBnAct(ParamStore<T>& ps, const std::string& prefix, int ci, int co,
            int k, int stride_, int pad_, int groups_, bool act_, Rng& rng)
      : stride(stride_), pad(pad_), groups(groups_), act(act_) {
    kernel = ps.add(prefix + ".kernel", {co, ci / groups_, k, k});
    const double fan_in = double(ci / groups_) * k * k;
    detail::normal_init(*kernel, std::sqrt(2.0 / fan_in), rng);
    gamma = ps.add(prefix + ".bn.gamma", {1, co, 1, 1});
    beta = ps.add(prefix + ".bn.beta", {1, co, 1, 1});
    for (auto& e : gamma->v) e = T(1);
    bn = ps.add_bn(prefix + ".bn", co);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, const RunFlags& rf) const {
    auto y = conv2d(x, kernel, stride, pad, groups);
    y = batch_norm(y, gamma, beta, bn, rf.training, rf.update_running);
    return act ? silu(y) : y;
  }
};

// ---------------------------------------------------------------------------
// Inverted residual block
// ---------------------------------------------------------------------------

template <typename T>
struct InvertedResidual {
  std::unique_ptr<ConvBnAct<T>> expand;  // absent when expansion == 1
  std::unique_ptr<ConvBnAct<T>> dw, proj;
  bool residual;

  /// request_residual: -1 auto (use when legal), 0 never, 1 require.
  InvertedResidual(ParamStore<T>& ps, const std::string& prefix, int ci,
                   int co, int stride, int expansion, Rng& rng,
                   int request_residual = -1) {
    if (stride != 1 && stride != 2)
      throw ConfigError("inverted_residual: stride must be 1 or 2");
    if (expansion < 1)
      throw ConfigError("inverted_residual: expansion must be >= 1");
    const bool legal = stride == 1 && ci == co;
    if (request_residual == 1 && !legal)
      throw ConfigError(
          "inverted_residual: residual requires stride 1 and equal channel "
          "counts, got stride " +
          std::to_string(stride) + ", " + std::to_string(ci) + " -> " +
          std::to_string(co));
    residual = request_residual == 0 ? false : legal;
    const int hidden = ci * expansion;
    if (expansion != 1)
      expand = std::make_unique<ConvBnAct<T>>(ps, prefix + ".expand", ci,
                                              hidden, 1, 1, 0, 1, true, rng);
    dw = std::make_unique<ConvBnAct<T>>(ps, prefix + ".dw", hidden, hidden, 3,
                                        stride, 1, hidden, true, rng);
    proj = std::make_unique<ConvBnAct<T>>(ps, prefix + ".proj", hidden, co, 1,
                                          1, 0, 1, false, rng);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, const RunFlags& rf) const {
    auto h = expand ? expand->forward(x, rf) : x;
    h = dw->forward(h, rf);
    h = proj->forward(h, rf);
    return residual ? add(h, x) : h;
  }
};

// ---------------------------------------------------------------------------
// Patch unfold / fold
// ---------------------------------------------------------------------------

/// Feature field rearranged into patches: data has shape (n, P, N, d) where
/// P = patch_w * patch_h intra-patch positions and N = H*W/P patches.
template <typename T>
struct PatchGrid {
  TensorPtr<T> data;
  int patch_w = 0, patch_h = 0;
  int origin_h = 0, origin_w = 0;
};

/// Splits (n, d, H, W) into patches. Pixel (i, j) lands in patch
/// t = (i/ph)*(W/pw) + j/pw at intra-patch position p = (i%ph)*pw + (j%pw).
template <typename T>
PatchGrid<T> unfold(const TensorPtr<T>& x, int patch_w, int patch_h) {
  const Shape4& s = x->shape;
  if (patch_w < 1 || patch_h < 1)
    throw ConfigError("unfold: patch dims must be >= 1");
  if (s.h % patch_h != 0 || s.w % patch_w != 0)
    throw ConfigError(
        "unfold: input " + s.str() + " not divisible by patch " +
        std::to_string(patch_w) + "x" + std::to_string(patch_h) +
        "; pad H by " + std::to_string((patch_h - s.h % patch_h) % patch_h) +
        " and W by " + std::to_string((patch_w - s.w % patch_w) % patch_w));
  const int P = patch_w * patch_h;
  const int N = (s.h / patch_h) * (s.w / patch_w);
  const int d = s.c;
  const int wpatches = s.w / patch_w;
  auto out = Tensor4<T>::make({s.n, P, N, d}, x->requires_grad);
  for (int b = 0; b < s.n; ++b)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const int t = (i / patch_h) * wpatches + j / patch_w;
        const int p = (i % patch_h) * patch_w + (j % patch_w);
        for (int c = 0; c < d; ++c)
          out->v[size_t(out->idx(b, p, t, c))] =
              x->v[size_t(x->idx(b, c, i, j))];
      }
  if (out->requires_grad) {
    out->parents = {x};
    const int H = s.h, W = s.w;
    out->backward_fn = [x, patch_w, patch_h, wpatches, H, W,
                        d](Tensor4<T>& self) {
      x->ensure_grad();
      for (int b = 0; b < x->shape.n; ++b)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const int t = (i / patch_h) * wpatches + j / patch_w;
            const int p = (i % patch_h) * patch_w + (j % patch_w);
            for (int c = 0; c < d; ++c)
              x->g[size_t(x->idx(b, c, i, j))] +=
                  self.g[size_t(self.idx(b, p, t, c))];
          }
    };
  }
  return {out, patch_w, patch_h, s.h, s.w};
}

/// Exact inverse of unfold.
template <typename T>
TensorPtr<T> fold(const PatchGrid<T>& grid) {
  const TensorPtr<T>& xp = grid.data;
  const Shape4& s = xp->shape;
  const int P = grid.patch_w * grid.patch_h;
  const int N = grid.patch_h > 0 && grid.patch_w > 0 &&
                        grid.origin_h % grid.patch_h == 0 &&
                        grid.origin_w % grid.patch_w == 0
                    ? (grid.origin_h / grid.patch_h) *
                          (grid.origin_w / grid.patch_w)
                    : -1;
  if (s.c != P || s.h != N)
    throw ConfigError("fold: grid data " + s.str() +
                      " inconsistent with patch " +
                      std::to_string(grid.patch_w) + "x" +
                      std::to_string(grid.patch_h) + " over " +
                      std::to_string(grid.origin_h) + "x" +
                      std::to_string(grid.origin_w));
  const int d = s.w;
  const int wpatches = grid.origin_w / grid.patch_w;
  auto out = Tensor4<T>::make({s.n, d, grid.origin_h, grid.origin_w},
                              xp->requires_grad);
  const int pw = grid.patch_w, ph = grid.patch_h;
  for (int b = 0; b < s.n; ++b)
    for (int i = 0; i < grid.origin_h; ++i)
      for (int j = 0; j < grid.origin_w; ++j) {
        const int t = (i / ph) * wpatches + j / pw;
        const int p = (i % ph) * pw + (j % pw);
        for (int c = 0; c < d; ++c)
          out->v[size_t(out->idx(b, c, i, j))] =
              xp->v[size_t(xp->idx(b, p, t, c))];
      }
  if (out->requires_grad) {
    out->parents = {xp};
    const int H = grid.origin_h, W = grid.origin_w;
    out->backward_fn = [xp, pw, ph, wpatches, H, W, d](Tensor4<T>& self) {
      xp->ensure_grad();
      for (int b = 0; b < self.shape.n; ++b)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const int t = (i / ph) * wpatches + j / pw;
            const int p = (i % ph) * pw + (j % pw);
            for (int c = 0; c < d; ++c)
              xp->g[size_t(xp->idx(b, p, t, c))] +=
                  self.g[size_t(self.idx(b, c, i, j))];
          }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interpatch attention and transformer layer
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  TensorPtr<T> w, b;  // w: (1, 1, din, dout), b: (1, 1, 1, dout)

  Linear(ParamStore<T>& ps, const std::string& prefix, int din, int dout,
         Rng& rng) {
    w = ps.add(prefix + ".w", {1, 1, din, dout});
    detail::normal_init(*w, std::sqrt(1.0 / double(din)), rng);
    b = ps.add(prefix + ".b", {1, 1, 1, dout});
  }

  TensorPtr<T> forward(const TensorPtr<T>& x) const {
    return bias_last(matmul(x, w), b);
  }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads, d;

  MultiHeadAttention(ParamStore<T>& ps, const std::string& prefix, int d_,
                     int heads_, Rng& rng)
      : wq(ps, prefix + ".wq", d_, d_, rng),
        wk(ps, prefix + ".wk", d_, d_, rng),
        wv(ps, prefix + ".wv", d_, d_, rng),
        wo(ps, prefix + ".wo", d_, d_, rng),
        heads(heads_),
        d(d_) {
    if (heads_ < 1 || d_ % heads_ != 0)
      throw ConfigError("attention: dimension " + std::to_string(d_) +
                        " not divisible by heads " + std::to_string(heads_));
  }

  // x: (n, P, N, d) -> same shape. Attention runs over the N axis
  // independently for every (n, intra-patch position) pair.
  TensorPtr<T> forward(const TensorPtr<T>& x) const {
    const Shape4 s = x->shape;
    const int dh = d / heads;
    auto split = [&](const TensorPtr<T>& t) {
      // (n, P, N, d) -> (n*P, N, heads, dh) -> (n*P, heads, N, dh)
      return permute(reshape(t, {s.n * s.c, s.h, heads, dh}),
                     {0, 2, 1, 3});
    };
    auto q = split(wq.forward(x));
    auto k = split(wk.forward(x));
    auto v = split(wv.forward(x));
    auto attn = softmax(scale(matmul(q, k, false, true),
                              T(1) / std::sqrt(T(dh))),
                        3);
    auto ctx = matmul(attn, v);  // (n*P, heads, N, dh)
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), s);
    return wo.forward(merged);
  }
};

/// Free-function form: multi-head scaled-dot-product attention over the patch
/// axis of the grid, preserving its geometry.
template <typename T>
PatchGrid<T> interpatch_attention(const PatchGrid<T>& grid,
                                  const MultiHeadAttention<T>& mha) {
  if (grid.data->shape.w != mha.d)
    throw ConfigError("interpatch_attention: grid dim " +
                      std::to_string(grid.data->shape.w) +
                      " != attention dim " + std::to_string(mha.d));
  PatchGrid<T> out = grid;
  out.data = mha.forward(grid.data);
  return out;
}

template <typename T>
struct LayerNormP {
  TensorPtr<T> gamma, beta;

  LayerNormP(ParamStore<T>& ps, const std::string& prefix, int d, Rng&) {
    gamma = ps.add(prefix + ".gamma", {1, 1, 1, d});
    beta = ps.add(prefix + ".beta", {1, 1, 1, d});
    for (auto& e : gamma->v) e = T(1);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x) const {
    return layer_norm(x, gamma, beta);
  }
};

/// Pre-norm transformer layer: x + attn(ln1(x)), then y + ffn(ln2(y)).
template <typename T>
struct TransformerLayer {
  LayerNormP<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Linear<T> f1, f2;

  TransformerLayer(ParamStore<T>& ps, const std::string& prefix, int d,
                   int heads, int ffn_hidden, Rng& rng)
      : ln1(ps, prefix + ".ln1", d, rng),
        ln2(ps, prefix + ".ln2", d, rng),
        attn(ps, prefix + ".attn", d, heads, rng),
        f1(ps, prefix + ".ffn.w1", d, ffn_hidden, rng),
        f2(ps, prefix + ".ffn.w2", ffn_hidden, d, rng) {}

  TensorPtr<T> forward(const TensorPtr<T>& x) const {
    auto y = add(x, attn.forward(ln1.forward(x)));
    return add(y, f2.forward(silu(f1.forward(ln2.forward(y)))));
  }
};

// ---------------------------------------------------------------------------
// Composite local-global block
// ---------------------------------------------------------------------------

template <typename T>
struct MobileVitBlock {
  ConvBnAct<T> local3;
  TensorPtr<T> proj_in;  // plain 1x1 conv, channels -> d
  std::vector<TransformerLayer<T>> layers;
  ConvBnAct<T> proj_out, fusion;
  int patch_w, patch_h;

  MobileVitBlock(ParamStore<T>& ps, const std::string& prefix, int channels,
                 int d, int depth, int heads, int ffn_hidden, int patch,
                 Rng& rng)
      : local3(ps, prefix + ".local", channels, channels, 3, 1, 1, 1, true,
               rng),
        proj_out(ps, prefix + ".proj_out", d, channels, 1, 1, 0, 1, true,
                 rng),
        fusion(ps, prefix + ".fusion", 2 * channels, channels, 3, 1, 1, 1,
               true, rng),
        patch_w(patch),
        patch_h(patch) {
    if (depth < 1) throw ConfigError("mobilevit_block: depth must be >= 1");
    proj_in = ps.add(prefix + ".proj_in.kernel", {d, channels, 1, 1});
    detail::normal_init(*proj_in, std::sqrt(2.0 / double(channels)), rng);
    layers.reserve(size_t(depth));
    for (int i = 0; i < depth; ++i)
      layers.emplace_back(ps, prefix + ".tf" + std::to_string(i), d, heads,
                          ffn_hidden, rng);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x, const RunFlags& rf) const {
    auto h = local3.forward(x, rf);
    h = conv2d(h, proj_in, 1, 0);
    auto grid = unfold(h, patch_w, patch_h);
    for (const auto& layer : layers) grid.data = layer.forward(grid.data);
    h = fold(grid);
    h = proj_out.forward(h, rf);
    return fusion.forward(concat_channels(x, h), rf);
  }
};

// ---------------------------------------------------------------------------
// Decoder fusion block
// ---------------------------------------------------------------------------

/// Upsamples the decoder feature (2x transpose conv when the matching encoder
/// stage had stride 2, pointwise conv otherwise), concatenates the skip, and
/// fuses with a pointwise conv.
template <typename T>
struct UpsampleConcat {
  TensorPtr<T> up_kernel, up_gamma, up_beta;
  std::shared_ptr<BatchNormState<T>> up_bn;
  std::unique_ptr<ConvBnAct<T>> fuse;
  int up;

  UpsampleConcat(ParamStore<T>& ps, const std::string& prefix, int ci_dec,
                 int ci_skip, int co, int up_, Rng& rng)
      : up(up_) {
    if (up_ != 1 && up_ != 2)
      throw ConfigError("upsample_concat: up factor must be 1 or 2");
    if (up_ == 2) {
      up_kernel = ps.add(prefix + ".up.kernel", {ci_dec, ci_dec, 2, 2});
      detail::normal_init(*up_kernel, std::sqrt(2.0 / double(ci_dec * 4)),
                          rng);
    } else {
      up_kernel = ps.add(prefix + ".up.kernel", {ci_dec, ci_dec, 1, 1});
      detail::normal_init(*up_kernel, std::sqrt(2.0 / double(ci_dec)), rng);
    }
    up_gamma = ps.add(prefix + ".up.bn.gamma", {1, ci_dec, 1, 1});
    up_beta = ps.add(prefix + ".up.bn.beta", {1, ci_dec, 1, 1});
    for (auto& e : up_gamma->v) e = T(1);
    up_bn = ps.add_bn(prefix + ".up.bn", ci_dec);
    fuse = std::make_unique<ConvBnAct<T>>(ps, prefix + ".fuse",
                                          ci_dec + ci_skip, co, 1, 1, 0, 1,
                                          true, rng);
  }

  TensorPtr<T> forward(const TensorPtr<T>& x_dec, const TensorPtr<T>& x_skip,
                       const RunFlags& rf) const {
    auto u = up == 2 ? conv2d_transpose(x_dec, up_kernel, 2, 0)
                     : conv2d(x_dec, up_kernel, 1, 0);
    u = silu(batch_norm(u, up_gamma, up_beta, up_bn, rf.training,
                        rf.update_running));
    if (u->shape.n != x_skip->shape.n || u->shape.h != x_skip->shape.h ||
        u->shape.w != x_skip->shape.w)
      throw ConfigError("upsample_concat: upsampled decoder " +
                        u->shape.str() + " does not match skip " +
                        x_skip->shape.str());
    return fuse->forward(concat_channels(u, x_skip), rf);
  }
};

}  // namespace vqseg
