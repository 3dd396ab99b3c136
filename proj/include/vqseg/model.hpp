#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vqseg/blocks.hpp"
#include "vqseg/quantizer.hpp"

namespace vqseg {

struct ModelConfig {
  int num_classes = 8;
  std::vector<int> widths = {16, 24, 48, 64};  // stem, stage1..3 channels
  std::vector<int> strides = {2, 2, 1};        // stage strides after the
                                               // stride-2 stem
  int d = 64;  // bottleneck / code dimension, must equal vq.d
  VQConfig vq;
  int patch_w = 2, patch_h = 2;
  int heads = 4;
  int tf_depth = 2;   // transformer layers per attention block
  int expansion = 2;  // inverted-residual expansion ratio
  int ffn_mult = 2;   // FFN hidden = ffn_mult * attention dim
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.num_classes < 2)
    throw ConfigError("model: num_classes must be >= 2");
  if (cfg.widths.size() != 4)
    throw ConfigError("model: expected 4 stage widths, got " +
                      std::to_string(cfg.widths.size()));
  for (int w : cfg.widths)
    if (w < 1) throw ConfigError("model: stage widths must be >= 1");
  if (cfg.strides.size() != 3)
    throw ConfigError("model: expected 3 stage strides, got " +
                      std::to_string(cfg.strides.size()));
  for (int s : cfg.strides)
    if (s != 1 && s != 2)
      throw ConfigError("model: stage strides must be 1 or 2");
  if (cfg.d != cfg.vq.d)
    throw ConfigError("model: bottleneck dim " + std::to_string(cfg.d) +
                      " != vq.d " + std::to_string(cfg.vq.d));
  if (cfg.patch_w < 1 || cfg.patch_h < 1)
    throw ConfigError("model: patch dims must be >= 1");
  validate(cfg.vq);
}

/// Smallest spatial multiple a valid input must have: the deepest attention
/// stage must still be divisible by the patch size.
inline int required_multiple(const ModelConfig& cfg) {
  const int down = 2 * cfg.strides[0] * cfg.strides[1] * cfg.strides[2];
  return down * std::max(cfg.patch_w, cfg.patch_h);
}

template <typename T>
struct ForwardResult {
  TensorPtr<T> logits;
  TensorPtr<T> vq_loss;          // null when the VQ bottleneck is bypassed
  std::vector<int32_t> indices;  // empty when bypassed
  T codebook_loss = 0, commitment_loss = 0;
  TensorPtr<T> bottleneck_pre;  // encoder output entering the quantizer
  TensorPtr<T> bottleneck_q;    // field entering the decoder
};

template <typename T>
struct SegModel {
  ModelConfig cfg;
  ParamStore<T> ps;

  // encoder
  std::unique_ptr<ConvBnAct<T>> stem;
  std::unique_ptr<InvertedResidual<T>> s1_ir0, s1_ir1;
  std::unique_ptr<InvertedResidual<T>> s2_ir0;
  std::unique_ptr<MobileVitBlock<T>> s2_vit;
  std::unique_ptr<InvertedResidual<T>> s3_ir0;
  std::unique_ptr<MobileVitBlock<T>> s3_vit;
  // Pointwise projection to d, deliberately unnormalized: the commitment
  // loss must be free to shrink the feature scale toward the codebook's.
  TensorPtr<T> neck_kernel, neck_bias;

  TensorPtr<T> codebook;

  // decoder (mirror order)
  std::unique_ptr<UpsampleConcat<T>> d3_up;
  std::unique_ptr<MobileVitBlock<T>> d3_vit;
  std::unique_ptr<UpsampleConcat<T>> d2_up;
  std::unique_ptr<InvertedResidual<T>> d2_ir;
  std::unique_ptr<UpsampleConcat<T>> d1_up;
  std::unique_ptr<InvertedResidual<T>> d1_ir;
  TensorPtr<T> final_kernel, final_gamma, final_beta;  // 2x to full res
  std::shared_ptr<BatchNormState<T>> final_bn;
  std::unique_ptr<InvertedResidual<T>> final_ir;
  TensorPtr<T> head_kernel, head_bias;

  ForwardResult<T> forward(const TensorPtr<T>& image, const RunFlags& rf,
                           bool no_vq = false,
                           const std::vector<int32_t>* frozen = nullptr) {
    const Shape4& s = image->shape;
    const int mult = required_multiple(cfg);
    if (s.h % mult != 0 || s.w % mult != 0)
      throw ConfigError("forward: input " + s.str() +
                        " spatial dims must be multiples of " +
                        std::to_string(mult));
    if (s.c != 3)
      throw ConfigError("forward: expected 3 input channels, got " +
                        std::to_string(s.c));

    auto x0 = stem->forward(image, rf);            // 1/2, w0
    auto x1 = s1_ir1->forward(s1_ir0->forward(x0, rf), rf);  // w1
    auto x2 = s2_vit->forward(s2_ir0->forward(x1, rf), rf);  // w2
    auto x3 = s3_vit->forward(s3_ir0->forward(x2, rf), rf);  // w3
    auto z = bias_channel(conv2d(x3, neck_kernel, 1, 0), neck_bias);  // d

    ForwardResult<T> out;
    out.bottleneck_pre = z;
    TensorPtr<T> dec_in;
    if (no_vq) {
      dec_in = z;
    } else {
      auto vq = vq_quantize(z, codebook, cfg.vq, frozen);
      dec_in = vq.zq;
      out.vq_loss = vq.vq_loss;
      out.indices = std::move(vq.indices);
      out.codebook_loss = vq.codebook_loss;
      out.commitment_loss = vq.commitment_loss;
    }
    out.bottleneck_q = dec_in;

    auto y = d3_vit->forward(d3_up->forward(dec_in, x2, rf), rf);
    y = d2_ir->forward(d2_up->forward(y, x1, rf), rf);
    y = d1_ir->forward(d1_up->forward(y, x0, rf), rf);
    y = silu(batch_norm(conv2d_transpose(y, final_kernel, 2, 0), final_gamma,
                        final_beta, final_bn, rf.training,
                        rf.update_running));
    y = final_ir->forward(y, rf);
    out.logits = bias_channel(conv2d(y, head_kernel, 1, 0), head_bias);
    internal_check(out.logits->shape.h == s.h && out.logits->shape.w == s.w,
                   "forward: logits do not cover the input resolution");
    return out;
  }
};

template <typename T>
std::unique_ptr<SegModel<T>> build_model(const ModelConfig& cfg,
                                         uint64_t seed) {
  validate(cfg);
  auto m = std::make_unique<SegModel<T>>();
  m->cfg = cfg;
  Rng rng(Rng::mix(seed, 0x6d6f64656c));  // init stream
  auto& ps = m->ps;
  const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2],
            w3 = cfg.widths[3];
  const int e = cfg.expansion;

  m->stem = std::make_unique<ConvBnAct<T>>(ps, "enc.stem", 3, w0, 3, 2, 1, 1,
                                           true, rng);
  m->s1_ir0 = std::make_unique<InvertedResidual<T>>(ps, "enc.s1.ir0", w0, w1,
                                                    cfg.strides[0], e, rng);
  m->s1_ir1 = std::make_unique<InvertedResidual<T>>(ps, "enc.s1.ir1", w1, w1,
                                                    1, e, rng);
  m->s2_ir0 = std::make_unique<InvertedResidual<T>>(ps, "enc.s2.ir0", w1, w2,
                                                    cfg.strides[1], e, rng);
  m->s2_vit = std::make_unique<MobileVitBlock<T>>(
      ps, "enc.s2.vit", w2, w2, cfg.tf_depth, cfg.heads, cfg.ffn_mult * w2,
      cfg.patch_w, rng);
  m->s3_ir0 = std::make_unique<InvertedResidual<T>>(ps, "enc.s3.ir0", w2, w3,
                                                    cfg.strides[2], e, rng);
  m->s3_vit = std::make_unique<MobileVitBlock<T>>(
      ps, "enc.s3.vit", w3, w3, cfg.tf_depth, cfg.heads, cfg.ffn_mult * w3,
      cfg.patch_w, rng);
  m->neck_kernel = ps.add("enc.neck.kernel", {cfg.d, w3, 1, 1});
  detail::normal_init(*m->neck_kernel, std::sqrt(1.0 / double(w3)), rng);
  m->neck_bias = ps.add("enc.neck.bias", {1, cfg.d, 1, 1});

  VQConfig vq = cfg.vq;
  vq.seed = Rng::mix(seed, 0x636f6465626f6f6b);
  m->codebook = ps.adopt("vq.codebook", init_codebook<T>(vq));

  m->d3_up = std::make_unique<UpsampleConcat<T>>(ps, "dec.d3.up", cfg.d, w2,
                                                 w2, cfg.strides[2], rng);
  m->d3_vit = std::make_unique<MobileVitBlock<T>>(
      ps, "dec.d3.vit", w2, w2, cfg.tf_depth, cfg.heads, cfg.ffn_mult * w2,
      cfg.patch_w, rng);
  m->d2_up = std::make_unique<UpsampleConcat<T>>(ps, "dec.d2.up", w2, w1, w1,
                                                 cfg.strides[1], rng);
  m->d2_ir = std::make_unique<InvertedResidual<T>>(ps, "dec.d2.ir", w1, w1, 1,
                                                   e, rng);
  m->d1_up = std::make_unique<UpsampleConcat<T>>(ps, "dec.d1.up", w1, w0, w0,
                                                 cfg.strides[0], rng);
  m->d1_ir = std::make_unique<InvertedResidual<T>>(ps, "dec.d1.ir", w0, w0, 1,
                                                   e, rng);

  m->final_kernel = ps.add("dec.final.up.kernel", {w0, w0, 2, 2});
  detail::normal_init(*m->final_kernel, std::sqrt(2.0 / double(w0 * 4)), rng);
  m->final_gamma = ps.add("dec.final.up.bn.gamma", {1, w0, 1, 1});
  m->final_beta = ps.add("dec.final.up.bn.beta", {1, w0, 1, 1});
  for (auto& g : m->final_gamma->v) g = T(1);
  m->final_bn = ps.add_bn("dec.final.up.bn", w0);
  m->final_ir = std::make_unique<InvertedResidual<T>>(ps, "dec.final.ir", w0,
                                                      w0, 1, e, rng);

  m->head_kernel = ps.add("head.kernel", {cfg.num_classes, w0, 1, 1});
  detail::normal_init(*m->head_kernel, std::sqrt(1.0 / double(w0)), rng);
  m->head_bias = ps.add("head.bias", {1, cfg.num_classes, 1, 1});
  return m;
}

template <typename T>
struct ParamCounts {
  int64_t encoder = 0, decoder = 0, codebook = 0, total = 0;
};

template <typename T>
ParamCounts<T> count_params(const SegModel<T>& m) {
  ParamCounts<T> c;
  c.encoder = m.ps.count_prefix("enc.");
  c.codebook = m.ps.count_prefix("vq.");
  c.decoder = m.ps.count_prefix("dec.") + m.ps.count_prefix("head.");
  c.total = m.ps.count();
  internal_check(c.encoder + c.decoder + c.codebook == c.total,
                 "parameter accounting mismatch");
  return c;
}

/// Per-pixel argmax over class logits; ties go to the lowest class index.
/// Returns labels in row-major (n, h, w) order.
template <typename T>
std::vector<int32_t> argmax_labels(const Tensor4<T>& logits) {
  const Shape4& s = logits.shape;
  std::vector<int32_t> out(size_t(s.n) * s.h * s.w);
  const int64_t plane = int64_t(s.h) * s.w;
  for (int b = 0; b < s.n; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      const T* base = logits.v.data() + int64_t(b) * s.c * plane + p;
      int best = 0;
      T bv = base[0];
      for (int c = 1; c < s.c; ++c) {
        const T x = base[c * plane];
        if (x > bv) {
          bv = x;
          best = c;
        }
      }
      out[size_t(int64_t(b) * plane + p)] = best;
    }
  return out;
}

/// Eval-mode argmax segmentation. No graph is built.
template <typename T>
std::vector<int32_t> predict(SegModel<T>& m, const TensorPtr<T>& image,
                             bool no_vq = false) {
  NoGradGuard ng;
  RunFlags rf;  // eval mode
  auto r = m.forward(image, rf, no_vq);
  return argmax_labels(*r.logits);
}

}  // namespace vqseg
