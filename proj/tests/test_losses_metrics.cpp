#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "vqseg/gradcheck.hpp"
#include "vqseg/losses.hpp"
#include "vqseg/metrics.hpp"
#include "vqseg/verify.hpp"

using namespace vqseg;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using D = double;

TEST_CASE("cross-entropy of uniform logits is log(C)") {
  for (int C : {2, 5, 19}) {
    auto logits = Tensor4<D>::make({2, C, 3, 4});
    std::vector<int32_t> labels(2 * 3 * 4, 0);
    labels[5] = int32_t(C - 1);
    auto loss = cross_entropy(logits, labels);
    REQUIRE(loss->v[0] == Approx(std::log(double(C))).margin(1e-12));
  }
}

TEST_CASE("cross-entropy matches a hand-computed two-class case") {
  // One pixel, logits (2, 0), true class 0: -log softmax_0 = log(1 + e^-2).
  auto logits = Tensor4<D>::from({1, 2, 1, 1}, {2.0, 0.0});
  auto loss = cross_entropy(logits, {0});
  REQUIRE(loss->v[0] == Approx(std::log(1.0 + std::exp(-2.0))).margin(1e-14));

  // Same logits, wrong class: -log softmax_1 = log(1 + e^2).
  auto loss1 = cross_entropy(logits, {1});
  REQUIRE(loss1->v[0] == Approx(std::log(1.0 + std::exp(2.0))).margin(1e-14));
}

TEST_CASE("cross-entropy averages over non-ignored pixels only") {
  Rng rng(31);
  auto logits = Tensor4<D>::randn({1, 3, 2, 2}, rng, 1.0);
  std::vector<int32_t> labels = {0, 255, 2, 255};

  // Reference: per-pixel losses computed directly.
  auto pixel_ce = [&](int64_t p, int lab) {
    double mx = -1e300, sum = 0;
    for (int c = 0; c < 3; ++c)
      mx = std::max(mx, double(logits->v[size_t(c * 4 + p)]));
    for (int c = 0; c < 3; ++c)
      sum += std::exp(double(logits->v[size_t(c * 4 + p)]) - mx);
    return -(double(logits->v[size_t(lab * 4 + p)]) - mx - std::log(sum));
  };
  const double want = (pixel_ce(0, 0) + pixel_ce(2, 2)) / 2.0;
  REQUIRE(cross_entropy(logits, labels)->v[0] == Approx(want).margin(1e-12));
}

TEST_CASE("cross-entropy with every pixel ignored is a zero constant") {
  auto logits = Tensor4<D>::make({1, 4, 2, 2}, true);
  std::vector<int32_t> labels(4, 255);
  auto loss = cross_entropy(logits, labels);
  REQUIRE(loss->v[0] == 0.0);
  REQUIRE_FALSE(loss->requires_grad);
}

TEST_CASE("cross-entropy gradient: finite differences, zero rows, sum rule") {
  Rng rng(32);
  auto logits = Tensor4<D>::randn({2, 4, 2, 3}, rng, 1.0, true);
  std::vector<int32_t> labels(2 * 2 * 3);
  for (auto& l : labels) l = int32_t(rng.below(4));
  labels[1] = 255;
  labels[7] = 255;

  REQUIRE(grad_check<D>(
              [&](const TensorPtr<D>& t) { return cross_entropy(t, labels); },
              logits, 1e-6) < 1e-7);

  backward(cross_entropy(logits, labels));
  const int64_t plane = 2 * 3;
  for (int b = 0; b < 2; ++b)
    for (int64_t p = 0; p < plane; ++p) {
      double colsum = 0;
      for (int c = 0; c < 4; ++c)
        colsum += logits->g[size_t(b * 4 * plane + c * plane + p)];
      if (labels[size_t(b * plane + p)] == 255) {
        // Ignored pixels contribute nothing.
        for (int c = 0; c < 4; ++c)
          REQUIRE(logits->g[size_t(b * 4 * plane + c * plane + p)] == 0.0);
      } else {
        // softmax - onehot sums to zero across classes.
        REQUIRE(colsum == Approx(0.0).margin(1e-12));
      }
    }
}

TEST_CASE("cross-entropy validates labels and shapes") {
  auto logits = Tensor4<D>::make({1, 5, 2, 2});
  std::vector<int32_t> bad = {0, 1, 2, 7};
  REQUIRE_THROWS_WITH(cross_entropy(logits, bad),
                      ContainsSubstring("label 7") &&
                          ContainsSubstring("(1, 1)"));
  std::vector<int32_t> neg = {0, -3, 0, 0};
  REQUIRE_THROWS_AS(cross_entropy(logits, neg), DataError);
  std::vector<int32_t> short_labels = {0, 1};
  REQUIRE_THROWS_AS(cross_entropy(logits, short_labels), ConfigError);
}

TEST_CASE("total loss composes ce, codebook and weighted commitment terms") {
  QuantizationResult<D> qr;
  qr.codebook_loss = 1.0;
  qr.commitment_loss = 1.0;
  auto t = total_loss<D>(0.5, qr, 0.25);
  REQUIRE(t.ce == 0.5);
  REQUIRE(t.vq == Approx(1.25).margin(1e-15));
  REQUIRE(t.total == Approx(1.75).margin(1e-15));

  qr.codebook_loss = 0.3;
  qr.commitment_loss = 0.8;
  auto t2 = total_loss<D>(2.0, qr, 0.5);
  REQUIRE(t2.vq == Approx(0.3 + 0.5 * 0.8).margin(1e-15));
  REQUIRE(t2.total == Approx(2.0 + t2.vq).margin(1e-15));
}

TEST_CASE("confusion matrix counts, totals, and merges") {
  ConfusionMatrix cm(3);
  cm.bump(0, 0);
  cm.bump(0, 1);
  cm.bump(2, 2);
  cm.bump(2, 2);
  REQUIRE(cm.at(0, 0) == 1);
  REQUIRE(cm.at(0, 1) == 1);
  REQUIRE(cm.at(2, 2) == 2);
  REQUIRE(cm.at(1, 1) == 0);
  REQUIRE(cm.total() == 4);

  ConfusionMatrix other(3);
  other.bump(0, 0);
  other.bump(1, 2);
  cm.merge(other);
  REQUIRE(cm.at(0, 0) == 2);
  REQUIRE(cm.at(1, 2) == 1);
  REQUIRE(cm.total() == 6);

  ConfusionMatrix wrong(4);
  REQUIRE_THROWS_AS(cm.merge(wrong), ConfigError);
  REQUIRE_THROWS_AS(ConfusionMatrix(0), ConfigError);
}

TEST_CASE("accumulating halves and merging equals accumulating the whole") {
  Rng rng(33);
  const int H = 8, W = 6, C = 4;
  std::vector<int32_t> pred(H * W), gt(H * W);
  for (auto& p : pred) p = int32_t(rng.below(C));
  for (auto& g : gt) g = rng.below(10) == 0 ? 255 : int32_t(rng.below(C));

  ConfusionMatrix whole(C);
  accumulate_confusion(pred, gt, H, W, 255, whole);

  ConfusionMatrix top(C), bottom(C);
  std::vector<int32_t> pt(pred.begin(), pred.begin() + 4 * W);
  std::vector<int32_t> gt_t(gt.begin(), gt.begin() + 4 * W);
  std::vector<int32_t> pb(pred.begin() + 4 * W, pred.end());
  std::vector<int32_t> gb(gt.begin() + 4 * W, gt.end());
  accumulate_confusion(pt, gt_t, 4, W, 255, top);
  accumulate_confusion(pb, gb, 4, W, 255, bottom);
  top.merge(bottom);
  for (int g = 0; g < C; ++g)
    for (int p = 0; p < C; ++p) REQUIRE(top.at(g, p) == whole.at(g, p));
}

TEST_CASE("accumulate_confusion validates shapes and label ranges") {
  ConfusionMatrix cm(3);
  std::vector<int32_t> four(4, 0), six(6, 0);
  REQUIRE_THROWS_AS(accumulate_confusion(four, six, 2, 3, 255, cm),
                    ConfigError);
  REQUIRE_THROWS_AS(accumulate_confusion(four, four, 2, 3, 255, cm),
                    ConfigError);

  std::vector<int32_t> gt_bad = {0, 0, 5, 0};
  REQUIRE_THROWS_WITH(accumulate_confusion(four, gt_bad, 2, 2, 255, cm),
                      ContainsSubstring("ground-truth label 5") &&
                          ContainsSubstring("(1, 0)"));
  std::vector<int32_t> pred_bad = {0, 9, 0, 0};
  REQUIRE_THROWS_WITH(accumulate_confusion(pred_bad, four, 2, 2, 255, cm),
                      ContainsSubstring("predicted label 9"));
  // Ignored ground truth never inspects the prediction.
  ConfusionMatrix fresh(3);
  std::vector<int32_t> all_ignore(4, 255);
  REQUIRE_NOTHROW(accumulate_confusion(pred_bad, all_ignore, 2, 2, 255, fresh));
  REQUIRE(fresh.total() == 0);
}

TEST_CASE("iou report: hand case, absent-class exclusion, empty rejection") {
  ConfusionMatrix cm(2);
  // [[2, 1], [1, 2]]: both classes have inter 2, union 4.
  cm.bump(0, 0);
  cm.bump(0, 0);
  cm.bump(0, 1);
  cm.bump(1, 0);
  cm.bump(1, 1);
  cm.bump(1, 1);
  auto r = iou_report(cm);
  REQUIRE(r.per_class[0].value() == Approx(0.5).margin(1e-15));
  REQUIRE(r.per_class[1].value() == Approx(0.5).margin(1e-15));
  REQUIRE(r.miou == Approx(0.5).margin(1e-15));

  // A class absent from both gt and predictions is excluded from the mean.
  ConfusionMatrix cm3(3);
  cm3.bump(0, 0);
  cm3.bump(1, 0);
  auto r3 = iou_report(cm3);
  REQUIRE(r3.per_class[0].value() == Approx(0.5).margin(1e-15));
  REQUIRE(r3.per_class[1].value() == 0.0);
  REQUIRE_FALSE(r3.per_class[2].has_value());
  REQUIRE(r3.miou == Approx(0.25).margin(1e-15));

  ConfusionMatrix empty(3);
  REQUIRE_THROWS_AS(iou_report(empty), DataError);
}

TEST_CASE("iou matches the counting oracle on random label maps") {
  Rng rng(34);
  for (int trial = 0; trial < 40; ++trial) {
    const int C = 2 + rng.below(6);
    const int H = 2 + rng.below(7), W = 2 + rng.below(7);
    std::vector<int32_t> pred(size_t(H) * W), gt(size_t(H) * W);
    for (auto& p : pred) p = int32_t(rng.below(C));
    for (auto& g : gt) g = rng.below(8) == 0 ? 255 : int32_t(rng.below(C));
    if (std::all_of(gt.begin(), gt.end(),
                    [](int32_t g) { return g == 255; }))
      gt[0] = 0;

    ConfusionMatrix cm(C);
    accumulate_confusion(pred, gt, H, W, 255, cm);
    auto r = iou_report(cm);
    auto [want_miou, want_per] = iou_oracle(pred, gt, C, 255);
    REQUIRE(r.miou == Approx(want_miou).margin(1e-12));
    for (int c = 0; c < C; ++c) {
      REQUIRE(r.per_class[size_t(c)].has_value() ==
              want_per[size_t(c)].has_value());
      if (want_per[size_t(c)])
        REQUIRE(r.per_class[size_t(c)].value() ==
                Approx(want_per[size_t(c)].value()).margin(1e-12));
    }
  }
}

TEST_CASE("miou is invariant under class relabeling") {
  Rng rng(35);
  const int C = 5;
  std::vector<int> perm = {3, 0, 4, 1, 2};
  ConfusionMatrix cm(C), cmp(C);
  for (int i = 0; i < 300; ++i) {
    const int g = rng.below(C), p = rng.below(C);
    cm.bump(g, p);
    cmp.bump(perm[size_t(g)], perm[size_t(p)]);
  }
  auto r = iou_report(cm), rp = iou_report(cmp);
  REQUIRE(rp.miou == Approx(r.miou).margin(1e-12));
  for (int c = 0; c < C; ++c)
    REQUIRE(rp.per_class[size_t(perm[size_t(c)])].value() ==
            Approx(r.per_class[size_t(c)].value()).margin(1e-15));
}

TEST_CASE("metrics serialize with nulls for undefined classes") {
  MetricsReport m;
  m.miou = 0.625;
  m.per_class = {{"road", 0.9}, {"sky", std::nullopt}, {"car", 0.35}};
  m.usage = 0.8421;
  m.perplexity = 12.5;
  m.loss_ce = 0.4;
  m.loss_vq = 0.1;
  m.loss_total = 0.5;

  auto j = to_json(m);
  REQUIRE(j["mIoU"] == Approx(0.625));
  REQUIRE(j["per_class"].size() == 3);
  REQUIRE(j["per_class"][0]["name"] == "road");
  REQUIRE(j["per_class"][0]["iou"] == Approx(0.9));
  REQUIRE(j["per_class"][1]["iou"].is_null());
  REQUIRE(j["codebook"]["usage"] == Approx(0.8421));
  REQUIRE(j["codebook"]["perplexity"] == Approx(12.5));
  REQUIRE(j["loss"]["ce"] == Approx(0.4));
  REQUIRE(j["loss"]["vq"] == Approx(0.1));
  REQUIRE(j["loss"]["total"] == Approx(0.5));
  // Round-trips through text.
  auto j2 = nlohmann::json::parse(j.dump());
  REQUIRE(j2 == j);
}
