#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqseg/errors.hpp"

namespace vqseg {

/// C x C count matrix; rows index ground truth, columns index predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : c_(num_classes) {
    if (num_classes < 1)
      throw ConfigError("confusion matrix needs at least one class");
    counts_.assign(size_t(c_) * c_, 0);
  }

  int num_classes() const { return c_; }
  int64_t at(int gt, int pred) const {
    return counts_[size_t(gt) * c_ + pred];
  }
  void bump(int gt, int pred) { ++counts_[size_t(gt) * c_ + pred]; }

  /// Merge another matrix into this one (parallel workers sum their counts).
  void merge(const ConfusionMatrix& other) {
    if (other.c_ != c_)
      throw ConfigError("confusion matrix merge: class count mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t x : counts_) t += x;
    return t;
  }

 private:
  int c_;
  std::vector<int64_t> counts_;
};

/// Counts each non-ignored pixel of one (H, W) label map pair into cm.
inline void accumulate_confusion(const std::vector<int32_t>& pred,
                                 const std::vector<int32_t>& gt, int H, int W,
                                 int ignore_index, ConfusionMatrix& cm) {
  if (pred.size() != gt.size() || int64_t(gt.size()) != int64_t(H) * W)
    throw ConfigError("accumulate_confusion: shape mismatch");
  const int C = cm.num_classes();
  for (int64_t i = 0; i < int64_t(H) * W; ++i) {
    const int32_t g = gt[size_t(i)];
    if (g == ignore_index) continue;
    const int32_t p = pred[size_t(i)];
    if (g < 0 || g >= C)
      throw DataError("ground-truth label " + std::to_string(g) +
                      " out of range at pixel (" + std::to_string(i / W) +
                      ", " + std::to_string(i % W) + ")");
    if (p < 0 || p >= C)
      throw DataError("predicted label " + std::to_string(p) +
                      " out of range at pixel (" + std::to_string(i / W) +
                      ", " + std::to_string(i % W) + ")");
    cm.bump(g, p);
  }
}

struct IoUReport {
  // One entry per class; empty optional means the class never appeared in
  // ground truth or prediction and is excluded from the mean.
  std::vector<std::optional<double>> per_class;
  double miou = 0;
};

inline IoUReport iou_report(const ConfusionMatrix& cm) {
  if (cm.total() == 0)
    throw DataError("iou_report: empty confusion matrix");
  const int C = cm.num_classes();
  IoUReport r;
  r.per_class.resize(size_t(C));
  double sum = 0;
  int defined = 0;
  for (int c = 0; c < C; ++c) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < C; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const int64_t inter = cm.at(c, c);
    const int64_t denom = row + col - inter;
    if (denom == 0) continue;
    const double iou = double(inter) / double(denom);
    r.per_class[size_t(c)] = iou;
    sum += iou;
    ++defined;
  }
  if (defined > 0) r.miou = sum / double(defined);
  return r;
}

struct MetricsReport {
  double miou = 0;
  std::vector<std::pair<std::string, std::optional<double>>> per_class;
  double usage = 0, perplexity = 1;
  double loss_ce = 0, loss_vq = 0, loss_total = 0;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [name, iou] : m.per_class) {
    nlohmann::json e;
    e["name"] = name;
    if (iou)
      e["iou"] = *iou;
    else
      e["iou"] = nullptr;
    per.push_back(e);
  }
  return nlohmann::json{
      {"mIoU", m.miou},
      {"per_class", per},
      {"codebook", {{"usage", m.usage}, {"perplexity", m.perplexity}}},
      {"loss",
       {{"ce", m.loss_ce}, {"vq", m.loss_vq}, {"total", m.loss_total}}}};
}

}  // namespace vqseg
