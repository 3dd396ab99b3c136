#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vqseg/checkpoint.hpp"
#include "vqseg/config.hpp"
#include "vqseg/data.hpp"
#include "vqseg/losses.hpp"
#include "vqseg/metrics.hpp"
#include "vqseg/model.hpp"
#include "vqseg/optim.hpp"
#include "vqseg/palette.hpp"

namespace vqseg {

template <typename T>
struct RunReport {
  std::vector<std::pair<int64_t, LossTerms<T>>> losses;
  std::vector<std::pair<int64_t, MetricsReport>> snapshots;
  MetricsReport final_metrics;
  std::string final_checkpoint;
  double wall_seconds = 0;
};

/// Loads the configured dataset, or generates synthetic splits in memory.
template <typename T>
std::pair<std::vector<SegSample<T>>, std::vector<SegSample<T>>> prepare_data(
    const DataConfig& d, int num_classes) {
  if (!d.root.empty())
    return {load_dataset<T>(d.root, "train", d.norm),
            load_dataset<T>(d.root, "val", d.norm)};
  auto make_split = [&](int count, uint64_t tag) {
    std::vector<SegSample<T>> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
      Rng rng(Rng::mix(Rng::mix(d.synth_seed, tag), uint64_t(i)));
      auto s = synth_scene<T>(rng, num_classes, d.synth_size, d.synth_noise);
      char id[32];
      std::snprintf(id, sizeof id, "scene%05d", i);
      s.id = id;
      for (int c = 0; c < 3; ++c)
        for (int64_t p = 0; p < int64_t(s.h) * s.w; ++p) {
          auto& px = s.image[size_t(int64_t(c) * s.h * s.w + p)];
          px = T((double(px) - d.norm.mean[size_t(c)]) /
                 d.norm.stddev[size_t(c)]);
        }
      out.push_back(std::move(s));
    }
    return out;
  };
  return {make_split(d.synth_train, 1), make_split(d.synth_val, 2)};
}

inline Palette palette_for(const DataConfig& d, int num_classes) {
  if (d.palette_path.empty()) return default_palette(num_classes);
  Palette p = load_palette(d.palette_path);
  if (p.size() < num_classes) {
    // Extend with generated colors so every class has a name and a color.
    Palette extra = default_palette(num_classes);
    for (int c = p.size(); c < num_classes; ++c) {
      p.names.push_back(extra.names[size_t(c)]);
      p.colors.push_back(extra.colors[size_t(c)]);
    }
  }
  return p;
}

template <typename T>
void write_prediction_png(const std::string& path,
                          const std::vector<int32_t>& pred, int h, int w,
                          const Palette& pal) {
  Image8 img{h, w, 3, {}};
  img.data.assign(size_t(h) * w * 3, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int32_t c = pred[size_t(int64_t(y) * w + x)];
      if (c < 0 || c >= pal.size()) continue;  // ignore stays black
      for (int k = 0; k < 3; ++k)
        img.at(y, x, k) = pal.colors[size_t(c)][size_t(k)];
    }
  write_png(path, img);
}

/// Full-split evaluation: sliding-window logits per image, confusion/IoU,
/// codebook usage over all window passes, and loss terms averaged over
/// images (ce) and windows (vq). inject_gt substitutes the ground truth for
/// the prediction (metric-path oracle). emit_dir, when nonempty, receives a
/// colorized PNG per image.
template <typename T>
MetricsReport evaluate_model(SegModel<T>& model,
                             const std::vector<SegSample<T>>& samples,
                             const EvalConfig& ec, const Palette& pal,
                             bool no_vq, bool inject_gt = false,
                             const std::string& emit_dir = "") {
  if (samples.empty()) throw DataError("evaluate: empty split");
  NoGradGuard ng;
  RunFlags rf;  // eval mode
  const int C = model.cfg.num_classes;
  ConfusionMatrix cm(C);
  std::vector<int32_t> all_indices;
  double ce_sum = 0, cb_sum = 0, com_sum = 0;
  int64_t windows = 0;
  if (!emit_dir.empty()) std::filesystem::create_directories(emit_dir);

  for (const auto& s : samples) {
    auto image = Tensor4<T>::from({1, 3, s.h, s.w}, s.image);
    auto fwd = [&](const TensorPtr<T>& crop) {
      auto r = model.forward(crop, rf, no_vq);
      if (!no_vq) {
        all_indices.insert(all_indices.end(), r.indices.begin(),
                           r.indices.end());
        cb_sum += double(r.codebook_loss);
        com_sum += double(r.commitment_loss);
      }
      ++windows;
      return r.logits;
    };
    auto logits = sliding_window_infer(fwd, image, ec.window, ec.stride, C);
    ce_sum += double(cross_entropy(logits, s.labels)->item());
    const std::vector<int32_t> pred =
        inject_gt ? s.labels : argmax_labels(*logits);
    accumulate_confusion(pred, s.labels, s.h, s.w, kIgnoreIndex, cm);
    if (!emit_dir.empty())
      write_prediction_png<T>(
          (std::filesystem::path(emit_dir) / (s.id + ".png")).string(), pred,
          s.h, s.w, pal);
  }

  MetricsReport mr;
  const IoUReport iou = iou_report(cm);
  mr.miou = iou.miou;
  for (int c = 0; c < C; ++c)
    mr.per_class.emplace_back(
        c < pal.size() ? pal.names[size_t(c)] : "class" + std::to_string(c),
        iou.per_class[size_t(c)]);
  if (!no_vq && !all_indices.empty()) {
    const CodeUsageStats us = usage_stats(all_indices, model.cfg.vq.K);
    mr.usage = us.usage_fraction;
    mr.perplexity = us.perplexity;
  }
  mr.loss_ce = ce_sum / double(samples.size());
  mr.loss_vq = windows > 0 && !no_vq
                   ? (cb_sum + model.cfg.vq.beta * com_sum) / double(windows)
                   : 0.0;
  mr.loss_total = mr.loss_ce + mr.loss_vq;
  return mr;
}

/// Optimization loop: batch -> forward -> loss -> backward -> AdamW with a
/// polynomial schedule; periodic eval snapshots and checkpoints. A non-finite
/// loss or gradient aborts with the last-good checkpoint left on disk.
template <typename T>
RunReport<T> train(const RunConfig& cfg, bool quiet = false) {
  namespace fs = std::filesystem;
  use_single_threaded_blas();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");

  auto [train_set, val_set] =
      prepare_data<T>(cfg.data, cfg.model.num_classes);
  if (train_set.empty()) throw DataError("train: training split is empty");
  if (val_set.empty()) throw DataError("train: validation split is empty");
  const Palette pal = palette_for(cfg.data, cfg.model.num_classes);

  auto model = build_model<T>(cfg.model, cfg.train.seed);
  const auto counts = count_params(*model);
  if (!quiet)
    std::cout << "model parameters: encoder " << counts.encoder
              << ", decoder " << counts.decoder << ", codebook "
              << counts.codebook << ", total " << counts.total << "\n";

  AdamW<T> opt(0.9, 0.999, 1e-8, cfg.train.weight_decay);
  const nlohmann::json echo = canonical_json(cfg);

  std::ofstream losses_csv(fs::path(cfg.out_dir) / "losses.csv");
  losses_csv << "iter,lr,ce,vq,total\n";

  RunReport<T> report;
  std::string last_ckpt;
  const T beta = T(cfg.model.vq.beta);

  for (int64_t iter = 0; iter < cfg.train.max_iters; ++iter) {
    const double lr = poly_lr(iter, cfg.train.lr0, cfg.train.max_iters,
                              cfg.train.poly_power);
    Rng pick(Rng::mix(Rng::mix(cfg.train.seed, 0xba7c), uint64_t(iter)));
    std::vector<SegSample<T>> batch;
    batch.reserve(size_t(cfg.train.batch_size));
    for (int k = 0; k < cfg.train.batch_size; ++k) {
      const auto& src = train_set[size_t(pick.below(train_set.size()))];
      Rng arng(Rng::mix(Rng::mix(cfg.train.seed, uint64_t(iter)),
                        uint64_t(k)));
      batch.push_back(augment(src, cfg.augment, arng));
    }
    std::vector<int32_t> labels;
    auto x = to_batch(batch, &labels);

    RunFlags rf{true, true};
    LossTerms<T> lt;
    try {
      auto r = model->forward(x, rf, cfg.train.no_vq);
      auto ce = cross_entropy(r.logits, labels);
      auto total = r.vq_loss ? add(ce, r.vq_loss) : ce;
      lt.ce = ce->item();
      lt.vq = r.vq_loss ? r.codebook_loss + beta * r.commitment_loss : T(0);
      lt.total = total->item();
      if (!std::isfinite(double(lt.total)))
        throw NumericalError("non-finite loss");
      backward(total);
      opt.step(model->ps.params(), lr);
    } catch (const NumericalError& e) {
      throw NumericalError(
          "training aborted at iteration " + std::to_string(iter) + ": " +
          e.what() +
          (last_ckpt.empty() ? ""
                             : "; last checkpoint retained at " + last_ckpt));
    }

    report.losses.emplace_back(iter, lt);
    losses_csv << iter << "," << lr << "," << double(lt.ce) << ","
               << double(lt.vq) << "," << double(lt.total) << "\n";

    const bool last = iter + 1 == cfg.train.max_iters;
    if ((iter + 1) % cfg.train.checkpoint_interval == 0 || last) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06lld.bin",
                    static_cast<long long>(iter + 1));
      const std::string path =
          (fs::path(cfg.out_dir) / "checkpoints" / name).string();
      save_checkpoint(path, *model, echo, cfg.train.seed, iter + 1);
      last_ckpt = path;
    }
    if ((iter + 1) % cfg.train.eval_interval == 0 || last) {
      MetricsReport mr = evaluate_model(*model, val_set, cfg.eval, pal,
                                        cfg.train.no_vq);
      report.snapshots.emplace_back(iter + 1, mr);
      if (!quiet)
        std::cout << "iter " << (iter + 1) << "  loss "
                  << double(lt.total) << "  val mIoU " << mr.miou
                  << "  usage " << mr.usage << "\n";
    }
  }

  report.final_checkpoint = last_ckpt;
  report.final_metrics = report.snapshots.back().second;
  std::ofstream mjson(fs::path(cfg.out_dir) / "metrics.json");
  mjson << to_json(report.final_metrics).dump(2) << "\n";
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

// ---------------------------------------------------------------------------
// Codebook-size ablation
// ---------------------------------------------------------------------------

struct AblationRow {
  int K = 0;
  double miou = 0, usage = 0, perplexity = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;       // one per codebook size, shared seed
  std::vector<double> repeat_mious;    // first size re-run across seeds
  double miou_spread = 0;              // max - min over rows
  double seed_stddev = 0;              // sample stddev of repeat_mious
};

/// Trains and evaluates once per codebook size with a shared seed, then
/// re-runs the first size under `repeats` seeds to estimate run-to-run
/// variance. Writes ablation.csv under cfg.out_dir.
template <typename T>
AblationReport ablate_codebook(const RunConfig& base,
                               const std::vector<int>& sizes,
                               int repeats = 3, bool quiet = false) {
  if (sizes.empty()) throw ConfigError("ablate: need at least one size");
  if (repeats < 1) throw ConfigError("ablate: repeats must be >= 1");
  namespace fs = std::filesystem;
  fs::create_directories(base.out_dir);

  AblationReport rep;
  auto run_one = [&](int K, uint64_t seed, const std::string& tag) {
    RunConfig c = base;
    c.model.vq.K = K;
    c.train.no_vq = false;
    c.train.seed = seed;
    c.out_dir = (fs::path(base.out_dir) / tag).string();
    if (!quiet) std::cout << "[ablate] " << tag << "\n";
    return train<T>(c, quiet);
  };

  for (int K : sizes) {
    auto r = run_one(K, base.train.seed, "K" + std::to_string(K));
    rep.rows.push_back({K, r.final_metrics.miou, r.final_metrics.usage,
                        r.final_metrics.perplexity});
  }
  rep.repeat_mious.push_back(rep.rows[0].miou);
  for (int s = 1; s < repeats; ++s) {
    auto r = run_one(sizes[0], base.train.seed + uint64_t(s),
                     "K" + std::to_string(sizes[0]) + "_seed" +
                         std::to_string(s));
    rep.repeat_mious.push_back(r.final_metrics.miou);
  }

  double lo = rep.rows[0].miou, hi = rep.rows[0].miou;
  for (const auto& row : rep.rows) {
    lo = std::min(lo, row.miou);
    hi = std::max(hi, row.miou);
  }
  rep.miou_spread = hi - lo;
  if (rep.repeat_mious.size() > 1) {
    double mean = 0;
    for (double m : rep.repeat_mious) mean += m;
    mean /= double(rep.repeat_mious.size());
    double ss = 0;
    for (double m : rep.repeat_mious) ss += (m - mean) * (m - mean);
    rep.seed_stddev = std::sqrt(ss / double(rep.repeat_mious.size() - 1));
  }

  std::ofstream csv(fs::path(base.out_dir) / "ablation.csv");
  csv << "K,mIoU,usage,perplexity\n";
  for (const auto& row : rep.rows)
    csv << row.K << "," << row.miou << "," << row.usage << ","
        << row.perplexity << "\n";
  csv << "# repeat_mious(K=" << sizes[0] << "):";
  for (double m : rep.repeat_mious) csv << " " << m;
  csv << "\n# seed_stddev: " << rep.seed_stddev
      << "\n# miou_spread: " << rep.miou_spread << "\n";
  return rep;
}

}  // namespace vqseg
