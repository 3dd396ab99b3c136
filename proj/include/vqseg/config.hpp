#pragma once

#include <array>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "vqseg/data.hpp"
#include "vqseg/model.hpp"

namespace vqseg {

struct TrainConfig {
  double lr0 = 1e-3;
  int64_t max_iters = 2000;
  int batch_size = 8;
  double poly_power = 1.0;
  double weight_decay = 0.01;
  int64_t eval_interval = 500;
  int64_t checkpoint_interval = 1000;
  uint64_t seed = 1;
  bool no_vq = false;  // bypass the bottleneck (baseline ablation)
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.lr0 > 0)) throw ConfigError("train: lr0 must be > 0");
  if (cfg.max_iters < 1) throw ConfigError("train: max_iters must be >= 1");
  if (!(cfg.poly_power > 0))
    throw ConfigError("train: poly_power must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.eval_interval < 1)
    throw ConfigError("train: eval_interval must be >= 1");
  if (cfg.checkpoint_interval < 1)
    throw ConfigError("train: checkpoint_interval must be >= 1");
}

struct DataConfig {
  std::string root;  // empty -> synthetic scenes generated in memory
  int synth_train = 500, synth_val = 100, synth_size = 64;
  double synth_noise = 0.02;
  uint64_t synth_seed = 7;
  Normalization norm;
  std::string palette_path;  // empty -> built-in palette
};

struct EvalConfig {
  int window = 64;
  int stride = 64;
};

struct RunConfig {
  std::string out_dir = "runs/out";
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  DataConfig data;
  EvalConfig eval;
  nlohmann::json raw;  // parsed source, echoed into checkpoints
};

namespace detail {

inline const nlohmann::json& section(const nlohmann::json& j,
                                     const std::string& name,
                                     const std::set<std::string>& allowed) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(name)) return empty;
  const auto& s = j.at(name);
  if (!s.is_object())
    throw ConfigError("config: section '" + name + "' must be an object");
  for (auto it = s.begin(); it != s.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + name + "." + it.key() +
                        "'");
  return s;
}

template <typename V>
V get_or(const nlohmann::json& j, const std::string& key, V fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> top = {"out_dir", "model",  "train",
                                              "augment", "data",   "eval"};
    if (!top.count(it.key()))
      throw ConfigError("config: unknown top-level key '" + it.key() + "'");
  }
  RunConfig cfg;
  cfg.raw = j;
  cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir);

  const auto& m = detail::section(
      j, "model",
      {"num_classes", "widths", "strides", "d", "patch", "heads", "tf_depth",
       "expansion", "ffn_mult", "vq"});
  cfg.model.num_classes =
      detail::get_or(m, "num_classes", cfg.model.num_classes);
  cfg.model.widths =
      detail::get_or<std::vector<int>>(m, "widths", cfg.model.widths);
  cfg.model.strides =
      detail::get_or<std::vector<int>>(m, "strides", cfg.model.strides);
  cfg.model.d = detail::get_or(m, "d", cfg.model.d);
  const int patch = detail::get_or(m, "patch", cfg.model.patch_w);
  cfg.model.patch_w = cfg.model.patch_h = patch;
  cfg.model.heads = detail::get_or(m, "heads", cfg.model.heads);
  cfg.model.tf_depth = detail::get_or(m, "tf_depth", cfg.model.tf_depth);
  cfg.model.expansion = detail::get_or(m, "expansion", cfg.model.expansion);
  cfg.model.ffn_mult = detail::get_or(m, "ffn_mult", cfg.model.ffn_mult);
  if (m.contains("vq")) {
    const auto& v = detail::section(m, "vq", {"K", "beta"});
    cfg.model.vq.K = detail::get_or(v, "K", cfg.model.vq.K);
    cfg.model.vq.beta = detail::get_or(v, "beta", cfg.model.vq.beta);
  }
  cfg.model.vq.d = cfg.model.d;

  const auto& t = detail::section(
      j, "train",
      {"lr0", "max_iters", "batch_size", "poly_power", "weight_decay",
       "eval_interval", "checkpoint_interval", "seed", "no_vq"});
  cfg.train.lr0 = detail::get_or(t, "lr0", cfg.train.lr0);
  cfg.train.max_iters = detail::get_or(t, "max_iters", cfg.train.max_iters);
  cfg.train.batch_size = detail::get_or(t, "batch_size", cfg.train.batch_size);
  cfg.train.poly_power = detail::get_or(t, "poly_power", cfg.train.poly_power);
  cfg.train.weight_decay =
      detail::get_or(t, "weight_decay", cfg.train.weight_decay);
  cfg.train.eval_interval =
      detail::get_or(t, "eval_interval", cfg.train.eval_interval);
  cfg.train.checkpoint_interval =
      detail::get_or(t, "checkpoint_interval", cfg.train.checkpoint_interval);
  cfg.train.seed = detail::get_or(t, "seed", cfg.train.seed);
  cfg.train.no_vq = detail::get_or(t, "no_vq", cfg.train.no_vq);

  const auto& a = detail::section(
      j, "augment", {"scale_min", "scale_max", "crop", "hflip_prob"});
  cfg.augment.scale_min = detail::get_or(a, "scale_min", cfg.augment.scale_min);
  cfg.augment.scale_max = detail::get_or(a, "scale_max", cfg.augment.scale_max);
  const int crop = detail::get_or(a, "crop", cfg.augment.crop_h);
  cfg.augment.crop_h = cfg.augment.crop_w = crop;
  cfg.augment.hflip_prob =
      detail::get_or(a, "hflip_prob", cfg.augment.hflip_prob);

  const auto& d = detail::section(
      j, "data",
      {"root", "synth_train", "synth_val", "synth_size", "synth_noise",
       "synth_seed", "mean", "std", "palette"});
  cfg.data.root = detail::get_or<std::string>(d, "root", cfg.data.root);
  cfg.data.synth_train = detail::get_or(d, "synth_train", cfg.data.synth_train);
  cfg.data.synth_val = detail::get_or(d, "synth_val", cfg.data.synth_val);
  cfg.data.synth_size = detail::get_or(d, "synth_size", cfg.data.synth_size);
  cfg.data.synth_noise = detail::get_or(d, "synth_noise", cfg.data.synth_noise);
  cfg.data.synth_seed = detail::get_or(d, "synth_seed", cfg.data.synth_seed);
  cfg.data.norm.mean = detail::get_or(d, "mean", cfg.data.norm.mean);
  cfg.data.norm.stddev = detail::get_or(d, "std", cfg.data.norm.stddev);
  cfg.data.palette_path =
      detail::get_or<std::string>(d, "palette", cfg.data.palette_path);

  const auto& e = detail::section(j, "eval", {"window", "stride"});
  cfg.eval.window = detail::get_or(e, "window", cfg.eval.window);
  cfg.eval.stride = detail::get_or(e, "stride", cfg.eval.stride);

  validate(cfg.model);
  validate(cfg.train);
  validate(cfg.augment);
  if (cfg.eval.window < 1 || cfg.eval.stride < 1 ||
      cfg.eval.stride > cfg.eval.window)
    throw ConfigError("config: eval needs 1 <= stride <= window");
  return cfg;
}

/// Fully-explicit JSON form of a parsed config (defaults filled in). This is
/// what checkpoints echo, so comparisons are semantic rather than textual.
inline nlohmann::json canonical_json(const RunConfig& cfg) {
  return nlohmann::json{
      {"out_dir", cfg.out_dir},
      {"model",
       {{"num_classes", cfg.model.num_classes},
        {"widths", cfg.model.widths},
        {"strides", cfg.model.strides},
        {"d", cfg.model.d},
        {"patch", cfg.model.patch_w},
        {"heads", cfg.model.heads},
        {"tf_depth", cfg.model.tf_depth},
        {"expansion", cfg.model.expansion},
        {"ffn_mult", cfg.model.ffn_mult},
        {"vq", {{"K", cfg.model.vq.K}, {"beta", cfg.model.vq.beta}}}}},
      {"train",
       {{"lr0", cfg.train.lr0},
        {"max_iters", cfg.train.max_iters},
        {"batch_size", cfg.train.batch_size},
        {"poly_power", cfg.train.poly_power},
        {"weight_decay", cfg.train.weight_decay},
        {"eval_interval", cfg.train.eval_interval},
        {"checkpoint_interval", cfg.train.checkpoint_interval},
        {"seed", cfg.train.seed},
        {"no_vq", cfg.train.no_vq}}},
      {"augment",
       {{"scale_min", cfg.augment.scale_min},
        {"scale_max", cfg.augment.scale_max},
        {"crop", cfg.augment.crop_h},
        {"hflip_prob", cfg.augment.hflip_prob}}},
      {"data",
       {{"root", cfg.data.root},
        {"synth_train", cfg.data.synth_train},
        {"synth_val", cfg.data.synth_val},
        {"synth_size", cfg.data.synth_size},
        {"synth_noise", cfg.data.synth_noise},
        {"synth_seed", cfg.data.synth_seed},
        {"mean", cfg.data.norm.mean},
        {"std", cfg.data.norm.stddev},
        {"palette", cfg.data.palette_path}}},
      {"eval", {{"window", cfg.eval.window}, {"stride", cfg.eval.stride}}}};
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace vqseg
