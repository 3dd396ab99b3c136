// Command-line surface: train / eval / ablate / selftest.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vqseg/trainer.hpp"
#include "vqseg/verify.hpp"

namespace {

std::vector<int> parse_sizes(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw vqseg::ConfigError("--codebook-sizes: bad entry '" + item + "'");
    }
    if (out.back() < 1)
      throw vqseg::ConfigError("--codebook-sizes: sizes must be >= 1");
  }
  if (out.empty())
    throw vqseg::ConfigError("--codebook-sizes: no sizes given");
  return out;
}

int cmd_train(const std::string& cfg_path, bool no_vq, bool seed_set,
              uint64_t seed) {
  vqseg::RunConfig cfg = vqseg::load_config(cfg_path);
  if (no_vq) cfg.train.no_vq = true;
  if (seed_set) cfg.train.seed = seed;
  auto report = vqseg::train<float>(cfg);
  std::cout << "done in " << report.wall_seconds << " s; final val mIoU "
            << report.final_metrics.miou;
  if (!cfg.train.no_vq)
    std::cout << ", codebook usage " << report.final_metrics.usage
              << ", perplexity " << report.final_metrics.perplexity;
  std::cout << "\ncheckpoint: " << report.final_checkpoint
            << "\nmetrics: " << cfg.out_dir << "/metrics.json\n";
  return 0;
}

int cmd_eval(const std::string& cfg_path, const std::string& ckpt_path,
             const std::string& emit_png, const std::string& split) {
  vqseg::RunConfig cfg = vqseg::load_config(cfg_path);
  auto model = vqseg::build_model<float>(cfg.model, cfg.train.seed);
  const nlohmann::json manifest =
      vqseg::load_checkpoint<float>(ckpt_path, *model);

  // The model the checkpoint was trained with must match the one the config
  // describes; report every differing field at once.
  std::vector<std::string> diffs;
  vqseg::json_diff_fields(manifest.at("config").at("model"),
                          vqseg::canonical_json(cfg).at("model"), "model",
                          diffs);
  if (!diffs.empty()) {
    std::string msg = "checkpoint/config mismatch in fields:";
    for (const auto& d : diffs) msg += " " + d;
    throw vqseg::ConfigError(msg);
  }
  const bool no_vq =
      manifest.at("config").at("train").value("no_vq", false);

  auto [train_set, val_set] =
      vqseg::prepare_data<float>(cfg.data, cfg.model.num_classes);
  const auto& samples = split == "train" ? train_set : val_set;
  const vqseg::Palette pal =
      vqseg::palette_for(cfg.data, cfg.model.num_classes);

  vqseg::use_single_threaded_blas();
  const vqseg::MetricsReport mr = vqseg::evaluate_model<float>(
      *model, samples, cfg.eval, pal, no_vq, false, emit_png);

  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream out(std::filesystem::path(cfg.out_dir) / "metrics.json");
  out << vqseg::to_json(mr).dump(2) << "\n";
  std::cout << vqseg::to_json(mr).dump(2) << "\n";
  if (!emit_png.empty())
    std::cout << "predictions written to " << emit_png << "\n";
  return 0;
}

int cmd_ablate(const std::string& cfg_path, const std::string& sizes_csv,
               int repeats) {
  vqseg::RunConfig cfg = vqseg::load_config(cfg_path);
  const std::vector<int> sizes = parse_sizes(sizes_csv);
  auto rep = vqseg::ablate_codebook<float>(cfg, sizes, repeats);
  std::cout << "K,mIoU,usage,perplexity\n";
  for (const auto& row : rep.rows)
    std::cout << row.K << "," << row.miou << "," << row.usage << ","
              << row.perplexity << "\n";
  std::cout << "mIoU spread across sizes: " << rep.miou_spread
            << "\nrun-to-run stddev (" << rep.repeat_mious.size()
            << " seeds at K=" << sizes.front() << "): " << rep.seed_stddev
            << "\ntable: " << cfg.out_dir << "/ablation.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vector-quantized semantic segmentation"};
  app.require_subcommand(1);

  std::string cfg_path, ckpt_path, emit_png, split = "val";
  std::string sizes_csv = "19,95,190";
  bool no_vq = false;
  uint64_t seed = 0;
  int repeats = 3;

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", cfg_path, "config file (JSON)")
      ->required();
  train_cmd->add_flag("--no-vq", no_vq,
                      "bypass the quantizer (baseline run)");
  auto* seed_opt =
      train_cmd->add_option("--seed", seed, "override the training seed");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--config", cfg_path, "config file (JSON)")
      ->required();
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")
      ->required();
  eval_cmd->add_option("--emit-png", emit_png,
                       "directory for colorized prediction PNGs");
  eval_cmd->add_option("--split", split, "dataset split: train or val")
      ->check(CLI::IsMember({"train", "val"}));

  auto* ablate_cmd =
      app.add_subcommand("ablate", "train/eval across codebook sizes");
  ablate_cmd->add_option("--config", cfg_path, "config file (JSON)")
      ->required();
  ablate_cmd->add_option("--codebook-sizes", sizes_csv,
                         "comma-separated K values");
  ablate_cmd->add_option("--repeats", repeats,
                         "seeds for the variance estimate");

  auto* selftest_cmd =
      app.add_subcommand("selftest", "run the oracle/gradient suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train_cmd))
      return cmd_train(cfg_path, no_vq, seed_opt->count() > 0, seed);
    if (app.got_subcommand(eval_cmd))
      return cmd_eval(cfg_path, ckpt_path, emit_png, split);
    if (app.got_subcommand(ablate_cmd))
      return cmd_ablate(cfg_path, sizes_csv, repeats);
    if (app.got_subcommand(selftest_cmd))
      return vqseg::selftest_main(std::cout) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
