#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oucopula/checkpoint.hpp"
#include "oucopula/config_json.hpp"
#include "oucopula/cv.hpp"
#include "oucopula/data/container_io.hpp"
#include "oucopula/data/generator.hpp"
#include "oucopula/data/manifest.hpp"
#include "oucopula/run_io.hpp"
#include "oucopula/selftest.hpp"
#include "oucopula/train.hpp"

#ifndef OUCOPULA_VERSION
#define OUCOPULA_VERSION "1.0.0"
#endif

namespace oucopula::cli {

inline constexpr int kExitOk = 0, kExitUsage = 1, kExitFormat = 2, kExitNumerical = 3;

namespace detail {

/// Default seed: OUCOPULA_SEED when set, else 0.
inline std::uint64_t default_seed() {
  const char* env = std::getenv("OUCOPULA_SEED");
  if (env == nullptr || *env == '\0') return 0;
  try {
    std::size_t used = 0;
    const std::string s(env);
    if (s.front() == '-') throw std::invalid_argument("negative");
    const std::uint64_t v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw CLI::ValidationError("OUCOPULA_SEED", std::string("not an unsigned integer: '") + env + "'");
  }
}

inline std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

struct ModelFlags {
  std::vector<std::size_t> stage_widths{64, 128};
  std::size_t blocks_per_stage = 2;
  std::optional<std::size_t> stem_kernel, stem_stride;
  std::optional<bool> stem_pool;
  double adapter_width_ratio = 1.0;
  bool per_channel_head = false;

  void add(CLI::App* app) {
    app->add_option("--stage-widths", stage_widths, "Channel width of each residual stage")->capture_default_str();
    app->add_option("--blocks-per-stage", blocks_per_stage, "Residual blocks per stage")->capture_default_str();
    app->add_option("--stem-kernel", stem_kernel, "Stem convolution kernel (default 3 below 128 px, else 7)");
    app->add_option("--stem-stride", stem_stride, "Stem convolution stride (default 1 below 128 px, else 2)");
    app->add_option("--stem-pool", stem_pool, "Max-pool after the stem: true/false (default on from 128 px)");
    app->add_option("--adapter-width-ratio", adapter_width_ratio, "Adapter kernel width relative to 1x1")
        ->capture_default_str();
    app->add_flag("--per-channel-head", per_channel_head, "Give each eye its own regression head");
  }

  BackboneConfig config(const data::DatasetContainer& ds) const {
    if (ds.height() != ds.width()) {
      throw ShapeError("images must be square, got " + std::to_string(ds.height()) + "x" + std::to_string(ds.width()));
    }
    BackboneConfig c;
    c.resolution = ds.height();
    c.in_channels = ds.channels();
    c.stem_kernel = stem_kernel;
    c.stem_stride = stem_stride;
    c.stem_pool = stem_pool;
    c.stage_widths = stage_widths;
    c.blocks_per_stage = blocks_per_stage;
    c.adapter_width_ratio = adapter_width_ratio;
    c.per_channel_head = per_channel_head;
    validate(c);
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string mode = "oucopula";

  void add(CLI::App* app, bool with_mode) {
    if (with_mode) {
      app->add_option("--mode", mode, "baseline_single_channel | adapters | oucopula")
          ->check(CLI::IsMember({"baseline_single_channel", "baseline", "adapters", "oucopula"}))
          ->capture_default_str();
    }
    app->add_option("--warmup-epochs", cfg.warmup_epochs, "Epochs of squared-error warm-up")->capture_default_str();
    app->add_option("--copula-epochs", cfg.copula_epochs, "Epochs of copula-loss training")->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size, "Patients per batch")->capture_default_str();
    app->add_option("--warmup-lr", cfg.warmup_lr, "Adam learning rate for the warm-up")->capture_default_str();
    app->add_option("--copula-lr", cfg.copula_lr, "Adam learning rate for the copula phase")->capture_default_str();
    app->add_option("--standardize-labels", cfg.standardize_labels, "z-score labels with training statistics: true/false")
        ->capture_default_str();
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.mode = parse_train_mode(mode);
    c.seed = seed;
    c.validate();
    return c;
  }
};

struct SplitFlags {
  data::SplitSpec spec;
  std::optional<std::uint64_t> split_seed;

  void add(CLI::App* app) {
    app->add_option("--folds", spec.folds, "Cross-validation folds")->capture_default_str();
    app->add_option("--train-fraction", spec.train_fraction, "Training share per fold")->capture_default_str();
    app->add_option("--val-fraction", spec.val_fraction, "Validation share per fold")->capture_default_str();
    app->add_option("--test-fraction", spec.test_fraction, "Test share per fold")->capture_default_str();
    app->add_option("--split-seed", split_seed, "Seed of the fold plan (default: --seed)");
  }

  data::SplitSpec config(std::uint64_t seed) const {
    data::SplitSpec s = spec;
    s.seed = split_seed.value_or(seed);
    return s;
  }
};

/// Applies a flat JSON object of `flag-name: value` pairs to the options of `app`
/// that were not given on the command line.
inline void merge_config_file(CLI::App* app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--config", "cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CLI::ValidationError("--config", "'" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw CLI::ValidationError("--config", "'" + path + "' must hold a JSON object");
  auto text = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  for (const auto& [key, value] : j.items()) {
    CLI::Option* op = key == "config" || key == "help" ? nullptr : app->get_option_no_throw("--" + key);
    if (op == nullptr) throw CLI::ValidationError("--config", "unknown key '" + key + "' in '" + path + "'");
    if (op->count() > 0) continue;
    if (value.is_array()) {
      for (const auto& v : value) op->add_result(text(v));
    } else {
      op->add_result(text(value));
    }
    op->run_callback();
  }
}

inline data::DatasetContainer load_dataset(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  data::DatasetContainer ds = ext == ".csv" ? data::read_manifest(path) : data::read_container(path);
  ds.validate();
  return ds;
}

inline nlohmann::ordered_json data_echo(const std::string& path, const data::DatasetContainer& ds) {
  nlohmann::ordered_json j;
  j["path"] = path;
  j["patients"] = ds.size();
  j["channels"] = ds.channels();
  j["resolution"] = ds.height();
  j["provenance"] = to_string(ds.provenance);
  if (!ds.generator.empty()) j["generator"] = ds.generator;
  return j;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

/// Entry point shared by the executable and the tests. Exit codes: 0 success,
/// 1 usage or configuration error, 2 data or format error, 3 numerical failure.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app("Paired-eye regression with a Gaussian copula loss", "oucopula");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic paired-eye dataset (OUD1)");
  data::GeneratorConfig gcfg;
  double rho = 0.8, within = -0.3, sigma = 0.5;
  std::uint64_t gen_seed = 0;
  std::size_t gen_jobs = 1;
  std::string gen_out, gen_config;
  gen->add_option("--n", gcfg.n_patients, "Number of patients")->capture_default_str();
  gen->add_option("--res", gcfg.resolution, "Image side length in pixels")->capture_default_str();
  gen->add_option("--channels", gcfg.channels, "Image channels")->capture_default_str();
  gen->add_option("--rho", rho, "Noise correlation of the same label across eyes")->capture_default_str();
  gen->add_option("--within", within, "Noise correlation of SE and AL within an eye")->capture_default_str();
  gen->add_option("--sigma", sigma, "Noise SD of every label")->capture_default_str();
  gen->add_option("--delta", gcfg.delta, "Interocular asymmetry strength")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Random seed (default: OUCOPULA_SEED or 0)");
  gen->add_option("--out", gen_out, "Output .oud file")->required();
  gen->add_option("--jobs", gen_jobs, "Worker threads (output does not depend on it)")->capture_default_str();
  gen->add_option("--config", gen_config, "JSON file of flag values; command-line flags take precedence");

  // train
  auto* train = app.add_subcommand("train", "Train one mode on one fold and write a run directory");
  detail::TrainFlags train_flags;
  detail::ModelFlags train_model;
  detail::SplitFlags train_split;
  std::string train_data, train_out, train_config;
  std::uint64_t train_seed = 0;
  std::size_t train_fold = 0;
  bool train_quiet = false;
  train->add_option("--data", train_data, "Dataset: .oud container or manifest .csv")->required();
  train->add_option("--out", train_out, "Run directory")->required();
  train_flags.add(train, true);
  train->add_option("--seed", train_seed, "Master seed (default: OUCOPULA_SEED or 0)");
  train_split.add(train);
  train->add_option("--fold", train_fold, "Fold of the plan to train on")->capture_default_str();
  train_model.add(train);
  train->add_flag("--quiet", train_quiet, "Suppress progress output");
  train->add_option("--config", train_config, "JSON file of flag values; command-line flags take precedence");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a report");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint.oucm file")->required();
  eval->add_option("--data", eval_data, "Dataset: .oud container or manifest .csv")->required();
  eval->add_option("--out", eval_out, "Output report .json file")->required();
  eval->add_option("--split", eval_split, "Patients to evaluate: train | val | test | all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}))
      ->capture_default_str();

  // cv
  auto* cv = app.add_subcommand("cv", "Cross-validate all three modes and write per-run directories and a summary");
  detail::TrainFlags cv_flags;
  detail::ModelFlags cv_model;
  detail::SplitFlags cv_split;
  std::string cv_data, cv_out, cv_config;
  std::uint64_t cv_seed = 0;
  std::size_t cv_jobs = detail::default_jobs();
  bool cv_quiet = false;
  cv->add_option("--data", cv_data, "Dataset: .oud container or manifest .csv")->required();
  cv->add_option("--out", cv_out, "Output directory")->required();
  cv_flags.add(cv, false);
  cv->add_option("--seed", cv_seed, "Master seed (default: OUCOPULA_SEED or 0)");
  cv_split.add(cv);
  cv_model.add(cv);
  cv->add_option("--jobs", cv_jobs, "Maximum concurrent runs (output does not depend on it)")->capture_default_str();
  cv->add_flag("--quiet", cv_quiet, "Suppress progress output");
  cv->add_option("--config", cv_config, "JSON file of flag values; command-line flags take precedence");

  // estimate
  auto* est = app.add_subcommand("estimate", "Estimate copula parameters from a residual CSV");
  std::string est_in, est_out;
  est->add_option("--residuals", est_in, "CSV with a header row naming the columns, one residual vector per row")
      ->required();
  est->add_option("--out", est_out, "Output JSON {sigma, gamma, repaired}")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op, the copula loss and the model losses");
  std::uint64_t gc_seed = 0;
  std::size_t gc_coords = 300;
  double gc_threshold = 1e-6;
  gc->add_option("--seed", gc_seed, "Seed of inputs and sampled coordinates (default: OUCOPULA_SEED or 0)");
  gc->add_option("--coordinates", gc_coords, "Sampled parameter entries per full-model loss")->capture_default_str();
  gc->add_option("--threshold", gc_threshold, "Maximum allowed relative error")->capture_default_str();

  auto* version = app.add_subcommand("version", "Print the version");

  CLI::App* current = nullptr;
  try {
    const std::uint64_t env_seed = detail::default_seed();
    gen_seed = train_seed = cv_seed = gc_seed = env_seed;
    app.parse(argc, argv);
    for (CLI::App* sub : app.get_subcommands()) current = sub;
    if (gen->parsed() && !gen_config.empty()) detail::merge_config_file(gen, gen_config);
    if (train->parsed() && !train_config.empty()) detail::merge_config_file(train, train_config);
    if (cv->parsed() && !cv_config.empty()) detail::merge_config_file(cv, cv_config);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return kExitOk;
    if (dynamic_cast<const CLI::RequiredError*>(&e) != nullptr) {
      CLI::App* sub = current;
      for (CLI::App* s : app.get_subcommands()) sub = s;
      std::cerr << (sub != nullptr ? sub->help() : app.help());
    }
    return kExitUsage;
  }

  try {
    if (version->parsed()) {
      std::cout << "oucopula " << OUCOPULA_VERSION << "\n";
      return kExitOk;
    }

    if (gen->parsed()) {
      gcfg.sigma = Eigen::Vector4d::Constant(sigma);
      gcfg.gamma = data::noise_correlation(rho, within);
      gcfg.seed = gen_seed;
      const data::DatasetContainer ds = data::generate(gcfg, std::max<std::size_t>(gen_jobs, 1));
      data::write_container(ds, gen_out);
      return kExitOk;
    }

    if (train->parsed()) {
      const TrainConfig tc = train_flags.config(train_seed);
      const data::DatasetContainer ds = detail::load_dataset(train_data);
      const BackboneConfig bc = train_model.config(ds);
      const data::SplitSpec split = train_split.config(train_seed);
      const data::FoldPlan plan = data::plan_splits(ds.size(), split);
      if (train_fold >= plan.folds.size()) {
        throw ShapeError("--fold " + std::to_string(train_fold) + " is out of range for " +
                         std::to_string(plan.folds.size()) + " folds");
      }
      const data::Fold& fold = plan.folds[train_fold];
      RunResult r = run_training(ds, fold, tc, bc);
      nlohmann::ordered_json base;
      base["command"] = "train";
      base["data"] = detail::data_echo(train_data, ds);
      base["split"] = to_json(split);
      base["fold"] = train_fold;
      write_run(train_out, r, ds, fold, base);
      if (!train_quiet) {
        std::cerr << "train: " << to_string(tc.mode) << " fold " << train_fold << " test ou_total "
                  << detail::fmt(r.test_report.ou_total) << " (val " << detail::fmt(r.val_report.ou_total) << ")\n";
      }
      return kExitOk;
    }

    if (eval->parsed()) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      const data::DatasetContainer ds = detail::load_dataset(eval_data);
      const BackboneConfig& mc = ck.model.config;
      if (ds.channels() != mc.in_channels || ds.height() != mc.resolution || ds.width() != mc.resolution) {
        throw ShapeError("dataset images are " + std::to_string(ds.channels()) + "x" + std::to_string(ds.height()) + "x" +
                         std::to_string(ds.width()) + " but the checkpoint expects " + std::to_string(mc.in_channels) +
                         "x" + std::to_string(mc.resolution) + "x" + std::to_string(mc.resolution));
      }
      std::vector<std::size_t> patients;
      if (eval_split == "all") {
        for (std::size_t i = 0; i < ds.size(); ++i) patients.push_back(i);
      } else {
        if (!ck.config.contains("split") || !ck.config.contains("fold")) {
          throw ShapeError("checkpoint records no fold plan; use --split all");
        }
        const data::SplitSpec split = split_spec_from_json(ck.config["split"]);
        const auto k = ck.config["fold"].get<std::size_t>();
        const data::FoldPlan plan = data::plan_splits(ds.size(), split);
        if (k >= plan.folds.size()) throw FormatError("checkpoint fold index out of range");
        const data::Fold& f = plan.folds[k];
        patients = eval_split == "train" ? f.train : eval_split == "val" ? f.val : f.test;
      }
      const MetricsReport rep = evaluate(ck.model, ds, patients, ck.standardizer);
      write_json(eval_out, rep.to_json());
      return kExitOk;
    }

    if (cv->parsed()) {
      CvConfig cc;
      cc.train = cv_flags.config(cv_seed);
      const data::DatasetContainer ds = detail::load_dataset(cv_data);
      cc.backbone = cv_model.config(ds);
      cc.split = cv_split.config(cv_seed);
      cc.jobs = std::max<std::size_t>(cv_jobs, 1);
      nlohmann::ordered_json base;
      base["command"] = "cv";
      base["data"] = detail::data_echo(cv_data, ds);
      std::function<void(const std::string&)> progress;
      if (!cv_quiet) progress = [](const std::string& s) { std::cerr << s << "\n"; };
      const CvResult res = run_cv(ds, cc, std::filesystem::path(cv_out), base, progress);
      if (!cv_quiet) {
        for (std::size_t m = 0; m < kCvModes.size(); ++m) {
          std::cerr << "cv: mean test ou_total " << to_string(kCvModes[m]) << " "
                    << detail::fmt(mean_report(res.test[m]).ou_total) << "\n";
        }
      }
      return kExitOk;
    }

    if (est->parsed()) {
      std::ifstream in(est_in);
      if (!in) throw FormatError("cannot open '" + est_in + "'");
      std::string line;
      if (!std::getline(in, line)) throw FormatError(est_in + ": empty file");
      if (!line.empty() && line.back() == '\r') line.pop_back();
      ResidualMatrix rm;
      rm.columns = data::split_csv_line(line);
      const std::size_t p = rm.columns.size();
      for (const auto& c : rm.columns) {
        if (c.empty()) throw FormatError(est_in + ": header has an empty column name");
      }
      std::vector<std::vector<double>> rows;
      std::size_t lineno = 1;
      while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = data::split_csv_line(line);
        const std::string where = est_in + ":" + std::to_string(lineno);
        if (cells.size() != p) throw FormatError(where + ": expected " + std::to_string(p) + " columns");
        std::vector<double> row;
        for (const auto& c : cells) row.push_back(data::parse_double(c, where));
        rows.push_back(std::move(row));
      }
      rm.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(p));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < p; ++c) rm.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
      CopulaParams params;
      try {
        params = estimate_params(rm);
      } catch (const ShapeError& e) {
        throw NumericalError(e.what());
      }
      write_json(est_out, to_json(params));
      return kExitOk;
    }

    if (gc->parsed()) {
      auto suites = op_gradient_suites(gc_seed);
      for (auto& s : model_gradient_suites(gc_seed, gc_coords)) suites.push_back(std::move(s));
      double worst = 0.0;
      bool ok = true;
      for (auto& s : suites) {
        s.threshold = gc_threshold;
        worst = std::max(worst, s.report.max_relative_error);
        ok = ok && s.passed();
        std::cout << (s.passed() ? "ok   " : "FAIL ") << s.name << " max_rel_err " << detail::fmt(s.report.max_relative_error)
                  << " checked " << s.report.checked << " skipped " << s.report.skipped_kinks << "\n";
      }
      std::cout << "max relative error " << detail::fmt(worst) << " (threshold " << detail::fmt(gc_threshold) << ")\n";
      return ok ? kExitOk : kExitNumerical;
    }
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Unsupported& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  }
  return kExitUsage;
}

}  // namespace oucopula::cli
