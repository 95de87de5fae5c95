#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "oucopula/charts.hpp"
#include "oucopula/checkpoint.hpp"
#include "oucopula/config_json.hpp"
#include "oucopula/train.hpp"

namespace oucopula {

/// Writes `text` to `path`, creating parent directories.
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::ordered_json log_to_json(const std::vector<EpochRecord>& log) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["phase"] = e.phase;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss ? nlohmann::ordered_json(*e.train_loss) : nlohmann::ordered_json(nullptr);
    j["val_total"] = e.val_total;
    out.push_back(std::move(j));
  }
  return out;
}

/// Effective configuration of a run plus its outcome summary. `base` carries the
/// caller's settings (data source, split, fold) and is extended, not replaced.
inline nlohmann::ordered_json run_echo(const RunResult& r, nlohmann::ordered_json base) {
  base["model"] = to_json(r.model_config);
  base["train"] = to_json(r.train);
  if (r.copula) base["copula"] = to_json(*r.copula);
  base["warmup_best_epoch"] = r.warmup_best_epoch;
  if (r.copula_best_epoch) base["copula_best_epoch"] = *r.copula_best_epoch;
  base["log"] = log_to_json(r.log);
  base["val_report"] = r.val_report.to_json();
  return base;
}

/// Populates a run directory: run.json, copula.json, checkpoint.oucm, report.json
/// (test split) and charts/report.svg.
///
/// For modes without a copula phase, copula.json holds parameters estimated from
/// the final model's training residuals and is marked as unused in training.
inline void write_run(const std::filesystem::path& dir, RunResult& r, const data::DatasetContainer& ds,
                      const data::Fold& fold, const nlohmann::ordered_json& base) {
  std::filesystem::create_directories(dir);
  const nlohmann::ordered_json echo = run_echo(r, base);
  write_json(dir / "run.json", echo);

  nlohmann::ordered_json cop;
  if (r.copula) {
    cop = to_json(*r.copula);
    cop["used_in_training"] = true;
  } else {
    cop = to_json(fit_copula(r.model, ds, fold.train, r.standardizer));
    cop["used_in_training"] = false;
  }
  write_json(dir / "copula.json", cop);

  Checkpoint ck{echo, r.model, r.standardizer, r.copula};
  save_checkpoint(ck, (dir / "checkpoint.oucm").string());
  write_json(dir / "report.json", r.test_report.to_json());
  write_text(dir / "charts" / "report.svg",
             charts::metric_bars("MSE by eye and label (" + to_string(r.train.mode) + ")",
                                 {{"validation", r.val_report}, {"test", r.test_report}}));
}

}  // namespace oucopula
