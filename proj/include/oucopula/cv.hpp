#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "oucopula/charts.hpp"
#include "oucopula/run_io.hpp"
#include "oucopula/train.hpp"

namespace oucopula {

inline constexpr std::array<TrainMode, 3> kCvModes{TrainMode::baseline_single_channel, TrainMode::adapters,
                                                   TrainMode::oucopula};

struct CvConfig {
  TrainConfig train;  // mode is ignored; every mode runs
  BackboneConfig backbone;
  data::SplitSpec split;
  std::size_t jobs = 1;
};

struct CvResult {
  data::FoldPlan plan;
  std::array<std::vector<MetricsReport>, 3> test;  // indexed like kCvModes, one entry per fold
  std::array<std::vector<double>, 3> seconds;
  nlohmann::ordered_json summary;
};

/// Mean over folds of the four component MSEs; aggregates are rebuilt from the means.
inline MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ShapeError("mean_report: no reports");
  std::array<double, kLabelCount> m{};
  for (const auto& r : reports) {
    const auto v = r.values();
    for (std::size_t k = 0; k < kLabelCount; ++k) m[k] += v[k];
  }
  for (double& x : m) x /= static_cast<double>(reports.size());
  return MetricsReport::from_components(m);
}

inline nlohmann::ordered_json cv_summary(const CvResult& r) {
  nlohmann::ordered_json s;
  const std::size_t folds = r.plan.folds.size();
  s["folds"] = folds;
  nlohmann::ordered_json modes;
  for (std::size_t m = 0; m < kCvModes.size(); ++m) {
    nlohmann::ordered_json j;
    j["mean"] = mean_report(r.test[m]).to_json();
    std::vector<double> per_fold;
    for (const auto& rep : r.test[m]) per_fold.push_back(rep.ou_total);
    j["ou_total_per_fold"] = per_fold;
    modes[to_string(kCvModes[m])] = j;
  }
  s["modes"] = modes;
  auto wins = [&](std::size_t a, std::size_t b) {
    std::size_t n = 0;
    for (std::size_t f = 0; f < folds; ++f) n += r.test[a][f].ou_total < r.test[b][f].ou_total ? 1 : 0;
    return n;
  };
  // The adapters run is the warm-up the copula phase starts from.
  nlohmann::ordered_json w;
  w["oucopula_beats_warmup"] = wins(2, 1);
  w["adapters_beats_baseline"] = wins(1, 0);
  w["oucopula_beats_baseline"] = wins(2, 0);
  s["wins"] = w;
  const double base = mean_report(r.test[0]).ou_total, adapt = mean_report(r.test[1]).ou_total,
               cop = mean_report(r.test[2]).ou_total;
  nlohmann::ordered_json order;
  order["oucopula_le_adapters"] = cop <= adapt;
  order["adapters_le_baseline"] = adapt <= base;
  s["mean_ordering"] = order;
  return s;
}

/// Runs all three modes on every fold of one shared plan. Each fold is two jobs:
/// the baseline, and the adapters warm-up continued into the copula phase (the
/// adapters-mode run is exactly that warm-up). Jobs run on up to `jobs` threads;
/// results do not depend on the thread count. When `out` is set, every run is
/// written to out/<mode>/fold<k>/ and the summary, timing and charts to out/.
inline CvResult run_cv(const data::DatasetContainer& ds, const CvConfig& cfg,
                       const std::optional<std::filesystem::path>& out = std::nullopt,
                       const nlohmann::ordered_json& echo = nlohmann::ordered_json::object(),
                       const std::function<void(const std::string&)>& progress = {}) {
  cfg.train.validate();
  CvResult result;
  result.plan = data::plan_splits(ds.size(), cfg.split);
  const std::size_t folds = result.plan.folds.size();
  for (std::size_t m = 0; m < 3; ++m) {
    result.test[m].resize(folds);
    result.seconds[m].resize(folds);
  }
  std::mutex log_mutex;
  auto note = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(log_mutex);
    progress(msg);
  };
  auto emit = [&](std::size_t m, std::size_t f, RunResult& r, double secs) {
    result.test[m][f] = r.test_report;
    result.seconds[m][f] = secs;
    if (out) {
      nlohmann::ordered_json base = echo;
      base["split"] = to_json(cfg.split);
      base["fold"] = f;
      write_run(*out / to_string(kCvModes[m]) / ("fold" + std::to_string(f)), r, ds, result.plan.folds[f], base);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", r.test_report.ou_total);
    note("cv: fold " + std::to_string(f) + " " + to_string(kCvModes[m]) + " test ou_total " + buf);
  };
  using clock = std::chrono::steady_clock;
  auto seconds_since = [](clock::time_point t0) { return std::chrono::duration<double>(clock::now() - t0).count(); };
  const auto started = clock::now();
  auto job = [&](std::size_t index) {
    const std::size_t f = index / 2;
    const data::Fold& fold = result.plan.folds[f];
    TrainConfig tc = cfg.train;
    if (index % 2 == 0) {
      tc.mode = TrainMode::baseline_single_channel;
      const auto t0 = clock::now();
      RunResult r = run_training(ds, fold, tc, cfg.backbone);
      emit(0, f, r, seconds_since(t0));
    } else {
      tc.mode = TrainMode::adapters;
      auto t0 = clock::now();
      RunResult warm = run_training(ds, fold, tc, cfg.backbone);
      const double warm_secs = seconds_since(t0);
      t0 = clock::now();
      RunResult cop = continue_with_copula(warm, ds, fold, cfg.train);
      const double cop_secs = seconds_since(t0);
      emit(1, f, warm, warm_secs);
      emit(2, f, cop, warm_secs + cop_secs);
    }
  };

  const std::size_t total = 2 * folds;
  const std::size_t workers = std::clamp<std::size_t>(cfg.jobs, 1, total);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(total);
  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
        next = total;
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  result.summary = cv_summary(result);
  if (out) {
    write_json(*out / "summary.json", result.summary);
    nlohmann::ordered_json timing;
    for (std::size_t m = 0; m < 3; ++m) timing[to_string(kCvModes[m])] = result.seconds[m];
    timing["wall_seconds"] = seconds_since(started);
    write_json(*out / "timing.json", timing);
    std::vector<std::pair<std::string, MetricsReport>> means;
    std::vector<std::pair<std::string, std::vector<MetricsReport>>> per_fold;
    for (std::size_t m = 0; m < 3; ++m) {
      means.emplace_back(to_string(kCvModes[m]), mean_report(result.test[m]));
      per_fold.emplace_back(to_string(kCvModes[m]), result.test[m]);
    }
    write_text(*out / "charts" / "mean_mse.svg", charts::metric_bars("Mean test MSE over folds", means));
    write_text(*out / "charts" / "fold_mse.svg", charts::fold_boxes("Test MSE across folds", per_fold));
  }
  return result;
}

}  // namespace oucopula
