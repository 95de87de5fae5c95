#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oucopula/backbone.hpp"
#include "oucopula/copula.hpp"
#include "oucopula/data/dataset.hpp"
#include "oucopula/data/splits.hpp"
#include "oucopula/metrics.hpp"
#include "oucopula/nd/adam.hpp"
#include "oucopula/nd/ops.hpp"

namespace oucopula {

enum class TrainMode { baseline_single_channel, adapters, oucopula };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::baseline_single_channel:
      return "baseline_single_channel";
    case TrainMode::adapters:
      return "adapters";
    case TrainMode::oucopula:
      return "oucopula";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "baseline_single_channel" || s == "baseline") return TrainMode::baseline_single_channel;
  if (s == "adapters") return TrainMode::adapters;
  if (s == "oucopula") return TrainMode::oucopula;
  throw ShapeError("unknown mode '" + std::string(s) + "' (expected baseline_single_channel, adapters or oucopula)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::oucopula;
  std::size_t warmup_epochs = 40;
  std::size_t copula_epochs = 20;
  std::size_t batch_size = 32;
  double warmup_lr = 1e-3;
  double copula_lr = 1e-4;
  std::uint64_t seed = 0;
  bool standardize_labels = true;

  void validate() const {
    if (warmup_epochs < 1) throw ShapeError("TrainConfig: warm-up epochs must be >= 1");
    if (mode == TrainMode::oucopula && copula_epochs < 1) throw ShapeError("TrainConfig: copula epochs must be >= 1");
    if (batch_size < 2) throw ShapeError("TrainConfig: batch size must be >= 2");
    if (!(warmup_lr > 0.0) || !(copula_lr > 0.0)) throw ShapeError("TrainConfig: learning rates must be positive");
  }
};

/// The model configuration a mode trains: baseline drops the adapters.
inline BackboneConfig model_config_for(TrainMode mode, BackboneConfig cfg) {
  cfg.use_adapters = mode != TrainMode::baseline_single_channel;
  if (!cfg.use_adapters) cfg.per_channel_head = false;
  return cfg;
}

/// splitmix64 of (seed, tag): independent streams for model init and batch order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace seed_tag {
inline constexpr std::uint64_t model = 1, warmup = 2, copula = 3;
}

/// Training-split statistics: per-channel image mean/SD (over both eyes) and
/// per-label mean/SD. Without label standardization the label transform is the identity.
struct Standardizer {
  std::array<double, kLabelCount> label_mean{0.0, 0.0, 0.0, 0.0};
  std::array<double, kLabelCount> label_sd{1.0, 1.0, 1.0, 1.0};
  std::vector<double> image_mean;
  std::vector<double> image_sd;

  static Standardizer fit(const data::DatasetContainer& ds, std::span<const std::size_t> train, bool standardize_labels) {
    if (train.size() < 2) throw ShapeError("Standardizer: need at least 2 training patients");
    Standardizer s;
    const std::size_t c = ds.channels(), plane = ds.height() * ds.width();
    s.image_mean.assign(c, 0.0);
    s.image_sd.assign(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i : train) {
        for (const nd::Tensor* img : {&ds.records[i].os_image, &ds.records[i].od_image}) {
          const double* p = img->data() + k * plane;
          for (std::size_t q = 0; q < plane; ++q) {
            sum += p[q];
            sq += p[q] * p[q];
          }
        }
      }
      const double count = static_cast<double>(2 * train.size() * plane);
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      s.image_mean[k] = mean;
      s.image_sd[k] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    if (standardize_labels) {
      const double n = static_cast<double>(train.size());
      for (std::size_t k = 0; k < kLabelCount; ++k) {
        double mean = 0.0;
        for (std::size_t i : train) mean += ds.records[i].labels[k];
        mean /= n;
        double ss = 0.0;
        for (std::size_t i : train) ss += (ds.records[i].labels[k] - mean) * (ds.records[i].labels[k] - mean);
        const double sd = std::sqrt(ss / (n - 1.0));
        if (!(sd > 0.0) || !std::isfinite(sd)) {
          throw NumericalError("label '" + std::string(kLabelNames[k]) + "' has zero variance on the training split");
        }
        s.label_mean[k] = mean;
        s.label_sd[k] = sd;
      }
    }
    return s;
  }

  /// Stacks standardized images for (patient, eye) samples into N x C x H x W.
  nd::Tensor images(const data::DatasetContainer& ds, std::span<const std::pair<std::size_t, EyeChannel>> samples) const {
    const std::size_t c = ds.channels(), h = ds.height(), w = ds.width(), plane = h * w;
    nd::Tensor out(nd::Shape{samples.size(), c, h, w});
    double* dst = out.data();
    for (const auto& [i, eye] : samples) {
      const nd::Tensor& img = eye == EyeChannel::os ? ds.records.at(i).os_image : ds.records.at(i).od_image;
      for (std::size_t k = 0; k < c; ++k) {
        const double mean = image_mean[k], inv = 1.0 / image_sd[k];
        const double* src = img.data() + k * plane;
        for (std::size_t q = 0; q < plane; ++q) *dst++ = (src[q] - mean) * inv;
      }
    }
    return out;
  }

  nd::Tensor images(const data::DatasetContainer& ds, std::span<const std::size_t> patients, EyeChannel eye) const {
    std::vector<std::pair<std::size_t, EyeChannel>> samples;
    samples.reserve(patients.size());
    for (std::size_t i : patients) samples.emplace_back(i, eye);
    return images(ds, samples);
  }

  double to_model(std::size_t pos, double y) const { return (y - label_mean[pos]) / label_sd[pos]; }
  double from_model(std::size_t pos, double v) const { return v * label_sd[pos] + label_mean[pos]; }

  /// Standardized label matrix (n x 4) for the given patients.
  Eigen::MatrixXd labels(const data::DatasetContainer& ds, std::span<const std::size_t> patients) const {
    Eigen::MatrixXd y(static_cast<Eigen::Index>(patients.size()), static_cast<Eigen::Index>(kLabelCount));
    for (std::size_t r = 0; r < patients.size(); ++r) {
      for (std::size_t k = 0; k < kLabelCount; ++k) {
        y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = to_model(k, ds.records.at(patients[r]).labels[k]);
      }
    }
    return y;
  }
};

inline nd::Tensor to_tensor(const Eigen::MatrixXd& m) {
  nd::Tensor t(nd::Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  }
  return t;
}

inline Eigen::MatrixXd to_matrix(const nd::Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  }
  return m;
}

inline constexpr std::size_t kEvalChunk = 64;

/// Eval-mode predictions in model (standardized) units, n x 4.
inline Eigen::MatrixXd predict_standardized(BiChannelModel& model, const data::DatasetContainer& ds,
                                            std::span<const std::size_t> patients, const Standardizer& st) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(patients.size()), static_cast<Eigen::Index>(kLabelCount));
  for (std::size_t lo = 0; lo < patients.size(); lo += kEvalChunk) {
    const auto chunk = patients.subspan(lo, std::min(kEvalChunk, patients.size() - lo));
    const nd::Tensor pred =
        predict_labels(model, st.images(ds, chunk, EyeChannel::os), st.images(ds, chunk, EyeChannel::od));
    out.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(chunk.size())) = to_matrix(pred);
  }
  return out;
}

/// Eval-mode predictions in original label units, n x 4.
inline Eigen::MatrixXd predict(BiChannelModel& model, const data::DatasetContainer& ds,
                               std::span<const std::size_t> patients, const Standardizer& st) {
  Eigen::MatrixXd p = predict_standardized(model, ds, patients, st);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (std::size_t k = 0; k < kLabelCount; ++k) {
      p(r, static_cast<Eigen::Index>(k)) = st.from_model(k, p(r, static_cast<Eigen::Index>(k)));
    }
  }
  return p;
}

/// Nine-way MSE report in original label units.
inline MetricsReport evaluate(BiChannelModel& model, const data::DatasetContainer& ds, std::span<const std::size_t> patients,
                              const Standardizer& st) {
  if (patients.empty()) throw ShapeError("evaluate: empty split");
  Eigen::MatrixXd y(static_cast<Eigen::Index>(patients.size()), static_cast<Eigen::Index>(kLabelCount));
  for (std::size_t r = 0; r < patients.size(); ++r) {
    for (std::size_t k = 0; k < kLabelCount; ++k) {
      y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = ds.records.at(patients[r]).labels[k];
    }
  }
  return compute_metrics(predict(model, ds, patients, st), y);
}

/// Standardized training residuals y - g(X) in eval mode.
inline ResidualMatrix residuals(BiChannelModel& model, const data::DatasetContainer& ds,
                                std::span<const std::size_t> patients, const Standardizer& st) {
  ResidualMatrix r;
  r.values = st.labels(ds, patients) - predict_standardized(model, ds, patients, st);
  for (auto name : kLabelNames) r.columns.emplace_back(name);
  return r;
}

/// Copula parameters from the model's training-split residuals.
inline CopulaParams fit_copula(BiChannelModel& model, const data::DatasetContainer& ds, std::span<const std::size_t> train,
                               const Standardizer& st) {
  return estimate_params(residuals(model, ds, train, st));
}

struct EpochRecord {
  std::string phase;
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // unset for the untrained candidate
  double val_total = 0.0;
};

struct PhaseResult {
  BiChannelModel model;  // best-validation snapshot
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_total = 0.0;
};

namespace detail {

/// Batches of positions into `count` shuffled samples; a trailing batch of one is
/// dropped because train-mode batch norm needs two samples.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t count, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t lo = 0; lo < count; lo += batch) {
    const std::size_t hi = std::min(count, lo + batch);
    if (hi - lo < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return out;
}

inline void check_mode(const BiChannelModel& model, TrainMode mode) {
  if (mode == TrainMode::baseline_single_channel && model.config.use_adapters) {
    throw ShapeError("baseline_single_channel mode trains a model without adapters");
  }
  if (mode != TrainMode::baseline_single_channel && !model.config.use_adapters) {
    throw ShapeError(to_string(mode) + " mode requires a model with adapters");
  }
}

inline void check_finite_loss(double loss, const std::string& phase, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    throw NumericalError(phase + ": non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch));
  }
}

/// Runs `epochs` epochs of `step` (which updates `model` and returns the batch loss)
/// and keeps the snapshot with the lowest validation total MSE, the starting model
/// included as epoch 0.
template <typename Step>
PhaseResult train_phase(BiChannelModel& model, const std::string& phase, std::size_t epochs, std::size_t n_samples,
                        std::size_t batch_size, std::uint64_t seed, const data::DatasetContainer& ds,
                        std::span<const std::size_t> val, const Standardizer& st, Step&& step) {
  if (n_samples < 2) throw ShapeError(phase + ": need at least 2 training samples");
  if (val.empty()) throw ShapeError(phase + ": empty validation split");
  PhaseResult result;
  result.best_val_total = evaluate(model, ds, val, st).ou_total;
  result.best_epoch = 0;
  result.model = model;
  result.log.push_back({phase, 0, std::nullopt, result.best_val_total});
  std::mt19937_64 rng(seed);
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    const auto batches = shuffled_batches(n_samples, batch_size, rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double loss = step(batches[b]);
      check_finite_loss(loss, phase, epoch, b);
      total += loss * static_cast<double>(batches[b].size());
      seen += batches[b].size();
    }
    const double val_total = evaluate(model, ds, val, st).ou_total;
    if (!std::isfinite(val_total)) throw NumericalError(phase + ": non-finite validation MSE at epoch " + std::to_string(epoch));
    result.log.push_back({phase, epoch, total / static_cast<double>(seen), val_total});
    if (val_total < result.best_val_total) {
      result.best_val_total = val_total;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace detail

/// Warm-up under squared error: for each batch of patients both eyes go through
/// their channel path and the loss is the batch mean of the squared error summed
/// over the four labels. Baseline mode instead treats every eye as an independent
/// sample with two labels through the adapter-free trunk.
inline PhaseResult warmup(BiChannelModel model, const data::DatasetContainer& ds, const data::Fold& fold,
                          const Standardizer& st, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_mode(model, cfg.mode);
  if (fold.train.empty()) throw ShapeError("warmup: empty training split");
  nd::Adam adam({.learning_rate = cfg.warmup_lr});
  const Eigen::MatrixXd y = st.labels(ds, fold.train);
  const std::uint64_t seed = derive_seed(cfg.seed, seed_tag::warmup);

  if (cfg.mode == TrainMode::baseline_single_channel) {
    std::vector<std::pair<std::size_t, EyeChannel>> samples;
    for (std::size_t r = 0; r < fold.train.size(); ++r) {
      samples.emplace_back(r, EyeChannel::os);
      samples.emplace_back(r, EyeChannel::od);
    }
    return detail::train_phase(model, "warmup", cfg.warmup_epochs, samples.size(), cfg.batch_size, seed, ds, fold.val, st,
                               [&](const std::vector<std::size_t>& batch) {
                                 std::vector<std::pair<std::size_t, EyeChannel>> picked;
                                 nd::Tensor target(nd::Shape{batch.size(), kLabelsPerEye});
                                 for (std::size_t b = 0; b < batch.size(); ++b) {
                                   const auto [r, eye] = samples[batch[b]];
                                   picked.emplace_back(fold.train[r], eye);
                                   for (std::size_t k = 0; k < kLabelsPerEye; ++k) {
                                     const std::size_t pos = static_cast<std::size_t>(eye) * kLabelsPerEye + k;
                                     target.at(b, k) = y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(pos));
                                   }
                                 }
                                 nd::GradTape tape;
                                 nd::Var pred = forward(tape, model, st.images(ds, picked), std::nullopt, nd::Mode::train);
                                 nd::Var loss = nd::summed_squared_error(pred, target);
                                 tape.backward(loss);
                                 adam.step(model.params);
                                 return loss.value()[0];
                               });
  }

  return detail::train_phase(model, "warmup", cfg.warmup_epochs, fold.train.size(), cfg.batch_size, seed, ds, fold.val, st,
                             [&](const std::vector<std::size_t>& batch) {
                               std::vector<std::size_t> patients;
                               nd::Tensor target(nd::Shape{batch.size(), kLabelCount});
                               for (std::size_t b = 0; b < batch.size(); ++b) {
                                 patients.push_back(fold.train[batch[b]]);
                                 for (std::size_t k = 0; k < kLabelCount; ++k) {
                                   target.at(b, k) = y(static_cast<Eigen::Index>(batch[b]), static_cast<Eigen::Index>(k));
                                 }
                               }
                               nd::GradTape tape;
                               nd::Var pred = forward_pair(tape, model, st.images(ds, patients, EyeChannel::os),
                                                           st.images(ds, patients, EyeChannel::od), nd::Mode::train);
                               nd::Var loss = nd::summed_squared_error(pred, target);
                               tape.backward(loss);
                               adam.step(model.params);
                               return loss.value()[0];
                             });
}

/// Copula-phase training: continues from `model` minimizing the Gaussian copula
/// negative log-likelihood of the four standardized residuals, with `params` frozen.
inline PhaseResult copula_train(BiChannelModel model, const CopulaParams& params, const data::DatasetContainer& ds,
                                const data::Fold& fold, const Standardizer& st, const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::oucopula) {
    throw ShapeError("copula training requires mode oucopula, got " + to_string(cfg.mode));
  }
  cfg.validate();
  detail::check_mode(model, cfg.mode);
  if (!params.factorized || params.dim() != kLabelCount) throw ShapeError("copula_train: params must be factorized 4 x 4");
  nd::Adam adam({.learning_rate = cfg.copula_lr});
  const Eigen::MatrixXd y = st.labels(ds, fold.train);
  return detail::train_phase(model, "copula", cfg.copula_epochs, fold.train.size(), cfg.batch_size,
                             derive_seed(cfg.seed, seed_tag::copula), ds, fold.val, st,
                             [&](const std::vector<std::size_t>& batch) {
                               std::vector<std::size_t> patients;
                               nd::Tensor target(nd::Shape{batch.size(), kLabelCount});
                               for (std::size_t b = 0; b < batch.size(); ++b) {
                                 patients.push_back(fold.train[batch[b]]);
                                 for (std::size_t k = 0; k < kLabelCount; ++k) {
                                   target.at(b, k) = y(static_cast<Eigen::Index>(batch[b]), static_cast<Eigen::Index>(k));
                                 }
                               }
                               nd::GradTape tape;
                               nd::Var pred = forward_pair(tape, model, st.images(ds, patients, EyeChannel::os),
                                                           st.images(ds, patients, EyeChannel::od), nd::Mode::train);
                               nd::Var loss = copula_nll(nd::residual(target, pred), params);
                               tape.backward(loss);
                               adam.step(model.params);
                               return loss.value()[0];
                             });
}

/// Everything a finished run produces.
struct RunResult {
  TrainConfig train;
  BackboneConfig model_config;
  Standardizer standardizer;
  BiChannelModel model;
  std::optional<CopulaParams> copula;  // frozen parameters of the copula phase
  std::vector<EpochRecord> log;
  std::size_t warmup_best_epoch = 0;
  std::optional<std::size_t> copula_best_epoch;
  MetricsReport val_report;
  MetricsReport test_report;
};

namespace detail {

inline RunResult finish(RunResult r, const data::DatasetContainer& ds, const data::Fold& fold) {
  r.val_report = evaluate(r.model, ds, fold.val, r.standardizer);
  r.test_report = evaluate(r.model, ds, fold.test, r.standardizer);
  return r;
}

}  // namespace detail

/// Continues a finished adapters-mode warm-up into the copula phase.
inline RunResult continue_with_copula(const RunResult& warm, const data::DatasetContainer& ds, const data::Fold& fold,
                                      TrainConfig cfg) {
  cfg.mode = TrainMode::oucopula;
  RunResult r;
  r.train = cfg;
  r.model_config = warm.model_config;
  r.standardizer = warm.standardizer;
  r.log = warm.log;
  r.warmup_best_epoch = warm.warmup_best_epoch;
  BiChannelModel start = warm.model;
  r.copula = fit_copula(start, ds, fold.train, r.standardizer);
  PhaseResult cp = copula_train(std::move(start), *r.copula, ds, fold, r.standardizer, cfg);
  r.log.insert(r.log.end(), cp.log.begin(), cp.log.end());
  r.copula_best_epoch = cp.best_epoch;
  r.model = std::move(cp.model);
  return detail::finish(std::move(r), ds, fold);
}

/// The full pipeline for one mode on one fold: warm-up, then (oucopula only)
/// copula estimation and copula-phase training; reports on validation and test.
inline RunResult run_training(const data::DatasetContainer& ds, const data::Fold& fold, const TrainConfig& cfg,
                              const BackboneConfig& backbone) {
  cfg.validate();
  RunResult r;
  r.train = cfg;
  r.model_config = model_config_for(cfg.mode, backbone);
  r.standardizer = Standardizer::fit(ds, fold.train, cfg.standardize_labels);
  PhaseResult warm =
      warmup(build_model(r.model_config, derive_seed(cfg.seed, seed_tag::model)), ds, fold, r.standardizer, cfg);
  r.log = warm.log;
  r.warmup_best_epoch = warm.best_epoch;
  r.model = std::move(warm.model);
  if (cfg.mode != TrainMode::oucopula) return detail::finish(std::move(r), ds, fold);
  r.train.mode = TrainMode::adapters;
  return continue_with_copula(r, ds, fold, cfg);
}

}  // namespace oucopula
