#pragma once

#include <set>
#include <string>

#include "oucopula/backbone.hpp"
#include "oucopula/data/splits.hpp"
#include "oucopula/errors.hpp"
#include "oucopula/train.hpp"
#include "json.hpp"

namespace oucopula {

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw FormatError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw FormatError(std::string(what) + ": unknown key '" + key + "'");
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const BackboneConfig& c) {
  nlohmann::ordered_json j;
  j["resolution"] = c.resolution;
  j["in_channels"] = c.in_channels;
  j["stem_kernel"] = c.effective_stem_kernel();
  j["stem_stride"] = c.effective_stem_stride();
  j["stem_pool"] = c.effective_stem_pool();
  j["stage_widths"] = c.stage_widths;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["outputs"] = c.outputs;
  j["adapter_width_ratio"] = c.adapter_width_ratio;
  j["use_adapters"] = c.use_adapters;
  j["per_channel_head"] = c.per_channel_head;
  return j;
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"resolution", "in_channels", "stem_kernel", "stem_stride", "stem_pool", "stage_widths",
                          "blocks_per_stage", "outputs", "adapter_width_ratio", "use_adapters", "per_channel_head"},
                         "model config");
  BackboneConfig c;
  try {
    c.resolution = j.value("resolution", c.resolution);
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("stem_kernel")) c.stem_kernel = j.at("stem_kernel").get<std::size_t>();
    if (j.contains("stem_stride")) c.stem_stride = j.at("stem_stride").get<std::size_t>();
    if (j.contains("stem_pool")) c.stem_pool = j.at("stem_pool").get<bool>();
    c.stage_widths = j.value("stage_widths", c.stage_widths);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.outputs = j.value("outputs", c.outputs);
    c.adapter_width_ratio = j.value("adapter_width_ratio", c.adapter_width_ratio);
    c.use_adapters = j.value("use_adapters", c.use_adapters);
    c.per_channel_head = j.value("per_channel_head", c.per_channel_head);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["warmup_epochs"] = c.warmup_epochs;
  j["copula_epochs"] = c.copula_epochs;
  j["batch_size"] = c.batch_size;
  j["warmup_lr"] = c.warmup_lr;
  j["copula_lr"] = c.copula_lr;
  j["seed"] = c.seed;
  j["standardize_labels"] = c.standardize_labels;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"mode", "warmup_epochs", "copula_epochs", "batch_size", "warmup_lr", "copula_lr", "seed",
                          "standardize_labels"},
                         "train config");
  TrainConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.copula_epochs = j.value("copula_epochs", c.copula_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.warmup_lr = j.value("warmup_lr", c.warmup_lr);
    c.copula_lr = j.value("copula_lr", c.copula_lr);
    c.seed = j.value("seed", c.seed);
    c.standardize_labels = j.value("standardize_labels", c.standardize_labels);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

inline nlohmann::ordered_json to_json(const data::SplitSpec& s) {
  nlohmann::ordered_json j;
  j["train_fraction"] = s.train_fraction;
  j["val_fraction"] = s.val_fraction;
  j["test_fraction"] = s.test_fraction;
  j["folds"] = s.folds;
  j["seed"] = s.seed;
  return j;
}

inline data::SplitSpec split_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"train_fraction", "val_fraction", "test_fraction", "folds", "seed"}, "split config");
  data::SplitSpec s;
  try {
    s.train_fraction = j.value("train_fraction", s.train_fraction);
    s.val_fraction = j.value("val_fraction", s.val_fraction);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    s.folds = j.value("folds", s.folds);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split config: ") + e.what());
  }
  return s;
}

inline nlohmann::ordered_json to_json(const CopulaParams& p) {
  nlohmann::ordered_json j;
  std::vector<double> sigma(p.sigma.data(), p.sigma.data() + p.sigma.size());
  std::vector<std::vector<double>> gamma(static_cast<std::size_t>(p.gamma.rows()));
  for (Eigen::Index a = 0; a < p.gamma.rows(); ++a) {
    for (Eigen::Index b = 0; b < p.gamma.cols(); ++b) gamma[static_cast<std::size_t>(a)].push_back(p.gamma(a, b));
  }
  j["sigma"] = sigma;
  j["gamma"] = gamma;
  j["repaired"] = p.repaired;
  return j;
}

inline CopulaParams copula_params_from_json(const nlohmann::json& j) {
  try {
    const auto sigma = j.at("sigma").get<std::vector<double>>();
    const auto gamma = j.at("gamma").get<std::vector<std::vector<double>>>();
    const auto p = static_cast<Eigen::Index>(sigma.size());
    Eigen::VectorXd s(p);
    Eigen::MatrixXd g(p, p);
    if (gamma.size() != sigma.size()) throw FormatError("copula params: gamma must be p x p");
    for (Eigen::Index a = 0; a < p; ++a) {
      s(a) = sigma[static_cast<std::size_t>(a)];
      const auto& row = gamma[static_cast<std::size_t>(a)];
      if (row.size() != sigma.size()) throw FormatError("copula params: gamma must be p x p");
      for (Eigen::Index b = 0; b < p; ++b) g(a, b) = row[static_cast<std::size_t>(b)];
    }
    return make_copula_params(s, g, j.value("repaired", false));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("copula params: ") + e.what());
  }
}

}  // namespace oucopula
