#pragma once

#include <Eigen/Core>
#include <array>
#include <string>

#include "oucopula/backbone.hpp"
#include "oucopula/errors.hpp"
#include "json.hpp"

namespace oucopula {

/// The nine-way MSE breakdown: per eye and label, per-eye totals, and both eyes
/// together. Aggregates are sums of their two components.
struct MetricsReport {
  double os_se = 0.0, os_al = 0.0, od_se = 0.0, od_al = 0.0;
  double os_total = 0.0, od_total = 0.0;
  double ou_se = 0.0, ou_al = 0.0, ou_total = 0.0;

  static constexpr std::array<const char*, 9> kKeys{"os_se",    "os_al", "od_se", "od_al",   "os_total",
                                                    "od_total", "ou_se", "ou_al", "ou_total"};

  /// Builds the report from per-position MSEs in label order (OS-SE, OS-AL, OD-SE, OD-AL).
  static MetricsReport from_components(const std::array<double, kLabelCount>& mse) {
    MetricsReport r;
    r.os_se = mse[0];
    r.os_al = mse[1];
    r.od_se = mse[2];
    r.od_al = mse[3];
    r.os_total = r.os_se + r.os_al;
    r.od_total = r.od_se + r.od_al;
    r.ou_se = r.os_se + r.od_se;
    r.ou_al = r.os_al + r.od_al;
    r.ou_total = r.os_total + r.od_total;
    return r;
  }

  std::array<double, 9> values() const { return {os_se, os_al, od_se, od_al, os_total, od_total, ou_se, ou_al, ou_total}; }

  double get(std::string_view key) const {
    const auto v = values();
    for (std::size_t i = 0; i < kKeys.size(); ++i) {
      if (key == kKeys[i]) return v[i];
    }
    throw ShapeError("MetricsReport: unknown key '" + std::string(key) + "'");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    const auto v = values();
    for (std::size_t i = 0; i < kKeys.size(); ++i) j[kKeys[i]] = v[i];
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.size() != kKeys.size()) throw FormatError("report must be an object with 9 keys");
    std::array<double, kLabelCount> mse{};
    for (std::size_t i = 0; i < kLabelCount; ++i) mse[i] = j.at(kKeys[i]).get<double>();
    MetricsReport r = from_components(mse);
    r.os_total = j.at("os_total").get<double>();
    r.od_total = j.at("od_total").get<double>();
    r.ou_se = j.at("ou_se").get<double>();
    r.ou_al = j.at("ou_al").get<double>();
    r.ou_total = j.at("ou_total").get<double>();
    return r;
  }
};

/// Per-label mean squared errors of predictions against labels (both n x 4).
inline MetricsReport compute_metrics(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& labels) {
  if (predictions.rows() != labels.rows() || predictions.cols() != static_cast<Eigen::Index>(kLabelCount) ||
      labels.cols() != static_cast<Eigen::Index>(kLabelCount)) {
    throw ShapeError("compute_metrics: predictions and labels must both be n x 4");
  }
  if (labels.rows() == 0) throw ShapeError("compute_metrics: empty split");
  std::array<double, kLabelCount> mse{};
  for (std::size_t k = 0; k < kLabelCount; ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    mse[k] = (predictions.col(c) - labels.col(c)).squaredNorm() / static_cast<double>(labels.rows());
  }
  return MetricsReport::from_components(mse);
}

}  // namespace oucopula
