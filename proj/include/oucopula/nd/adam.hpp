#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "oucopula/nd/tape.hpp"

namespace oucopula::nd {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter position, so the
/// parameter list passed to step() must keep the same order across calls.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : opt_(options) {}

  const AdamOptions& options() const { return opt_; }
  void set_learning_rate(double lr) { opt_.learning_rate = lr; }
  std::size_t step_count() const { return step_; }

  /// Applies one update from the accumulated gradients, then clears them.
  /// Throws NumericalError naming the first parameter with a non-finite gradient;
  /// in that case no parameter is modified.
  void step(std::span<Parameter> params) {
    for (const Parameter& p : params) {
      if (!p.grad.all_finite()) throw NumericalError("non-finite gradient in parameter '" + p.path + "'");
    }
    if (first_.empty()) {
      for (const Parameter& p : params) {
        first_.emplace_back(p.value.shape());
        second_.emplace_back(p.value.shape());
      }
    }
    if (first_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = params[k];
      if (first_[k].shape() != p.value.shape()) throw ShapeError("Adam: shape of '" + p.path + "' changed");
      double* m = first_[k].data();
      double* v = second_[k].data();
      double* w = p.value.data();
      double* g = p.grad.data();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.eps);
        g[i] = 0.0;
      }
    }
  }

 private:
  AdamOptions opt_;
  std::size_t step_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

}  // namespace oucopula::nd
