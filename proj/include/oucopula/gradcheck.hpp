#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "oucopula/nd/tape.hpp"

namespace oucopula {

struct GradCheckOptions {
  // Fourth-order central stencil (f(x-2h), f(x-h), f(x+h), f(x+2h)).
  double step = 2e-4;
  std::size_t max_coordinates = 0;  // 0 = every coordinate
  std::uint64_t seed = 0;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-4;
  // Skip coordinates whose stencil evaluations change the ReLU/max-pool pattern.
  bool skip_kinks = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;

  bool passed(double threshold) const { return checked > 0 && max_relative_error < threshold; }
};

/// Compares reverse-mode gradients of a scalar loss against central differences.
///
/// `loss` must build a scalar on the supplied tape, reading each checked tensor via
/// tape.parameter(). It is called once with a recording tape for the analytic
/// gradient and twice per sampled coordinate for the numeric one.
inline GradCheckReport check_gradients(const std::function<nd::Var(nd::GradTape&)>& loss,
                                       const std::vector<nd::Parameter*>& params, const GradCheckOptions& opt = {}) {
  for (nd::Parameter* p : params) p->zero_grad();
  std::uint64_t base_pattern;
  {
    nd::GradTape tape;
    tape.track_kinks(true);
    nd::Var out = loss(tape);
    base_pattern = tape.kink_fingerprint();
    tape.backward(out);
  }
  std::vector<nd::Tensor> analytic;
  for (nd::Parameter* p : params) analytic.push_back(p->grad);

  struct Coord {
    std::size_t param, index;
  };
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k]->value.size(); ++i) coords.push_back({k, i});
  }
  std::mt19937_64 rng(opt.seed);
  std::shuffle(coords.begin(), coords.end(), rng);

  auto evaluate = [&](std::uint64_t& pattern) {
    nd::GradTape tape(/*recording=*/false);
    tape.track_kinks(true);
    const double v = loss(tape).value()[0];
    pattern = tape.kink_fingerprint();
    return v;
  };

  GradCheckReport report;
  const std::size_t target = opt.max_coordinates == 0 ? coords.size() : std::min(opt.max_coordinates, coords.size());
  for (const Coord& c : coords) {
    if (report.checked >= target) break;
    double& x = params[c.param]->value[c.index];
    const double saved = x;
    bool kink = false;
    auto at = [&](double offset) {
      std::uint64_t pattern = 0;
      x = saved + offset;
      const double v = evaluate(pattern);
      kink = kink || pattern != base_pattern;
      return v;
    };
    const double h = opt.step;
    const double f_p1 = at(h), f_m1 = at(-h), f_p2 = at(2 * h), f_m2 = at(-2 * h);
    x = saved;
    if (opt.skip_kinks && kink) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h);
    const double a = analytic[c.param][c.index];
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > report.max_relative_error || report.worst.empty()) {
      if (rel >= report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst = params[c.param]->path + "[" + std::to_string(c.index) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  for (nd::Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace oucopula
