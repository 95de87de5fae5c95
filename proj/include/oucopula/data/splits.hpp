#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "oucopula/errors.hpp"

namespace oucopula::data {

struct SplitSpec {
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
};

/// Patient indices per role for one fold.
struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  SplitSpec spec;
  std::size_t n = 0;
  std::vector<Fold> folds;

  bool operator==(const FoldPlan& o) const {
    if (n != o.n || folds.size() != o.folds.size()) return false;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      if (folds[f].train != o.folds[f].train || folds[f].val != o.folds[f].val || folds[f].test != o.folds[f].test) {
        return false;
      }
    }
    return true;
  }
};

/// Deterministic shuffled partition of patients 0..n-1.
///
/// With folds == 1 a single split is drawn with rounded fraction sizes. With
/// folds > 1 the shuffled indices are cut into `folds` near-equal chunks; fold f
/// takes chunk f (and following chunks) as test, the next chunks as validation and
/// the rest as training, so 5 folds at 0.6/0.2/0.2 rotate a 3:1:1 chunk assignment.
inline FoldPlan plan_splits(std::size_t n, const SplitSpec& spec) {
  const double total = spec.train_fraction + spec.val_fraction + spec.test_fraction;
  if (std::abs(total - 1.0) > 1e-9) throw ShapeError("plan_splits: fractions sum to " + std::to_string(total) + ", not 1");
  if (spec.train_fraction <= 0.0 || spec.val_fraction < 0.0 || spec.test_fraction <= 0.0) {
    throw ShapeError("plan_splits: train and test fractions must be positive, validation non-negative");
  }
  if (spec.folds < 1) throw ShapeError("plan_splits: fold count must be >= 1");
  if (n < std::max<std::size_t>(spec.folds, 3)) {
    throw ShapeError("plan_splits: " + std::to_string(n) + " patients is fewer than required for " +
                     std::to_string(spec.folds) + " folds");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed ^ 0x5eed5a17ULL);
  std::shuffle(order.begin(), order.end(), rng);

  FoldPlan plan;
  plan.spec = spec;
  plan.n = n;
  auto sorted = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };

  if (spec.folds == 1) {
    const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
    if (n_test + n_val >= n) throw ShapeError("plan_splits: no patients left for training");
    Fold f;
    f.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    f.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                 order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
    f.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
    plan.folds.push_back({sorted(f.train), sorted(f.val), sorted(f.test)});
    return plan;
  }

  const double k = static_cast<double>(spec.folds);
  const auto k_test = static_cast<std::size_t>(std::llround(spec.test_fraction * k));
  const auto k_val = static_cast<std::size_t>(std::llround(spec.val_fraction * k));
  if (std::abs(static_cast<double>(k_test) - spec.test_fraction * k) > 1e-9 ||
      std::abs(static_cast<double>(k_val) - spec.val_fraction * k) > 1e-9 || k_test + k_val >= spec.folds) {
    throw ShapeError("plan_splits: fractions are not whole multiples of 1/" + std::to_string(spec.folds));
  }

  std::vector<std::vector<std::size_t>> chunks(spec.folds);
  for (std::size_t c = 0; c < spec.folds; ++c) {
    const std::size_t lo = c * n / spec.folds, hi = (c + 1) * n / spec.folds;
    chunks[c].assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  for (std::size_t f = 0; f < spec.folds; ++f) {
    Fold fold;
    for (std::size_t j = 0; j < spec.folds; ++j) {
      const auto& chunk = chunks[(f + j) % spec.folds];
      auto& role = j < k_test ? fold.test : (j < k_test + k_val ? fold.val : fold.train);
      role.insert(role.end(), chunk.begin(), chunk.end());
    }
    plan.folds.push_back({sorted(fold.train), sorted(fold.val), sorted(fold.test)});
  }
  return plan;
}

}  // namespace oucopula::data
