#pragma once

#include <random>
#include <string>
#include <vector>

#include "oucopula/backbone.hpp"
#include "oucopula/copula.hpp"
#include "oucopula/gradcheck.hpp"
#include "oucopula/nd/ops.hpp"

namespace oucopula {

struct SuiteResult {
  std::string name;
  GradCheckReport report;
  double threshold = 1e-6;

  bool passed() const { return report.passed(threshold); }
};

namespace detail {

inline nd::Tensor random_tensor(nd::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  nd::Tensor t(shape);
  for (double& v : t.storage()) v = n(rng);
  return t;
}

/// Fixed random weights for a scalar readout; keeps gradients of every output coordinate distinct.
inline nd::Var readout(nd::GradTape& tape, nd::Var y, const nd::Tensor& w) {
  return nd::sum(nd::mul(y, tape.constant(w.reshaped(y.shape()))));
}

}  // namespace detail

/// Central-difference checks of every differentiable op (and the copula NLL) on
/// small random inputs.
inline std::vector<SuiteResult> op_gradient_suites(std::uint64_t seed = 0) {
  using namespace nd;
  std::mt19937_64 rng(seed);
  std::vector<SuiteResult> out;
  GradCheckOptions opt;
  opt.seed = seed;
  auto rt = [&](Shape s, double scale = 1.0) { return oucopula::detail::random_tensor(s, rng, scale); };
  auto run = [&](const std::string& name, std::vector<Parameter>& ps, const std::function<Var(GradTape&)>& f) {
    std::vector<Parameter*> ptrs;
    for (auto& p : ps) ptrs.push_back(&p);
    out.push_back({name, check_gradients(f, ptrs, opt)});
  };

  {
    std::vector<Parameter> ps{{"x", rt(Shape{2, 3, 6, 5})}, {"w", rt(Shape{4, 3, 3, 3})}, {"b", rt(Shape{4})}};
    const Tensor r = rt(Shape{2 * 4 * 3 * 3});
    run("conv2d", ps, [&](GradTape& t) {
      return oucopula::detail::readout(t, conv2d(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2]), 2, 1), r);
    });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{3, 2, 5, 5})}, {"w", rt(Shape{3, 2, 1, 1})}};
    const Tensor r = rt(Shape{3 * 3 * 5 * 5});
    run("conv2d_1x1_nobias", ps, [&](GradTape& t) {
      return oucopula::detail::readout(t, conv2d(t.parameter(ps[0]), t.parameter(ps[1]), std::nullopt, 1, 0), r);
    });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{4, 3, 3, 2})}, {"gamma", rt(Shape{3})}, {"beta", rt(Shape{3})}};
    const Tensor r = rt(Shape{4 * 3 * 3 * 2});
    run("batchnorm2d_train", ps, [&](GradTape& t) {
      BatchNormState st(3);
      return oucopula::detail::readout(t, batchnorm2d(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2]), st, Mode::train), r);
    });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{2, 3, 3, 2})}, {"gamma", rt(Shape{3})}, {"beta", rt(Shape{3})}};
    BatchNormState st(3);
    st.running_mean = rt(Shape{3});
    for (std::size_t c = 0; c < 3; ++c) st.running_var[c] = 0.5 + 0.25 * static_cast<double>(c);
    const Tensor r = rt(Shape{2 * 3 * 3 * 2});
    run("batchnorm2d_eval", ps, [&](GradTape& t) {
      return oucopula::detail::readout(t, batchnorm2d(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2]), st, Mode::eval), r);
    });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{2, 2, 4, 4})}};
    const Tensor r = rt(Shape{2 * 2 * 4 * 4});
    run("relu", ps, [&](GradTape& t) { return oucopula::detail::readout(t, relu(t.parameter(ps[0])), r); });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{2, 3, 4, 5})}};
    const Tensor r = rt(Shape{2 * 3});
    run("global_avg_pool", ps, [&](GradTape& t) { return oucopula::detail::readout(t, global_avg_pool(t.parameter(ps[0])), r); });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{2, 2, 5, 5})}};
    const Tensor r = rt(Shape{2 * 2 * 3 * 3});
    run("max_pool2d", ps, [&](GradTape& t) { return oucopula::detail::readout(t, max_pool2d(t.parameter(ps[0]), 3, 2, 1), r); });
  }
  {
    std::vector<Parameter> ps{{"x", rt(Shape{3, 5})}, {"w", rt(Shape{2, 5})}, {"b", rt(Shape{2})}};
    const Tensor r = rt(Shape{3 * 2});
    run("linear", ps, [&](GradTape& t) {
      return oucopula::detail::readout(t, linear(t.parameter(ps[0]), t.parameter(ps[1]), t.parameter(ps[2])), r);
    });
  }
  {
    std::vector<Parameter> ps{{"a", rt(Shape{3, 4})}, {"b", rt(Shape{3, 4})}};
    const Tensor r = rt(Shape{12});
    run("add", ps, [&](GradTape& t) { return oucopula::detail::readout(t, add(t.parameter(ps[0]), t.parameter(ps[1])), r); });
    run("mul", ps, [&](GradTape& t) { return oucopula::detail::readout(t, mul(t.parameter(ps[0]), t.parameter(ps[1])), r); });
    run("scale", ps, [&](GradTape& t) { return oucopula::detail::readout(t, scale(t.parameter(ps[0]), -1.7), r); });
    run("sum", ps, [&](GradTape& t) { return scale(sum(mul(t.parameter(ps[0]), t.parameter(ps[1]))), 0.3); });
  }
  {
    std::vector<Parameter> ps{{"a", rt(Shape{3, 2})}, {"b", rt(Shape{3, 3})}};
    const Tensor r = rt(Shape{15});
    run("concat_cols", ps, [&](GradTape& t) { return oucopula::detail::readout(t, concat_cols(t.parameter(ps[0]), t.parameter(ps[1])), r); });
  }
  {
    std::vector<Parameter> ps{{"a", rt(Shape{2, 2, 2, 2})}, {"b", rt(Shape{3, 2, 2, 2})}};
    const Tensor r = rt(Shape{5 * 8}), r2 = rt(Shape{2 * 8});
    run("concat_batch", ps, [&](GradTape& t) {
      return oucopula::detail::readout(t, concat_batch(t.parameter(ps[0]), t.parameter(ps[1])), r);
    });
    run("slice_batch", ps, [&](GradTape& t) { return oucopula::detail::readout(t, slice_batch(t.parameter(ps[1]), 1, 3), r2); });
  }
  {
    std::vector<Parameter> ps{{"p", rt(Shape{5, 4})}};
    const Tensor y = rt(Shape{5, 4});
    const Tensor r = rt(Shape{20});
    run("residual", ps, [&](GradTape& t) { return oucopula::detail::readout(t, residual(y, t.parameter(ps[0])), r); });
    run("summed_squared_error", ps, [&](GradTape& t) { return summed_squared_error(t.parameter(ps[0]), y); });
  }
  {
    std::vector<Parameter> ps{{"e", rt(Shape{6, 4})}};
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(4, 4);
    Eigen::MatrixXd cov = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(4, 4);
    Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
    Eigen::MatrixXd gamma = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();
    const CopulaParams params = make_copula_params(sd, gamma);
    run("copula_nll", ps, [&](GradTape& t) { return copula_nll(t.parameter(ps[0]), params); });
  }
  return out;
}

/// Small model used by the full-model gradient checks: every path (stem, both
/// stages, both adapters, head) is active, with adapters perturbed away from zero.
inline BiChannelModel gradcheck_model(std::uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.resolution = 16;
  cfg.in_channels = 2;
  cfg.stage_widths = {6, 8};
  cfg.blocks_per_stage = 1;
  BiChannelModel m = build_model(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> n(0.0, 0.1);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (m.is_adapter_parameter(i)) {
      for (double& v : m.params[i].value.storage()) v += n(rng);
    }
  }
  return m;
}

/// Gradient checks of the full paired-eye training losses (warm-up squared error
/// and copula NLL) over `coordinates` sampled parameter entries each.
inline std::vector<SuiteResult> model_gradient_suites(std::uint64_t seed = 0, std::size_t coordinates = 300) {
  using namespace nd;
  std::mt19937_64 rng(seed + 1);
  BiChannelModel model = gradcheck_model(seed);
  const std::size_t batch = 4, res = model.config.resolution, c = model.config.in_channels;
  const Tensor os = oucopula::detail::random_tensor(Shape{batch, c, res, res}, rng);
  const Tensor od = oucopula::detail::random_tensor(Shape{batch, c, res, res}, rng);
  const Tensor y = oucopula::detail::random_tensor(Shape{batch, kLabelCount}, rng);
  Eigen::VectorXd sigma(4);
  sigma << 0.8, 1.1, 0.9, 1.2;
  Eigen::MatrixXd gamma(4, 4);
  gamma << 1.0, -0.3, 0.7, -0.2, -0.3, 1.0, -0.2, 0.6, 0.7, -0.2, 1.0, -0.3, -0.2, 0.6, -0.3, 1.0;
  const CopulaParams params = make_copula_params(sigma, gamma);
  std::vector<Parameter*> ptrs;
  for (auto& p : model.params) ptrs.push_back(&p);
  GradCheckOptions opt;
  opt.seed = seed;
  opt.max_coordinates = coordinates;
  std::vector<SuiteResult> out;
  out.push_back({"model_warmup_mse", check_gradients(
                                         [&](GradTape& t) {
                                           return summed_squared_error(forward_pair(t, model, os, od, Mode::train), y);
                                         },
                                         ptrs, opt)});
  out.push_back({"model_copula_nll", check_gradients(
                                         [&](GradTape& t) {
                                           return copula_nll(residual(y, forward_pair(t, model, os, od, Mode::train)), params);
                                         },
                                         ptrs, opt)});
  return out;
}

}  // namespace oucopula
