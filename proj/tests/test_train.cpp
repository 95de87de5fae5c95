#include <gtest/gtest.h>

#include <random>

#include "oucopula/checkpoint.hpp"
#include "oucopula/data/generator.hpp"
#include "oucopula/data/splits.hpp"
#include "oucopula/train.hpp"

using namespace oucopula;

namespace {

const data::DatasetContainer& small_data() {
  static const data::DatasetContainer ds = [] {
    data::GeneratorConfig g;
    g.n_patients = 40;
    g.resolution = 16;
    g.channels = 2;
    g.seed = 17;
    return data::generate(g);
  }();
  return ds;
}

const data::Fold& small_fold() {
  static const data::FoldPlan plan = data::plan_splits(40, data::SplitSpec{.seed = 2});
  return plan.folds[0];
}

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.resolution = 16;
  cfg.in_channels = 2;
  cfg.stage_widths = {8, 16};
  cfg.blocks_per_stage = 1;
  return cfg;
}

TrainConfig small_train(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.warmup_epochs = 3;
  cfg.copula_epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 5;
  return cfg;
}

const RunResult& oucopula_run() {
  static const RunResult r = run_training(small_data(), small_fold(), small_train(TrainMode::oucopula), small_backbone());
  return r;
}

}  // namespace

TEST(Metrics, AggregatesAreSumsOfComponents) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd p(30, 4), y(30, 4);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    p.data()[i] = n(rng);
    y.data()[i] = n(rng);
  }
  const MetricsReport r = compute_metrics(p, y);
  EXPECT_NEAR(r.os_se, (p.col(0) - y.col(0)).squaredNorm() / 30.0, 1e-14);
  EXPECT_EQ(r.os_total, r.os_se + r.os_al);
  EXPECT_EQ(r.od_total, r.od_se + r.od_al);
  EXPECT_EQ(r.ou_se, r.os_se + r.od_se);
  EXPECT_EQ(r.ou_al, r.os_al + r.od_al);
  EXPECT_NEAR(r.ou_total, r.ou_se + r.ou_al, 1e-15);
  EXPECT_EQ(r.to_json().size(), 9u);
  const MetricsReport back = MetricsReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.values(), r.values());
  EXPECT_THROW(r.get("nope"), ShapeError);
  EXPECT_THROW(compute_metrics(p.leftCols(3), y.leftCols(3)), ShapeError);
}

TEST(Metrics, ZeroPredictorScoresMeanSquaredLabels) {
  Eigen::MatrixXd y(3, 4);
  y << 1, 2, 3, 4, -1, 0, 1, 2, 2, 2, 0, -2;
  const MetricsReport r = compute_metrics(Eigen::MatrixXd::Zero(3, 4), y);
  EXPECT_DOUBLE_EQ(r.os_se, 2.0);
  EXPECT_DOUBLE_EQ(r.os_al, 8.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.od_se, 10.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.od_al, 8.0);
  EXPECT_NEAR(r.ou_total, 2.0 + 8.0 / 3.0 + 10.0 / 3.0 + 8.0, 1e-14);
}

TEST(Losses, IndependentCopulaIsScaledSquaredError) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const double s = 0.7;
  const CopulaParams params = make_copula_params(Eigen::VectorXd::Constant(4, s), Eigen::MatrixXd::Identity(4, 4));
  nd::Tensor target(nd::Shape{6, 4});
  for (double& v : target.storage()) v = n(rng);
  nd::Parameter pred("pred", nd::Tensor(nd::Shape{6, 4}));
  for (double& v : pred.value.storage()) v = n(rng);

  nd::GradTape t1;
  const double nll = copula_nll(nd::residual(target, t1.parameter(pred)), params).value()[0];
  t1.backward(copula_nll(nd::residual(target, t1.parameter(pred)), params));
  const nd::Tensor g_nll = pred.grad;
  pred.zero_grad();

  nd::GradTape t2;
  nd::Var sse = nd::summed_squared_error(t2.parameter(pred), target);
  t2.backward(sse);

  nd::GradTape t0(false);
  const double at_zero = copula_nll(t0.constant(nd::Tensor(nd::Shape{1, 4})), params).value()[0];
  EXPECT_NEAR(nll - at_zero, sse.value()[0] / (2.0 * s * s), 1e-12);
  for (std::size_t i = 0; i < g_nll.size(); ++i) EXPECT_NEAR(g_nll[i], pred.grad[i] / (2.0 * s * s), 1e-12);
}

TEST(Standardizer, TrainingLabelsAreZScored) {
  const auto& ds = small_data();
  const auto& fold = small_fold();
  const Standardizer st = Standardizer::fit(ds, fold.train, true);
  const Eigen::MatrixXd y = st.labels(ds, fold.train);
  const double n = static_cast<double>(fold.train.size());
  for (Eigen::Index k = 0; k < 4; ++k) {
    EXPECT_NEAR(y.col(k).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.col(k).array() - y.col(k).mean()).square().sum() / (n - 1.0), 1.0, 1e-12);
    EXPECT_NEAR(st.from_model(static_cast<std::size_t>(k), st.to_model(static_cast<std::size_t>(k), 1.25)), 1.25, 1e-14);
  }
  const Standardizer raw = Standardizer::fit(ds, fold.train, false);
  EXPECT_EQ(raw.to_model(2, 3.5), 3.5);

  const nd::Tensor img = st.images(ds, fold.train, EyeChannel::os);
  EXPECT_EQ(img.shape(), (nd::Shape{fold.train.size(), 2, 16, 16}));
}

TEST(Standardizer, ConstantLabelIsRejected) {
  data::DatasetContainer ds = small_data();
  for (auto& r : ds.records) r.labels[1] = 2.0;
  EXPECT_THROW(Standardizer::fit(ds, small_fold().train, true), NumericalError);
}

TEST(Training, SnapshotIsTheBestValidationEpoch) {
  const RunResult& r = oucopula_run();
  ASSERT_TRUE(r.copula.has_value());
  ASSERT_TRUE(r.copula_best_epoch.has_value());
  ASSERT_EQ(r.log.size(), 1 + 3 + 1 + 2u);
  double copula_best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.log) {
    if (e.phase == "copula") copula_best = std::min(copula_best, e.val_total);
    EXPECT_EQ(e.train_loss.has_value(), e.epoch > 0);
  }
  EXPECT_EQ(r.val_report.ou_total, copula_best);
  for (const auto& e : r.log) {
    if (e.phase == "copula") EXPECT_LE(r.val_report.ou_total, e.val_total);
  }
  EXPECT_EQ(r.log[4].val_total, r.log[r.warmup_best_epoch].val_total);
}

TEST(Training, IsDeterministic) {
  const RunResult again = run_training(small_data(), small_fold(), small_train(TrainMode::oucopula), small_backbone());
  const RunResult& r = oucopula_run();
  EXPECT_EQ(again.test_report.values(), r.test_report.values());
  for (std::size_t i = 0; i < r.model.params.size(); ++i) {
    EXPECT_EQ(again.model.params[i].value.storage(), r.model.params[i].value.storage());
  }
}

TEST(Training, ContinuingAdaptersMatchesOucopulaRun) {
  const RunResult warm = run_training(small_data(), small_fold(), small_train(TrainMode::adapters), small_backbone());
  EXPECT_FALSE(warm.copula.has_value());
  const RunResult cont = continue_with_copula(warm, small_data(), small_fold(), small_train(TrainMode::oucopula));
  EXPECT_EQ(cont.test_report.values(), oucopula_run().test_report.values());
}

TEST(Training, BaselineHasNoAdaptersAndRejectsCopulaPhase) {
  const RunResult r =
      run_training(small_data(), small_fold(), small_train(TrainMode::baseline_single_channel), small_backbone());
  EXPECT_FALSE(r.model.config.use_adapters);
  EXPECT_EQ(r.model.census().adapters, 0u);
  EXPECT_TRUE(std::isfinite(r.test_report.ou_total));
  const Standardizer st = Standardizer::fit(small_data(), small_fold().train, true);
  EXPECT_THROW(copula_train(r.model, *oucopula_run().copula, small_data(), small_fold(), st,
                            small_train(TrainMode::baseline_single_channel)),
               ShapeError);
  EXPECT_THROW(copula_train(r.model, *oucopula_run().copula, small_data(), small_fold(), st,
                            small_train(TrainMode::oucopula)),
               ShapeError);
}

TEST(Training, RejectsBadConfig) {
  TrainConfig cfg = small_train(TrainMode::adapters);
  cfg.batch_size = 1;
  EXPECT_THROW(run_training(small_data(), small_fold(), cfg, small_backbone()), ShapeError);
  cfg = small_train(TrainMode::adapters);
  cfg.warmup_lr = 0.0;
  EXPECT_THROW(run_training(small_data(), small_fold(), cfg, small_backbone()), ShapeError);
  EXPECT_THROW(parse_train_mode("joint"), ShapeError);
  EXPECT_EQ(parse_train_mode("baseline"), TrainMode::baseline_single_channel);
}

TEST(Training, SeedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, seed_tag::model), derive_seed(1, seed_tag::warmup));
  EXPECT_NE(derive_seed(1, seed_tag::model), derive_seed(2, seed_tag::model));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const RunResult& r = oucopula_run();
  nlohmann::ordered_json cfg;
  cfg["model"] = to_json(r.model_config);
  cfg["note"] = "x";
  const Checkpoint ck{cfg, r.model, r.standardizer, r.copula};
  const auto bytes = encode_checkpoint(ck);
  io::ByteReader reader(bytes);
  Checkpoint back = decode_checkpoint(reader);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  ASSERT_TRUE(back.copula.has_value());
  EXPECT_EQ(back.copula->covariance, r.copula->covariance);
  EXPECT_EQ(back.standardizer.label_sd, r.standardizer.label_sd);
  const auto& ds = small_data();
  const auto& test = small_fold().test;
  BiChannelModel original = r.model;
  EXPECT_EQ(evaluate(back.model, ds, test, back.standardizer).values(), evaluate(original, ds, test, r.standardizer).values());
}

TEST(Checkpoint, RejectsCorruptBytes) {
  const RunResult& r = oucopula_run();
  nlohmann::ordered_json cfg;
  cfg["model"] = to_json(r.model_config);
  auto bytes = encode_checkpoint(Checkpoint{cfg, r.model, r.standardizer, r.copula});
  auto bad = bytes;
  bad[0] = 'X';
  io::ByteReader r1(bad);
  EXPECT_THROW(decode_checkpoint(r1), FormatError);
  io::ByteReader r2(std::vector<unsigned char>(bytes.begin(), bytes.end() - 3));
  EXPECT_THROW(decode_checkpoint(r2), FormatError);
}
