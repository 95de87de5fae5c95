#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "oucopula/copula.hpp"
#include "oucopula/gradcheck.hpp"

using namespace oucopula;

namespace {

// Determinant by cofactor expansion along the first row.
double cofactor_det(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  if (n == 1) return m(0, 0);
  double det = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::MatrixXd minor(n - 1, n - 1);
    for (Eigen::Index r = 1; r < n; ++r) {
      for (Eigen::Index c = 0, cc = 0; c < n; ++c) {
        if (c != j) minor(r - 1, cc++) = m(r, c);
      }
    }
    det += ((j % 2 == 0) ? 1.0 : -1.0) * m(0, j) * cofactor_det(minor);
  }
  return det;
}

// Inverse as adjugate / determinant.
Eigen::MatrixXd cofactor_inverse(const Eigen::MatrixXd& m) {
  const Eigen::Index n = m.rows();
  const double det = cofactor_det(m);
  Eigen::MatrixXd inv(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      Eigen::MatrixXd minor(n - 1, n - 1);
      for (Eigen::Index r = 0, rr = 0; r < n; ++r) {
        if (r == i) continue;
        for (Eigen::Index c = 0, cc = 0; c < n; ++c) {
          if (c != j) minor(rr, cc++) = m(r, c);
        }
        ++rr;
      }
      inv(j, i) = (((i + j) % 2 == 0) ? 1.0 : -1.0) * cofactor_det(minor) / det;
    }
  }
  return inv;
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, Eigen::Index p) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd a(p, p);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  return a * a.transpose() + 0.3 * Eigen::MatrixXd::Identity(p, p);
}

CopulaParams params_from_cov(const Eigen::MatrixXd& cov) {
  const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
  Eigen::MatrixXd g = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();
  g = 0.5 * (g + g.transpose());
  g.diagonal().setOnes();
  return make_copula_params(sd, g);
}

double nll_of(const Eigen::RowVectorXd& e, const CopulaParams& p) { return copula_nll_per_sample(e, p)(0); }

}  // namespace

TEST(CopulaNll, ZeroResidualIdentityCovariance) {
  const CopulaParams p = make_copula_params(Eigen::VectorXd::Ones(4), Eigen::MatrixXd::Identity(4, 4));
  EXPECT_NEAR(nll_of(Eigen::RowVectorXd::Zero(4), p), 3.67575413, 1e-8);
}

TEST(CopulaNll, BivariateClosedForm) {
  Eigen::MatrixXd g(2, 2);
  g << 1.0, 0.5, 0.5, 1.0;
  const CopulaParams p = make_copula_params(Eigen::VectorXd::Ones(2), g);
  EXPECT_NEAR(nll_of(Eigen::RowVectorXd::Zero(2), p), 1.69403608, 1e-7);
  EXPECT_NEAR(nll_of(Eigen::RowVectorXd::Zero(2), p), std::log(2.0 * std::numbers::pi) + 0.5 * std::log(0.75), 1e-14);
}

TEST(CopulaNll, MatchesExplicitInverseAndDeterminant) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::MatrixXd cov = random_spd(rng, 4);
    const CopulaParams p = params_from_cov(cov);
    Eigen::RowVectorXd e(4);
    for (int k = 0; k < 4; ++k) e(k) = n(rng);
    const Eigen::MatrixXd inv = cofactor_inverse(p.covariance);
    const double quad = (e * inv * e.transpose())(0, 0);
    const double ref = 0.5 * (4.0 * std::log(2.0 * std::numbers::pi) + std::log(cofactor_det(p.covariance)) + quad);
    EXPECT_NEAR(nll_of(e, p), ref, 1e-10 * std::abs(ref)) << "trial " << trial;
  }
}

TEST(CopulaNll, BatchIsMeanOfSamplesAndGradientIsPrecisionTimesResidual) {
  std::mt19937_64 rng(4);
  const CopulaParams p = params_from_cov(random_spd(rng, 4));
  nd::Parameter e("e", nd::Tensor(nd::Shape{3, 4}));
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : e.value.storage()) v = n(rng);
  nd::GradTape tape;
  nd::Var loss = copula_nll(tape.parameter(e), p);
  const Eigen::MatrixXd em = nd::ConstMatrixMap(e.value.data(), 3, 4);
  EXPECT_NEAR(loss.value()[0], copula_nll_per_sample(em, p).mean(), 1e-14);
  tape.backward(loss);
  const Eigen::MatrixXd expected = (cofactor_inverse(p.covariance) * em.transpose()).transpose() / 3.0;
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_NEAR(e.grad.at(i, k), expected(i, k), 1e-12);
}

TEST(CopulaNll, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const CopulaParams p = params_from_cov(random_spd(rng, 4));
  nd::Parameter e("e", nd::Tensor(nd::Shape{5, 4}));
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : e.value.storage()) v = n(rng);
  const auto rep = check_gradients([&](nd::GradTape& t) { return copula_nll(t.parameter(e), p); }, {&e});
  EXPECT_LT(rep.max_relative_error, 1e-8) << rep.worst;
}

TEST(CopulaNll, IndependenceReducesToUnivariateSum) {
  Eigen::VectorXd sd(4);
  sd << 0.5, 1.5, 2.0, 0.8;
  const CopulaParams p = make_copula_params(sd, Eigen::MatrixXd::Identity(4, 4));
  Eigen::RowVectorXd e(4);
  e << 0.3, -1.2, 2.5, 0.1;
  double ref = 0.0;
  for (int k = 0; k < 4; ++k) ref += 0.5 * std::log(2.0 * std::numbers::pi) + std::log(sd(k)) + 0.5 * e(k) * e(k) / (sd(k) * sd(k));
  EXPECT_NEAR(nll_of(e, p), ref, 1e-12);
}

TEST(CopulaNll, PermutationEquivariance) {
  std::mt19937_64 rng(2);
  const CopulaParams p = params_from_cov(random_spd(rng, 4));
  Eigen::RowVectorXd e(4);
  e << 0.4, -0.9, 1.3, 0.2;
  Eigen::PermutationMatrix<4> perm;
  perm.indices() << 2, 0, 3, 1;
  const CopulaParams q = make_copula_params(perm * p.sigma, perm * p.gamma * perm.transpose());
  EXPECT_NEAR(nll_of(e, p), nll_of((perm * e.transpose()).transpose(), q), 1e-12);
}

TEST(CopulaNll, RejectsWidthMismatch) {
  const CopulaParams p = make_copula_params(Eigen::VectorXd::Ones(4), Eigen::MatrixXd::Identity(4, 4));
  EXPECT_ANY_THROW(copula_nll_per_sample(Eigen::MatrixXd::Zero(2, 3), p));
  CopulaParams unfactored;
  EXPECT_THROW(copula_nll_per_sample(Eigen::MatrixXd::Zero(1, 4), unfactored), NumericalError);
}

TEST(CopulaDensity, EqualsExpOfNegativeNll) {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const CopulaParams p = params_from_cov(random_spd(rng, 4));
    std::vector<double> t(4);
    for (double& v : t) v = n(rng);
    const Eigen::RowVectorXd e = Eigen::Map<Eigen::RowVectorXd>(t.data(), 4);
    const double dens = copula_density(t, p), ref = std::exp(-nll_of(e, p));
    ASSERT_NEAR(dens, ref, 1e-10 * ref) << "trial " << trial;
  }
}

TEST(CopulaDensity, IndependenceIsProductOfMarginals) {
  Eigen::VectorXd sd(2);
  sd << 0.7, 1.9;
  const CopulaParams p = make_copula_params(sd, Eigen::MatrixXd::Identity(2, 2));
  const std::vector<double> t{0.4, -1.1};
  const double ref = standard_normal_pdf(t[0] / sd(0)) / sd(0) * standard_normal_pdf(t[1] / sd(1)) / sd(1);
  EXPECT_NEAR(copula_density(t, p), ref, 1e-15);
}

TEST(CopulaDensity, IntegratesToOne) {
  Eigen::MatrixXd g(2, 2);
  g << 1.0, 0.8, 0.8, 1.0;
  const CopulaParams p = make_copula_params(Eigen::VectorXd::Ones(2), g);
  const int m = 400;
  const double lo = -8.0, h = 16.0 / m;
  double mass = 0.0;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      const std::vector<double> t{lo + (i + 0.5) * h, lo + (j + 0.5) * h};
      mass += copula_density(t, p) * h * h;
    }
  }
  EXPECT_NEAR(mass, 1.0, 1e-4);
}

TEST(CopulaDensity, RejectsOtherMarginals) {
  const CopulaParams p = make_copula_params(Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2));
  const std::vector<double> t{0.0, 0.0};
  EXPECT_THROW(copula_density(t, p, MarginalFamily::student_t), Unsupported);
}

TEST(Quantile, KnownValuesAndAccuracy) {
  EXPECT_NEAR(standard_normal_quantile(0.5), 0.0, 1e-15);
  EXPECT_NEAR(standard_normal_quantile(0.975), 1.959964, 1e-6);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng);
    EXPECT_NEAR(standard_normal_quantile(x), -standard_normal_quantile(1.0 - x), 1e-9 * std::max(1.0, std::abs(standard_normal_quantile(x))));
    EXPECT_LT(std::abs(standard_normal_cdf(standard_normal_quantile(x)) - x), 1e-9);
  }
}

TEST(Quantile, AgreesWithBisectionOnErfc) {
  for (double target : {1e-6, 0.01, 0.1, 0.3, 0.7, 0.95, 0.999}) {
    double a = -10.0, b = 10.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (a + b);
      (0.5 * std::erfc(-mid / std::sqrt(2.0)) < target ? a : b) = mid;
    }
    EXPECT_NEAR(standard_normal_quantile(target), 0.5 * (a + b), 1e-9) << target;
  }
  EXPECT_THROW(standard_normal_quantile(0.0), ShapeError);
  EXPECT_THROW(standard_normal_quantile(1.0), ShapeError);
}

TEST(Estimate, PerfectlyProportionalColumns) {
  ResidualMatrix r;
  r.values.resize(3, 2);
  r.values << 1, 2, -1, -2, 0, 0;
  const CopulaParams p = estimate_params(r);
  EXPECT_TRUE(p.repaired);
  EXPECT_NEAR(p.gamma(0, 1), 1.0, 1e-7);
  EXPECT_LT(p.gamma(0, 1), 1.0);
}

TEST(Estimate, IndependentColumnsMonteCarlo) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 1.0);
  ResidualMatrix r;
  r.values.resize(5000, 4);
  for (Eigen::Index i = 0; i < r.values.size(); ++i) r.values.data()[i] = n(rng);
  const CopulaParams p = estimate_params(r);
  for (int a = 0; a < 4; ++a) {
    EXPECT_GE(p.sigma(a), 0.95);
    EXPECT_LE(p.sigma(a), 1.05);
    for (int b = 0; b < 4; ++b) {
      if (a != b) EXPECT_LT(std::abs(p.gamma(a, b)), 0.05);
    }
  }
}

TEST(Estimate, RecoversKnownCovariance) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 1.0);
  const CopulaParams truth = params_from_cov(random_spd(rng, 4));
  ResidualMatrix r;
  r.values.resize(5000, 4);
  for (Eigen::Index i = 0; i < 5000; ++i) {
    Eigen::Vector4d z;
    for (int k = 0; k < 4; ++k) z(k) = n(rng);
    r.values.row(i) = (truth.cov_cholesky * z).transpose();
  }
  const CopulaParams est = estimate_params(r);
  EXPECT_LT((est.gamma - truth.gamma).cwiseAbs().maxCoeff(), 0.03);
  EXPECT_LT((est.sigma.array() / truth.sigma.array() - 1.0).abs().maxCoeff(), 0.03);
}

TEST(Estimate, RowOrderInvariantAndSampleSd) {
  ResidualMatrix r;
  r.values.resize(4, 2);
  r.values << 1, 0.5, 2, -1, 4, 2, -3, 0;
  ResidualMatrix s = r;
  s.values.row(0).swap(s.values.row(3));
  const CopulaParams a = estimate_params(r), b = estimate_params(s);
  EXPECT_NEAR(a.sigma(0), b.sigma(0), 1e-14);
  EXPECT_NEAR(a.gamma(0, 1), b.gamma(0, 1), 1e-14);
  // Column 0: mean 1, squared deviations 0 + 1 + 9 + 16 = 26, n - 1 = 3.
  EXPECT_NEAR(a.sigma(0), std::sqrt(26.0 / 3.0), 1e-14);
}

TEST(Estimate, RejectsDegenerateInput) {
  ResidualMatrix r;
  r.values.resize(4, 2);
  r.values << 1, 3, 2, 3, 3, 3, 4, 3;
  r.columns = {"a", "flat"};
  try {
    estimate_params(r);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("flat"), std::string::npos);
  }
  r.values(0, 1) = std::nan("");
  EXPECT_THROW(estimate_params(r), NumericalError);
  ResidualMatrix tiny;
  tiny.values = Eigen::MatrixXd::Ones(2, 2);
  EXPECT_THROW(estimate_params(tiny), ShapeError);
}

TEST(Repair, IdentityAndNearSingularPsdAreUnchanged) {
  const auto id = repair_correlation(Eigen::MatrixXd::Identity(3, 3));
  EXPECT_FALSE(id.repaired);
  EXPECT_EQ(id.matrix, Eigen::MatrixXd::Identity(3, 3));
  Eigen::MatrixXd g(2, 2);
  g << 1.0, 0.999999, 0.999999, 1.0;
  const auto r = repair_correlation(g);
  EXPECT_FALSE(r.repaired);
  EXPECT_EQ(r.matrix, g);
}

TEST(Repair, IndefiniteMatrixIsRepairedAndIdempotent) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Constant(3, 3, -0.9);
  g.diagonal().setOnes();
  const auto r = repair_correlation(g);
  EXPECT_TRUE(r.repaired);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r.matrix);
  EXPECT_GE(eig.eigenvalues().minCoeff(), 1e-8);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.matrix(i, i), 1.0, 1e-15);
  const auto again = repair_correlation(r.matrix);
  EXPECT_FALSE(again.repaired);
  EXPECT_EQ(again.matrix, r.matrix);
  Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(2, 2);
  asym(0, 1) = 0.3;
  EXPECT_THROW(repair_correlation(asym), ShapeError);
}

TEST(Params, CholeskyReproducesCovariance) {
  std::mt19937_64 rng(6);
  const CopulaParams p = params_from_cov(random_spd(rng, 4));
  const Eigen::MatrixXd back = p.cov_cholesky * p.cov_cholesky.transpose();
  EXPECT_LT((back - p.covariance).norm() / p.covariance.norm(), 1e-10);
  EXPECT_THROW(make_copula_params(-Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2)), NumericalError);
}
