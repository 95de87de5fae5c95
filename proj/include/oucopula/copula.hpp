#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "oucopula/backbone.hpp"
#include "oucopula/nd/tape.hpp"

namespace oucopula {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;
inline constexpr double kCorrelationFloor = 1e-8;

/// n x p residuals e = y - g(X); columns default to (OS-SE, OS-AL, OD-SE, OD-AL).
struct ResidualMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> columns;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }

  std::string column_name(std::size_t c) const {
    if (c < columns.size()) return columns[c];
    if (values.cols() == static_cast<Eigen::Index>(kLabelCount)) return std::string(kLabelNames[c]);
    return "column " + std::to_string(c);
  }
};

/// Marginal SDs, correlation matrix and the derived covariance with its Cholesky
/// factor. Immutable once built by make_copula_params().
struct CopulaParams {
  Eigen::VectorXd sigma;
  Eigen::MatrixXd gamma;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd cov_cholesky;    // lower triangular, covariance = L L^T
  Eigen::MatrixXd gamma_cholesky;  // lower triangular, gamma = G G^T
  double log_det_covariance = 0.0;
  double log_det_gamma = 0.0;
  bool repaired = false;
  bool factorized = false;

  std::size_t dim() const { return static_cast<std::size_t>(sigma.size()); }
};

/// Assembles Sigma_ab = sigma_a sigma_b Gamma_ab and factorizes it.
inline CopulaParams make_copula_params(const Eigen::VectorXd& sigma, const Eigen::MatrixXd& gamma, bool repaired = false) {
  const Eigen::Index p = sigma.size();
  if (p < 1 || gamma.rows() != p || gamma.cols() != p) {
    throw ShapeError("copula params: sigma has " + std::to_string(p) + " entries but gamma is " +
                     std::to_string(gamma.rows()) + "x" + std::to_string(gamma.cols()));
  }
  for (Eigen::Index a = 0; a < p; ++a) {
    if (!(sigma(a) > 0.0) || !std::isfinite(sigma(a))) throw NumericalError("copula params: sigma must be positive and finite");
  }
  if (!gamma.allFinite()) throw NumericalError("copula params: gamma has non-finite entries");

  CopulaParams cp;
  cp.sigma = sigma;
  cp.gamma = gamma;
  cp.repaired = repaired;
  cp.covariance = sigma.asDiagonal() * gamma * sigma.asDiagonal();

  Eigen::LLT<Eigen::MatrixXd> llt(cp.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("copula params: covariance is not positive definite");
  cp.cov_cholesky = llt.matrixL();
  Eigen::LLT<Eigen::MatrixXd> llt_gamma(gamma);
  if (llt_gamma.info() != Eigen::Success) throw NumericalError("copula params: correlation matrix is not positive definite");
  cp.gamma_cholesky = llt_gamma.matrixL();

  cp.log_det_covariance = 2.0 * cp.cov_cholesky.diagonal().array().log().sum();
  cp.log_det_gamma = 2.0 * cp.gamma_cholesky.diagonal().array().log().sum();
  cp.factorized = true;
  return cp;
}

inline bool is_symmetric(const Eigen::MatrixXd& m, double tol = 1e-12) {
  if (m.rows() != m.cols()) return false;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < m.cols(); ++j) {
      if (std::abs(m(i, j) - m(j, i)) > tol * std::max(1.0, std::abs(m(i, j)))) return false;
    }
  }
  return true;
}

struct RepairResult {
  Eigen::MatrixXd matrix;
  bool repaired = false;
};

/// Eigenvalue clipping + unit-diagonal rescaling. Matrices whose smallest eigenvalue
/// is already >= 1e-8 come back unchanged. The clip level is raised until the
/// rescaled result itself clears the floor, which makes the repair idempotent.
inline RepairResult repair_correlation(const Eigen::MatrixXd& gamma) {
  if (!is_symmetric(gamma)) throw ShapeError("repair_correlation: matrix is not symmetric");
  for (Eigen::Index i = 0; i < gamma.rows(); ++i) {
    if (std::abs(gamma(i, i) - 1.0) > 1e-12) throw ShapeError("repair_correlation: diagonal must be 1");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gamma);
  if (eig.eigenvalues().minCoeff() >= kCorrelationFloor) return {gamma, false};

  const Eigen::MatrixXd& vecs = eig.eigenvectors();
  double clip = kCorrelationFloor;
  Eigen::MatrixXd out;
  for (int iter = 0; iter < 64; ++iter) {
    const Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(clip);
    Eigen::MatrixXd a = vecs * vals.asDiagonal() * vecs.transpose();
    const Eigen::VectorXd inv_sd = a.diagonal().cwiseSqrt().cwiseInverse();
    out = inv_sd.asDiagonal() * a * inv_sd.asDiagonal();
    out = 0.5 * (out + out.transpose());
    out.diagonal().setOnes();
    const double low = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(out, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    if (low >= kCorrelationFloor) break;
    clip *= 1.01 * kCorrelationFloor / std::max(low, 1e-3 * kCorrelationFloor);
  }
  return {out, true};
}

/// Column sample SDs (n - 1 denominator) and sample Pearson correlation, repaired
/// if indefinite.
inline CopulaParams estimate_params(const ResidualMatrix& residuals) {
  const Eigen::MatrixXd& e = residuals.values;
  const Eigen::Index n = e.rows(), p = e.cols();
  if (n < 3) throw ShapeError("estimate_params: need at least 3 residual rows, got " + std::to_string(n));
  if (p < 1) throw ShapeError("estimate_params: no residual columns");
  for (Eigen::Index c = 0; c < p; ++c) {
    for (Eigen::Index r = 0; r < n; ++r) {
      if (!std::isfinite(e(r, c))) {
        throw NumericalError("estimate_params: non-finite residual in column '" +
                             residuals.column_name(static_cast<std::size_t>(c)) + "' row " + std::to_string(r));
      }
    }
  }
  const Eigen::RowVectorXd mean = e.colwise().mean();
  const Eigen::MatrixXd centered = e.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::VectorXd sd(p);
  for (Eigen::Index c = 0; c < p; ++c) {
    sd(c) = std::sqrt(cov(c, c));
    const double scale = std::max(1.0, e.col(c).cwiseAbs().maxCoeff());
    if (!(sd(c) > 1e-14 * scale)) {
      throw NumericalError("estimate_params: residual column '" + residuals.column_name(static_cast<std::size_t>(c)) +
                           "' has zero variance");
    }
  }
  Eigen::MatrixXd gamma(p, p);
  for (Eigen::Index a = 0; a < p; ++a) {
    gamma(a, a) = 1.0;
    for (Eigen::Index b = a + 1; b < p; ++b) {
      const double r = std::clamp(cov(a, b) / (sd(a) * sd(b)), -1.0, 1.0);
      gamma(a, b) = r;
      gamma(b, a) = r;
    }
  }
  RepairResult fixed = repair_correlation(gamma);
  return make_copula_params(sd, fixed.matrix, fixed.repaired);
}

namespace detail {

inline void require_factorized(const CopulaParams& params, Eigen::Index width, const char* op) {
  if (!params.factorized) throw NumericalError(std::string(op) + ": copula params are not factorized");
  if (width != static_cast<Eigen::Index>(params.dim())) {
    throw ShapeError(std::string(op) + ": residual width " + std::to_string(width) + " does not match p = " +
                     std::to_string(params.dim()));
  }
}

}  // namespace detail

/// Per-sample negative log-density -log N(e_i; 0, Sigma) of each row of `e`.
inline Eigen::VectorXd copula_nll_per_sample(const Eigen::MatrixXd& e, const CopulaParams& params) {
  detail::require_factorized(params, e.cols(), "copula_nll");
  const double p = static_cast<double>(params.dim());
  const Eigen::MatrixXd v = params.cov_cholesky.triangularView<Eigen::Lower>().solve(e.transpose());
  const double constant = 0.5 * p * kLog2Pi + 0.5 * params.log_det_covariance;
  Eigen::VectorXd out(e.rows());
  for (Eigen::Index i = 0; i < e.rows(); ++i) out(i) = constant + 0.5 * v.col(i).squaredNorm();
  return out;
}

/// Batch-mean Gaussian copula loss on a B x p residual variable. Sigma is a
/// constant; the gradient w.r.t. e_i is Sigma^{-1} e_i / B.
inline nd::Var copula_nll(nd::Var residuals, const CopulaParams& params) {
  const nd::Tensor& r = residuals.value();
  if (r.rank() != 2) throw ShapeError("copula_nll: residuals must be B x p, got " + r.shape().str());
  detail::require_factorized(params, static_cast<Eigen::Index>(r.dim(1)), "copula_nll");
  const auto b = static_cast<Eigen::Index>(r.dim(0));
  const auto p = static_cast<Eigen::Index>(r.dim(1));
  if (b < 1) throw ShapeError("copula_nll: empty batch");
  const Eigen::MatrixXd e = nd::ConstMatrixMap(r.data(), b, p);
  const double loss = copula_nll_per_sample(e, params).mean();

  const std::size_t rid = residuals.id;
  const Eigen::MatrixXd chol = params.cov_cholesky;
  nd::GradTape& tape = *residuals.tape;
  return tape.record(nd::scalar_tensor(loss), tape.requires_grad(residuals), [rid, b, p, chol](nd::GradTape& t, const nd::Tensor& gy) {
    const nd::Tensor& rv = t.value(rid);
    const Eigen::MatrixXd et = nd::ConstMatrixMap(rv.data(), b, p).transpose();
    const auto lower = chol.triangularView<Eigen::Lower>();
    const Eigen::MatrixXd solved = lower.transpose().solve(lower.solve(et));  // Sigma^{-1} e^T, p x B
    nd::MatrixMap g(t.grad(rid).data(), b, p);
    g.noalias() += (gy[0] / static_cast<double>(b)) * solved.transpose();
  });
}

enum class MarginalFamily { gaussian, student_t, empirical };

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double standard_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

/// Inverse standard normal CDF: Acklam's rational approximation followed by one
/// Halley refinement step against erfc.
inline double standard_normal_quantile(double u) {
  if (!(u > 0.0 && u < 1.0)) throw ShapeError("standard_normal_quantile: u must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double low = 0.02425, high = 1.0 - low;
  double x;
  if (u < low) {
    const double q = std::sqrt(-2.0 * std::log(u));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (u <= high) {
    const double q = u - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-u));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Phi(x) - u, evaluated on the tail closer to u to avoid cancellation.
  const double err = u < 0.5 ? standard_normal_cdf(x) - u : (1.0 - u) - 0.5 * std::erfc(x / std::numbers::sqrt2);
  const double step = err * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  x -= step / (1.0 + 0.5 * x * step);
  return x;
}

/// Gaussian-copula joint density of t with Gaussian(0, sigma_jk) marginals:
/// |Gamma|^{-1/2} exp{q^T (I - Gamma^{-1}) q / 2} prod_jk f_jk(t_jk), where
/// q_jk = Phi^{-1}(F_jk(t_jk)) = t_jk / sigma_jk.
inline double copula_density(std::span<const double> t, const CopulaParams& params,
                             MarginalFamily marginals = MarginalFamily::gaussian) {
  if (marginals != MarginalFamily::gaussian) {
    throw Unsupported("copula_density: only Gaussian marginals are supported");
  }
  if (!params.factorized) throw NumericalError("copula_density: copula params are not factorized");
  const Eigen::Index p = static_cast<Eigen::Index>(params.dim());
  if (static_cast<Eigen::Index>(t.size()) != p) throw ShapeError("copula_density: point has wrong dimension");

  Eigen::VectorXd q(p);
  double log_marginals = 0.0;
  for (Eigen::Index k = 0; k < p; ++k) {
    q(k) = t[static_cast<std::size_t>(k)] / params.sigma(k);
    log_marginals += -0.5 * kLog2Pi - std::log(params.sigma(k)) - 0.5 * q(k) * q(k);
  }
  const Eigen::VectorXd w = params.gamma_cholesky.triangularView<Eigen::Lower>().solve(q);
  const double log_copula = -0.5 * params.log_det_gamma + 0.5 * (q.squaredNorm() - w.squaredNorm());
  return std::exp(log_copula + log_marginals);
}

}  // namespace oucopula
