#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <thread>
#include <vector>

#include "oucopula/data/dataset.hpp"

namespace oucopula::data {

inline constexpr std::size_t kLatentDim = 8;
using Latent = std::array<double, kLatentDim>;

/// Noise correlation with eye-major Kronecker structure: same-label cross-eye
/// correlation `cross_eye`, within-eye SE-AL correlation `within_eye`, and their
/// product across eyes and labels. Positive definite whenever both are in (-1, 1).
inline Eigen::Matrix4d noise_correlation(double cross_eye, double within_eye) {
  Eigen::Matrix2d eye, label;
  eye << 1.0, cross_eye, cross_eye, 1.0;
  label << 1.0, within_eye, within_eye, 1.0;
  Eigen::Matrix4d out;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) out.block<2, 2>(2 * a, 2 * b) = eye(a, b) * label;
  }
  return out;
}

struct GeneratorConfig {
  std::size_t n_patients = 500;
  std::size_t resolution = 64;
  std::size_t channels = 3;
  Eigen::Vector4d sigma = Eigen::Vector4d::Constant(0.5);
  Eigen::Matrix4d gamma = noise_correlation(0.8, -0.3);
  double delta = 1.0;  // interocular asymmetry strength
  std::uint64_t seed = 0;

  Eigen::Matrix4d covariance() const { return sigma.asDiagonal() * gamma * sigma.asDiagonal(); }
};

/// Bounded latent feature 2 tanh(z/2); images and labels both depend on z through it.
inline double feature(const Latent& z, std::size_t k) { return 2.0 * std::tanh(0.5 * z[k]); }

/// Noiseless labels (OS-SE, OS-AL, OD-SE, OD-AL) as fixed polynomials of the
/// bounded features s_k = feature(z, k):
///   OS-SE =  1.00 s0 + 0.70 s2 + 0.50 s7 + 0.40 s4 + 0.25 (s1^2 - 1)
///   OD-SE =  1.00 s0 + 0.60 s2 + 0.55 s7 + 0.40 s4 + 0.25 (s1^2 - 1)
///   OS-AL = -0.50 s0 - 0.30 s2 + 0.80 s3 + 0.40 s6 + 0.20 s3 s6
///   OD-AL = -0.50 s0 - 0.35 s2 + 0.80 s3 + 0.35 s6 + 0.20 s3 s6
/// s2 (stripe angle) and s7 (horizontal ramp) flip sign in the mirrored OD image,
/// so a model that cannot tell the eyes apart cannot fit both channels.
inline Labels noiseless_labels(const Latent& z) {
  std::array<double, kLatentDim> s{};
  for (std::size_t k = 0; k < kLatentDim; ++k) s[k] = feature(z, k);
  const double quad = 0.25 * (s[1] * s[1] - 1.0);
  return {1.00 * s[0] + 0.70 * s[2] + 0.50 * s[7] + 0.40 * s[4] + quad,
          -0.50 * s[0] - 0.30 * s[2] + 0.80 * s[3] + 0.40 * s[6] + 0.20 * s[3] * s[6],
          1.00 * s[0] + 0.60 * s[2] + 0.55 * s[7] + 0.40 * s[4] + quad,
          -0.50 * s[0] - 0.35 * s[2] + 0.80 * s[3] + 0.35 * s[6] + 0.20 * s[3] * s[6]};
}

/// Renders the OS image (C x R x R, values in [0, 1]) for latent z: brightness,
/// concentric rings, oriented stripes, an off-center disc, a horizontal ramp, a
/// per-channel tint and a symmetric texture whose contrast varies.
inline nd::Tensor render_os(const Latent& z, std::size_t resolution, std::size_t channels) {
  std::array<double, kLatentDim> s{};
  for (std::size_t k = 0; k < kLatentDim; ++k) s[k] = feature(z, k);
  const double theta = 0.35 * s[2];
  const double ct = std::cos(theta), st = std::sin(theta);
  const double ring_freq = std::numbers::pi * (3.0 + 0.5 * s[1]);
  const double stripe_freq = std::numbers::pi * (4.0 + 0.75 * s[3]);
  const double disc_u = 0.3 * s[5];
  nd::Tensor img(nd::Shape{channels, resolution, resolution});
  const double inv = 1.0 / static_cast<double>(resolution);
  for (std::size_t y = 0; y < resolution; ++y) {
    const double v = (2.0 * static_cast<double>(y) + 1.0) * inv - 1.0;
    for (std::size_t x = 0; x < resolution; ++x) {
      const double u = (2.0 * static_cast<double>(x) + 1.0) * inv - 1.0;
      const double r = std::sqrt(u * u + v * v);
      const double du = u - disc_u, dv = v - 0.1;
      const double base = 0.45 + 0.06 * s[0] + 0.10 * std::cos(ring_freq * r) +
                          0.10 * std::sin(stripe_freq * (u * ct + v * st)) +
                          0.20 * std::exp(-(du * du + dv * dv) / 0.04) + 0.05 * s[7] * u +
                          0.04 * (1.0 + 0.5 * s[6]) * std::cos(11.0 * u) * std::cos(13.0 * v);
      for (std::size_t c = 0; c < channels; ++c) {
        const double tint = 0.04 * s[4] * (static_cast<double>(c) - 0.5 * static_cast<double>(channels - 1));
        img.at(0, c, y, x) = std::clamp(base + tint, 0.0, 1.0);
      }
    }
  }
  return img;
}

/// Horizontal mirror of a C x H x W image.
inline nd::Tensor mirror(const nd::Tensor& img) {
  nd::Tensor out(img.shape());
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(k * h + y) * w + x] = img[(k * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

/// Ground truth kept alongside a generated dataset (not written to disk).
struct SyntheticTruth {
  std::vector<Latent> latents;
  std::vector<Labels> noiseless;
};

struct SyntheticDataset {
  DatasetContainer dataset;
  SyntheticTruth truth;
};

inline void validate(const GeneratorConfig& cfg) {
  if (cfg.n_patients < 10) throw ShapeError("generator: n_patients must be >= 10");
  if (cfg.resolution < 1 || cfg.channels < 1) throw ShapeError("generator: resolution and channels must be positive");
  if (!(cfg.delta >= 0.0)) throw ShapeError("generator: delta must be >= 0");
}

/// Per-patient stream: the draws for patient i depend only on (seed, i).
inline std::mt19937_64 patient_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32),
                    0x6f756475u};
  return std::mt19937_64(seq);
}

inline nlohmann::json generator_echo(const GeneratorConfig& cfg) {
  auto to_vec = [](const auto& m) {
    std::vector<double> v;
    for (Eigen::Index i = 0; i < m.size(); ++i) v.push_back(m.data()[i]);
    return v;
  };
  const Eigen::Matrix4d cov = cfg.covariance();
  nlohmann::json g;
  g["n_patients"] = cfg.n_patients;
  g["resolution"] = cfg.resolution;
  g["channels"] = cfg.channels;
  g["delta"] = cfg.delta;
  g["seed"] = cfg.seed;
  g["sigma"] = to_vec(cfg.sigma);
  std::vector<std::vector<double>> gamma(4), covariance(4);
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      gamma[a].push_back(cfg.gamma(a, b));
      covariance[a].push_back(cov(a, b));
    }
  }
  g["gamma"] = gamma;
  g["covariance"] = covariance;
  return g;
}

/// Synthetic paired-eye data with known mean functions and noise covariance.
/// Patients are generated independently, so `jobs` does not change the output.
inline SyntheticDataset generate_with_truth(const GeneratorConfig& cfg, std::size_t jobs = 1) {
  validate(cfg);
  const Eigen::Matrix4d cov = cfg.covariance();
  Eigen::LLT<Eigen::Matrix4d> llt(cov);
  if (llt.info() != Eigen::Success || !cov.allFinite() || !cfg.gamma.isApprox(cfg.gamma.transpose())) {
    throw ShapeError("generator: noise covariance is not symmetric positive definite");
  }
  const Eigen::Matrix4d chol = llt.matrixL();

  SyntheticDataset out;
  out.dataset.provenance = Provenance::synthetic;
  out.dataset.generator = generator_echo(cfg);
  out.dataset.records.resize(cfg.n_patients);
  out.truth.latents.resize(cfg.n_patients);
  out.truth.noiseless.resize(cfg.n_patients);

  auto make = [&](std::size_t i) {
    std::mt19937_64 rng = patient_rng(cfg.seed, i);
    std::normal_distribution<double> normal(0.0, 1.0);
    Latent z{};
    for (double& v : z) v = normal(rng);
    Eigen::Vector4d xi;
    for (int k = 0; k < 4; ++k) xi(k) = normal(rng);
    const double gain = normal(rng), offset = normal(rng);

    PatientRecord rec;
    rec.os_image = render_os(z, cfg.resolution, cfg.channels);
    rec.od_image = mirror(rec.os_image);
    for (std::size_t p = 0; p < rec.od_image.size(); ++p) {
      const double m = rec.od_image[p];
      rec.od_image[p] = std::clamp(m + cfg.delta * (0.15 * gain * m + 0.08 * offset), 0.0, 1.0);
    }
    // Images are held at f32 precision so the on-disk format round-trips exactly.
    for (double& v : rec.os_image.values()) v = static_cast<double>(static_cast<float>(v));
    for (double& v : rec.od_image.values()) v = static_cast<double>(static_cast<float>(v));

    const Labels clean = noiseless_labels(z);
    const Eigen::Vector4d eps = chol * xi;
    for (std::size_t k = 0; k < kLabelCount; ++k) rec.labels[k] = clean[k] + eps(static_cast<Eigen::Index>(k));
    out.dataset.records[i] = std::move(rec);
    out.truth.latents[i] = z;
    out.truth.noiseless[i] = clean;
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, cfg.n_patients));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cfg.n_patients; ++i) make(i);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t i = w; i < cfg.n_patients; i += jobs) make(i);
      });
    }
    for (auto& t : workers) t.join();
  }
  return out;
}

inline DatasetContainer generate(const GeneratorConfig& cfg, std::size_t jobs = 1) {
  return generate_with_truth(cfg, jobs).dataset;
}

}  // namespace oucopula::data
