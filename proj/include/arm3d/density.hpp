#pragma once

// Likelihood heads: a single Gaussian and a K-component Gaussian mixture over
// a scalar target, with stable negative log-likelihood and ancestral sampling.

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "arm3d/common.hpp"
#include "arm3d/nn.hpp"

namespace arm3d::density {

using Rng = std::mt19937_64;

inline constexpr int kDefaultComponents = 5;
inline constexpr int kMaxComponents = 16;
inline constexpr double kDefaultSigmaFloor = 1e-6;

enum class SigmaLink { Softplus, Exp };

inline double apply_sigma_link(double raw, SigmaLink link, double floor) {
  return (link == SigmaLink::Softplus ? nn::softplus(raw) : std::exp(raw)) + floor;
}

struct GaussianParams {
  double mu = 0.0;
  double sigma = 1.0;
};

inline GaussianParams gaussian_head(const Vector& h, const Matrix& w_mu, double b_mu,
                                    const Matrix& w_sigma, double b_sigma) {
  require_shape(w_mu.rows() == 1 && w_sigma.rows() == 1 && w_mu.cols() == h.size() &&
                    w_sigma.cols() == h.size(),
                "gaussian_head: W_mu " + shape_str(w_mu) + ", W_sigma " + shape_str(w_sigma) +
                    ", h " + std::to_string(h.size()));
  const double mu = w_mu.row(0).dot(h) + b_mu;
  const double raw = w_sigma.row(0).dot(h) + b_sigma;
  return {mu, nn::softplus(raw)};
}

inline double gaussian_nll(const GaussianParams& p, double z) {
  const double u = (z - p.mu) / p.sigma;
  return 0.5 * std::log(2.0 * std::numbers::pi) + std::log(p.sigma) + 0.5 * u * u;
}

struct GmmParams {
  Vector weights;
  Vector means;
  Vector sigmas;

  int k() const { return static_cast<int>(weights.size()); }

  bool valid(double tol = 1e-9) const {
    if (weights.size() < 1 || means.size() != weights.size() || sigmas.size() != weights.size())
      return false;
    if (!weights.allFinite() || !means.allFinite() || !sigmas.allFinite()) return false;
    if ((weights.array() < 0.0).any() || (sigmas.array() <= 0.0).any()) return false;
    return std::abs(weights.sum() - 1.0) <= tol;
  }
};

/// Output layer of the mixture head; all maps are out x H with a bias.
struct GmmHeadParams {
  Matrix w_p, w_mu, w_sigma;  // K x H
  Vector b_p, b_mu, b_sigma;  // K

  int k() const { return static_cast<int>(w_p.rows()); }
};

struct HeadOptions {
  SigmaLink link = SigmaLink::Softplus;
  double sigma_floor = kDefaultSigmaFloor;
};

/// weights = softmax(dense_p(h)); means = dense_mu(h); sigmas = link(dense_sigma(h)) + floor.
inline GmmParams gmm_head(const Vector& h, const GmmHeadParams& p, const HeadOptions& opt = {}) {
  require_shape(p.w_mu.rows() == p.k() && p.w_sigma.rows() == p.k() && p.b_p.size() == p.k() &&
                    p.b_mu.size() == p.k() && p.b_sigma.size() == p.k(),
                "gmm_head: inconsistent component counts");
  GmmParams out;
  out.weights = nn::softmax(nn::dense_forward(p.w_p, p.b_p, h));
  out.means = nn::dense_forward(p.w_mu, p.b_mu, h);
  Vector raw = nn::dense_forward(p.w_sigma, p.b_sigma, h);
  out.sigmas = raw.unaryExpr([&](double v) { return apply_sigma_link(v, opt.link, opt.sigma_floor); });
  return out;
}

/// log p_k + log N(z; mu_k, sigma_k) per component.
inline Vector component_log_joint(const GmmParams& p, double z) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Vector a(p.k());
  for (int c = 0; c < p.k(); ++c) {
    const double u = (z - p.means(c)) / p.sigmas(c);
    a(c) = std::log(p.weights(c)) - half_log_2pi - std::log(p.sigmas(c)) - 0.5 * u * u;
  }
  return a;
}

/// -log sum_k p_k N(z; mu_k, sigma_k^2), evaluated with log-sum-exp.
inline double gmm_nll(const GmmParams& p, double z) { return -nn::log_sum_exp(component_log_joint(p, z)); }

/// Ancestral draw: component from the weights, then a normal draw.
inline double gmm_sample(const GmmParams& p, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  int chosen = -1;
  double cum = 0.0;
  for (int c = 0; c < p.k(); ++c) {
    if (p.weights(c) <= 0.0) continue;
    cum += p.weights(c);
    chosen = c;
    if (u < cum) break;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  return p.means(chosen) + p.sigmas(chosen) * normal(rng);
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

inline Moments gmm_moments(const GmmParams& p) {
  const double mean = p.weights.dot(p.means);
  const double second =
      (p.weights.array() * (p.sigmas.array().square() + p.means.array().square())).sum();
  return {mean, std::max(0.0, second - mean * mean)};
}

inline double gmm_cdf(const GmmParams& p, double z) {
  double f = 0.0;
  for (int c = 0; c < p.k(); ++c)
    f += p.weights(c) * 0.5 * std::erfc(-(z - p.means(c)) / (p.sigmas(c) * std::numbers::sqrt2));
  return f;
}

}  // namespace arm3d::density
