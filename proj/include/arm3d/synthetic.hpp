#pragma once

// Synthetic panels with a known generative process, for desk-scale checks.
//
//   b_i(t)       = base + sum_m height_im * exp(-(t - center_im)^2 / (2 width_im^2))
//   lambda_t     = rho * T~ lambda_{t-1} + (1 - rho) * T~ b_t,  lambda_0 = T~ b_0
//   Z_i(t)       = lambda_i(t) + noise_scale * N(0, 1)
//
// T~ is a random row-stochastic matrix (self weight 1/2). Mobility follows the
// same T~: trips i -> j on coupled pairs scale with T~(i, j) and with both
// endpoints' activity u(t) = 1 + (b(t) - base) / (2 max_t (b - base)), so that
// thresholding recovers the support of T~. Uncoupled pairs get sparse trips
// well below the default edge threshold. The single covariate is each node's
// activity level as observed through its device count.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"

namespace arm3d::data {

struct SyntheticConfig {
  int n_nodes = 8;
  int t_days = 120;
  std::uint64_t seed = 7;
  int n_modes = 2;
  double edge_density = 0.3;
  double noise_scale = 0.1;
  double coupling = 0.6;  // rho

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    need(n_nodes >= 2, "synthetic: n_nodes must be >= 2");
    need(t_days >= 16, "synthetic: t_days must be >= 16");
    need(n_modes >= 1, "synthetic: n_modes must be positive");
    need(edge_density > 0.0 && edge_density <= 1.0, "synthetic: edge_density must be in (0, 1]");
    need(noise_scale >= 0.0 && std::isfinite(noise_scale), "synthetic: noise_scale must be >= 0");
    need(coupling >= 0.0 && coupling < 1.0, "synthetic: coupling must be in [0, 1)");
  }
};

struct GeneratorTruth {
  SyntheticConfig config;
  Matrix transition;  // T~, N x N
  double base = 0.5;
  Matrix centers, widths, heights;  // N x n_modes
  Matrix drive;                     // b, N x T
  Matrix intensity;                 // lambda, N x T
  double visit_scale = 0.0;

  nlohmann::json to_json() const {
    auto mat = [](const Matrix& m) {
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
        rows.push_back(r);
      }
      return rows;
    };
    return {{"process", "lambda_t = rho * T lambda_{t-1} + (1 - rho) * T b_t; Z = lambda + noise"},
            {"n_nodes", config.n_nodes},
            {"t_days", config.t_days},
            {"seed", config.seed},
            {"n_modes", config.n_modes},
            {"edge_density", config.edge_density},
            {"noise_scale", config.noise_scale},
            {"rho", config.coupling},
            {"base", base},
            {"visit_scale", visit_scale},
            {"transition", mat(transition)},
            {"mode_centers", mat(centers)},
            {"mode_widths", mat(widths)},
            {"mode_heights", mat(heights)}};
  }
};

struct SyntheticData {
  TimeSeriesPanel panel;
  std::vector<MobilityRecord> mobility;
  GeneratorTruth truth;
};

inline std::string synthetic_node_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "99%03d", i);
  return buf;
}

inline constexpr double kSyntheticThreshold = 200.0;

inline SyntheticData generate_synthetic_panel(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int n = cfg.n_nodes, t_days = cfg.t_days, modes = cfg.n_modes;

  GeneratorTruth truth;
  truth.config = cfg;

  // Coupling graph.
  Matrix tr = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    std::vector<int> nbrs;
    for (int j = 0; j < n; ++j)
      if (j != i && unif(rng) < cfg.edge_density) nbrs.push_back(j);
    if (nbrs.empty()) {
      int j = static_cast<int>(unif(rng) * (n - 1));
      nbrs.push_back(j >= i ? j + 1 : j);
    }
    double total = 0.0;
    for (int j : nbrs) {
      tr(i, j) = 0.5 + unif(rng);
      total += tr(i, j);
    }
    for (int j : nbrs) tr(i, j) *= 0.5 / total;
    tr(i, i) = 0.5;
  }
  truth.transition = tr;

  // Seasonal drive: modes share a global center, nodes jitter around it.
  truth.centers.resize(n, modes);
  truth.widths.resize(n, modes);
  truth.heights.resize(n, modes);
  for (int m = 0; m < modes; ++m) {
    const double span = static_cast<double>(t_days) / modes;
    const double center = span * (m + 0.5) + (unif(rng) - 0.5) * 0.1 * span;
    const double width = span / 6.0;
    for (int i = 0; i < n; ++i) {
      truth.widths(i, m) = width * (0.9 + 0.2 * unif(rng));
      truth.centers(i, m) = center + (unif(rng) - 0.5) * 0.3 * width;
      truth.heights(i, m) = 1.0 + 2.0 * unif(rng);
    }
  }
  truth.drive.resize(n, t_days);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_days; ++t) {
      double b = truth.base;
      for (int m = 0; m < modes; ++m) {
        const double u = (t - truth.centers(i, m)) / truth.widths(i, m);
        b += truth.heights(i, m) * std::exp(-0.5 * u * u);
      }
      truth.drive(i, t) = b;
    }

  const double rho = cfg.coupling;
  truth.intensity.resize(n, t_days);
  truth.intensity.col(0) = tr * truth.drive.col(0);
  for (int t = 1; t < t_days; ++t)
    truth.intensity.col(t) = rho * tr * truth.intensity.col(t - 1) + (1.0 - rho) * tr * truth.drive.col(t);

  SyntheticData out;
  out.panel.targets.resize(n, t_days);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_days; ++t)
      out.panel.targets(i, t) = truth.intensity(i, t) + cfg.noise_scale * normal(rng);

  // Mobility.
  Matrix activity(n, t_days);
  for (int i = 0; i < n; ++i) {
    const double peak = (truth.drive.row(i).array() - truth.base).maxCoeff();
    for (int t = 0; t < t_days; ++t)
      activity(i, t) = 1.0 + 0.5 * (truth.drive(i, t) - truth.base) / std::max(peak, 1e-12);
  }
  double min_weight = 1.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (tr(i, j) > 0.0) min_weight = std::min(min_weight, tr(i, j));
  // weekly factor >= 0.75, multiplicative noise >= ~0.85: keep every coupled pair >= 2x threshold
  truth.visit_scale = std::ceil(2.0 * kSyntheticThreshold / (min_weight * 0.75 * 0.85));

  const Date start = *Date::parse("2020-05-01");
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back(synthetic_node_id(i));
  std::vector<bool> noisy_pair(static_cast<std::size_t>(n * n), false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) noisy_pair[static_cast<std::size_t>(i * n + j)] = tr(i, j) == 0.0 && unif(rng) < 0.3;

  out.panel.covariates.assign(static_cast<std::size_t>(t_days), Matrix::Zero(n, 1));
  for (int t = 0; t < t_days; ++t) {
    const double weekly = 1.0 + 0.25 * std::sin(2.0 * std::numbers::pi * t / 7.0);
    for (int i = 0; i < n; ++i) {
      const long long devices = std::llround(1000.0 * activity(i, t) * (1.0 + 0.01 * normal(rng)));
      const double distance = 3.0 + 2.0 * activity(i, t) + 0.05 * std::abs(normal(rng));
      out.panel.covariates[static_cast<std::size_t>(t)](i, 0) = static_cast<double>(devices) / 1000.0;
      for (int j = 0; j < n; ++j) {
        long long visits = 0;
        if (tr(i, j) > 0.0) {
          const double jitter = std::clamp(1.0 + 0.05 * normal(rng), 0.85, 1.15);
          visits = std::llround(truth.visit_scale * tr(i, j) * weekly * activity(i, t) *
                                activity(j, t) * jitter);
        } else if (noisy_pair[static_cast<std::size_t>(i * n + j)]) {
          visits = 1 + static_cast<long long>(unif(rng) * 150.0);
        }
        if (visits > 0)
          out.mobility.push_back({start + t, ids[static_cast<std::size_t>(i)],
                                  ids[static_cast<std::size_t>(j)], visits, distance, devices});
      }
    }
  }

  out.panel.node_ids = ids;
  out.panel.feature_names = {"activity"};
  out.panel.t0 = t_days;
  out.panel.start_date = start;
  out.panel.validate();
  out.truth = std::move(truth);
  return out;
}

}  // namespace arm3d::data
