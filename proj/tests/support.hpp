#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "arm3d/data_ingest.hpp"
#include "arm3d/graph.hpp"
#include "arm3d/model.hpp"
#include "arm3d/nn.hpp"
#include "arm3d/synthetic.hpp"
#include "arm3d/training.hpp"

namespace arm3d::fixtures {

struct Series {
  data::TimeSeriesPanel panel;
  std::vector<graph::TransitionMatrix> transitions;

  model::SeriesData view() const { return {&panel, &transitions}; }
};

/// Random targets, covariates and row-stochastic graphs.
inline Series random_series(int n, int t, int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Series s;
  for (int i = 0; i < n; ++i) s.panel.node_ids.push_back(std::to_string(i));
  for (int f = 0; f < p; ++f) s.panel.feature_names.push_back("f" + std::to_string(f));
  s.panel.targets = Matrix::NullaryExpr(n, t, [&] { return nd(rng); });
  for (int d = 0; d < t; ++d) {
    s.panel.covariates.push_back(Matrix::NullaryExpr(n, p, [&] { return nd(rng); }));
    Matrix a = Matrix::NullaryExpr(n, n, [&] { return u(rng) < 0.6 ? u(rng) : 0.0; });
    a.diagonal().setOnes();
    s.transitions.push_back(graph::to_transition(a));
  }
  s.panel.t0 = t;
  return s;
}

/// Moves every parameter away from its initialization so that no gradient is trivially zero.
inline void jitter(nn::ParamStore& ps, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& e : ps) e.value += Matrix::NullaryExpr(e.value.rows(), e.value.cols(), [&] { return nd(rng); });
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central differences of the plain window_nll against the taped gradient.
inline GradCheck gradient_check(const model::Arm3dnetConfig& cfg, nn::ParamStore& ps, const model::SeriesData& data,
                                const model::Window& w, model::LossRange range, double step = 1e-5) {
  ps.zero_grad();
  model::window_nll_backward(cfg, ps, data, w, range);
  GradCheck out;
  for (auto& e : ps) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) {
      const double keep = e.value(i);
      e.value(i) = keep + step;
      const double up = model::window_nll(cfg, ps, data, w, range);
      e.value(i) = keep - step;
      const double down = model::window_nll(cfg, ps, data, w, range);
      e.value(i) = keep;
      const double fd = (up - down) / (2.0 * step);
      const double an = e.grad(i);
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = e.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  ps.zero_grad();
  return out;
}

/// Random small configuration for the gradient property.
struct GradCase {
  model::Arm3dnetConfig cfg;
  Series series;
  model::Window window;
  model::LossRange range = model::LossRange::Prediction;
};

inline GradCase random_grad_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
  GradCase c;
  c.cfg.n_nodes = pick(1, 3);
  c.cfg.covariate_dim = pick(1, 2);
  c.cfg.hidden_size = pick(1, 4);
  c.cfg.n_layers = pick(1, 2);
  c.cfg.mixture_k = pick(1, 3);
  c.cfg.horizon = pick(1, 4);
  c.cfg.use_covariates = true;
  const int t = pick(c.cfg.horizon + 1, 8);
  c.window = {0, t - c.cfg.horizon, c.cfg.horizon};
  c.range = rng() % 2 ? model::LossRange::Prediction : model::LossRange::Full;
  c.series = random_series(c.cfg.n_nodes, t, c.cfg.covariate_dim, seed * 7919 + 1);
  return c;
}

/// One-step conditional is an equal mixture of N(phi z + delta, sigma^2) and
/// N(phi z - delta, sigma^2): z_t = phi z_{t-1} + s_t delta + sigma e_t, s_t = +-1.
struct SwitchingParams {
  int n_nodes = 4;
  int t_days = 300;
  double phi = 0.3;
  double delta = 2.0;
  double sigma = 0.5;
  std::uint64_t seed = 1;
};

inline Series switching_series(const SwitchingParams& sp) {
  std::mt19937_64 rng(sp.seed);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);
  Series s;
  for (int i = 0; i < sp.n_nodes; ++i) s.panel.node_ids.push_back(std::to_string(i));
  s.panel.feature_names = {"none"};
  s.panel.targets.resize(sp.n_nodes, sp.t_days);
  for (int i = 0; i < sp.n_nodes; ++i) {
    double z = 0.0;
    for (int t = 0; t < sp.t_days; ++t) {
      z = sp.phi * z + (coin(rng) ? sp.delta : -sp.delta) + sp.sigma * nd(rng);
      s.panel.targets(i, t) = z;
    }
  }
  for (int d = 0; d < sp.t_days; ++d) {
    s.panel.covariates.push_back(Matrix::Zero(sp.n_nodes, 1));
    s.transitions.push_back({Matrix::Identity(sp.n_nodes, sp.n_nodes)});
  }
  s.panel.t0 = sp.t_days;
  return s;
}

/// Synthetic panel ready for training: test split applied, graph built from
/// its mobility, covariates standardized and targets scaled.
struct PreparedSynthetic {
  data::SyntheticData raw;
  Series series;  // preprocessed
  training::Preprocessing pre;
};

inline PreparedSynthetic prepared_synthetic(const data::SyntheticConfig& cfg, int horizon,
                                            const std::vector<int>& node_subset = {}) {
  PreparedSynthetic out;
  out.raw = data::generate_synthetic_panel(cfg);
  data::TimeSeriesPanel panel = out.raw.panel;
  if (!node_subset.empty()) panel = panel.select_nodes(node_subset);
  const auto cube = graph::MobilityCube::from_records(out.raw.mobility, panel.node_ids, *panel.start_date, panel.n_days());
  out.series.transitions = graph::transitions(graph::build_dynamic_adjacency(cube));
  auto [prepared, pre] = training::fit_preprocessing(data::split_ranges(panel, horizon));
  out.series.panel = std::move(prepared);
  out.pre = std::move(pre);
  return out;
}

}  // namespace arm3d::fixtures
