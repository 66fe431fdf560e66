#pragma once

// Window construction, the Adam/early-stopping epoch loop and per-epoch
// validation diagnostics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"
#include "arm3d/graph.hpp"
#include "arm3d/metrics.hpp"
#include "arm3d/model.hpp"
#include "arm3d/nn.hpp"

namespace arm3d::training {

using model::Window;

inline std::vector<Window> make_windows(int n_days, int cond_len, int pred_len, int stride) {
  if (cond_len < 1 || pred_len < 1) throw Error(ErrorCode::InvalidConfig, "window lengths must be positive");
  if (stride < 1) throw Error(ErrorCode::InvalidConfig, "stride must be >= 1");
  if (cond_len + pred_len > n_days)
    throw Error(ErrorCode::WindowTooLong, "window of " + std::to_string(cond_len + pred_len) +
                                              " days does not fit in " + std::to_string(n_days));
  std::vector<Window> out;
  for (int start = 0; start + cond_len + pred_len <= n_days; start += stride)
    out.push_back({start, cond_len, pred_len});
  return out;
}

inline std::vector<Window> make_windows(const data::TimeSeriesPanel& panel, int cond_len, int pred_len,
                                        int stride) {
  return make_windows(panel.n_days(), cond_len, pred_len, stride);
}

enum class PointSummary { MixtureMean, SampleMedian };

/// What picks the kept checkpoint and drives early stopping.
enum class Selection { ValidationNd, ValidationNll };

struct TrainConfig {
  int epochs = 50;
  int patience = 5;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
  int cond_len = 28;
  int stride = 7;
  int batch_size = 1;  // windows per Adam step
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
  bool full_range_loss = false;
  bool validation_hold_last = false;  // false: backtest with observed future covariates
  PointSummary point = PointSummary::MixtureMean;
  Selection select = Selection::ValidationNd;
  std::string dump_dir;  // where a window with a non-finite loss is written

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    need(epochs >= 1, "epochs must be >= 1");
    need(patience >= 1, "patience must be >= 1");
    need(lr >= 0.0, "lr must be >= 0");
    need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must be in [0, 1)");
    need(eps > 0.0, "eps must be positive");
    need(cond_len >= 1, "cond_len must be >= 1");
    need(stride >= 1, "stride must be >= 1");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(validation_fraction > 0.0 && validation_fraction < 1.0, "validation_fraction must be in (0, 1)");
  }

  model::LossRange loss_range() const {
    return full_range_loss ? model::LossRange::Full : model::LossRange::Prediction;
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_nd = 0.0;
  double val_nrmse = 0.0;
  double val_nll = 0.0;  // mean window NLL over the validation windows
};

struct TrainReport {
  double initial_train_loss = 0.0;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based
  double best_nd = std::numeric_limits<double>::infinity();
  bool stopped_early = false;

  /// One JSON record per epoch, then one summary record.
  void write_jsonl(std::ostream& out) const {
    for (const auto& e : epochs)
      out << nlohmann::json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_nd", e.val_nd},
                            {"val_nrmse", e.val_nrmse}, {"val_nll", e.val_nll}}
                 .dump()
          << '\n';
    out << nlohmann::json{{"summary", true},
                          {"initial_train_loss", initial_train_loss},
                          {"best_epoch", best_epoch},
                          {"best_nd", best_nd},
                          {"stopped_early", stopped_early},
                          {"epochs_run", epochs.size()}}
               .dump()
        << '\n';
  }
};

/// Target scale and covariate statistics shared by training and forecasting.
struct Preprocessing {
  double target_scale = 1.0;
  std::vector<data::FeatureStats> features;

  nlohmann::json to_json() const {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& s : features) f.push_back({s.mean, s.std});
    return {{"target_scale", target_scale}, {"features", f}};
  }

  static Preprocessing from_json(const nlohmann::json& j) {
    Preprocessing p;
    p.target_scale = j.at("target_scale").get<double>();
    for (const auto& f : j.at("features")) p.features.push_back({f.at(0).get<double>(), f.at(1).get<double>()});
    return p;
  }
};

/// Standardizes covariates on the conditioning range and divides targets by
/// their mean absolute conditioning-range value.
inline std::pair<data::TimeSeriesPanel, Preprocessing> fit_preprocessing(const data::TimeSeriesPanel& panel) {
  auto [out, stats] = data::standardize_covariates(panel);
  Preprocessing pre;
  pre.features = std::move(stats);
  const double scale = panel.targets.leftCols(panel.cond_length()).cwiseAbs().mean();
  pre.target_scale = scale > 0.0 ? scale : 1.0;
  out.targets /= pre.target_scale;
  return {std::move(out), std::move(pre)};
}

inline data::TimeSeriesPanel apply_preprocessing(const data::TimeSeriesPanel& panel, const Preprocessing& pre) {
  if (static_cast<int>(pre.features.size()) != panel.n_features())
    throw Error(ErrorCode::CheckpointMismatch, "panel has " + std::to_string(panel.n_features()) +
                                                   " features, checkpoint expects " +
                                                   std::to_string(pre.features.size()));
  data::TimeSeriesPanel out = panel;
  for (auto& x : out.covariates)
    for (int f = 0; f < panel.n_features(); ++f) {
      const auto& s = pre.features[static_cast<std::size_t>(f)];
      x.col(f) = (x.col(f).array() - s.mean) / s.std;
    }
  out.targets /= pre.target_scale;
  return out;
}

struct ValidationResult {
  double nd = 0.0;
  double nrmse = 0.0;
  Matrix actual;     // N x (windows * horizon)
  Matrix predicted;
};

/// Forecasts every validation window with a fixed seed and pools the point
/// forecasts; a pure function of the parameters.
inline ValidationResult validate_windows(const model::Arm3dnetConfig& cfg, const nn::ParamStore& ps,
                                         const model::SeriesData& data, const std::vector<Window>& windows,
                                         const TrainConfig& tc) {
  const int n = cfg.n_nodes;
  int cols = 0;
  for (const auto& w : windows) cols += w.pred_len;
  ValidationResult res;
  res.actual.resize(n, cols);
  res.predicted.resize(n, cols);
  int at = 0;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& w = windows[k];
    auto art = model::forecast_window(cfg, ps, data, w, tc.validation_hold_last,
                                      derive_seed(tc.seed, "validation", k));
    res.actual.middleCols(at, w.pred_len) = data.panel->targets.middleCols(w.start + w.cond_len, w.pred_len);
    res.predicted.middleCols(at, w.pred_len) = tc.point == PointSummary::MixtureMean ? art.point : art.q50;
    at += w.pred_len;
  }
  res.nd = metrics::nd(res.actual, res.predicted);
  res.nrmse = metrics::nrmse(res.actual, res.predicted);
  return res;
}

/// Training/validation split over the days before the panel's prediction range.
struct WindowSplit {
  std::vector<Window> train;
  std::vector<Window> validation;
};

inline WindowSplit split_windows(const data::TimeSeriesPanel& panel, int cond_len, int pred_len,
                                 const TrainConfig& tc) {
  auto all = make_windows(panel.cond_length(), cond_len, pred_len, tc.stride);
  if (all.size() < 2)
    throw Error(ErrorCode::NoWindows, "need at least two windows (one training, one validation), got " +
                                          std::to_string(all.size()));
  const auto n_val = std::clamp<long long>(std::llround(tc.validation_fraction * static_cast<double>(all.size())),
                                           1, static_cast<long long>(all.size()) - 1);
  WindowSplit s;
  s.train.assign(all.begin(), all.end() - n_val);
  s.validation.assign(all.end() - n_val, all.end());
  return s;
}

struct TrainResult {
  nn::ParamStore best;
  TrainReport report;
};

namespace detail {
inline void dump_window(const std::string& dir, const data::TimeSeriesPanel& panel, const Window& w,
                        std::size_t index) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  std::ofstream out(std::filesystem::path(dir) / ("nonfinite_window_" + std::to_string(index) + ".csv"));
  out << "node,day,target";
  for (const auto& f : panel.feature_names) out << ',' << f;
  out << '\n';
  for (int i = 0; i < panel.n_nodes(); ++i)
    for (int d = w.start; d < w.end(); ++d) {
      out << panel.node_ids[static_cast<std::size_t>(i)] << ',' << d << ',' << format_double(panel.targets(i, d));
      for (int f = 0; f < panel.n_features(); ++f)
        out << ',' << format_double(panel.covariates[static_cast<std::size_t>(d)](i, f));
      out << '\n';
    }
}
}  // namespace detail

/// Mean window NLL over a set of windows.
inline double mean_window_nll(const model::Arm3dnetConfig& cfg, const nn::ParamStore& ps,
                              const model::SeriesData& data, const std::vector<Window>& windows,
                              model::LossRange range) {
  double s = 0.0;
  for (const auto& w : windows) s += model::window_nll(cfg, ps, data, w, range);
  return s / static_cast<double>(windows.size());
}

/// Epoch loop: shuffled mini-batches of windows, summed window gradients,
/// global-norm clipping, Adam; keeps the parameters with the lowest validation
/// ND (or validation NLL, see Selection) and stops after `patience` epochs
/// without improvement.
/// `panel` must already be preprocessed (see fit_preprocessing).
inline TrainResult train(const model::Arm3dnetConfig& cfg, const TrainConfig& tc,
                         const data::TimeSeriesPanel& panel,
                         const std::vector<graph::TransitionMatrix>& transitions,
                         std::optional<nn::ParamStore> initial = std::nullopt) {
  cfg.validate();
  tc.validate();
  const model::SeriesData data{&panel, &transitions};
  data.check(cfg);
  const auto split = split_windows(panel, tc.cond_len, cfg.horizon, tc);

  nn::ParamStore ps = initial ? std::move(*initial) : model::init_params(cfg, derive_seed(tc.seed, "init"));
  model::check_params(cfg, ps);
  ps.zero_grad();
  nn::AdamState adam;
  adam.lr = tc.lr;
  adam.beta1 = tc.beta1;
  adam.beta2 = tc.beta2;
  adam.eps = tc.eps;

  TrainResult result;
  auto& rep = result.report;
  rep.initial_train_loss = mean_window_nll(cfg, ps, data, split.train, tc.loss_range());
  result.best = ps;

  std::vector<std::size_t> order(split.train.size());
  int since_best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::mt19937_64 shuffle_rng(derive_seed(tc.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tc.batch_size)) {
      ps.zero_grad();
      const auto end = std::min(order.size(), b + static_cast<std::size_t>(tc.batch_size));
      for (std::size_t k = b; k < end; ++k) {
        const auto& w = split.train[order[k]];
        const double loss = model::window_nll_backward(cfg, ps, data, w, tc.loss_range());
        if (!std::isfinite(loss) || !ps.grads_finite()) {
          ps.zero_grad();
          detail::dump_window(tc.dump_dir, panel, w, order[k]);
          throw Error(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + ", window " +
                                                    std::to_string(order[k]) + " (start day " +
                                                    std::to_string(w.start) + ")");
        }
        loss_sum += loss;
      }
      nn::clip_grad_norm(ps, tc.clip_norm);
      nn::adam_update(adam, ps);
    }

    auto val = validate_windows(cfg, ps, data, split.validation, tc);
    const double val_nll = mean_window_nll(cfg, ps, data, split.validation, tc.loss_range());
    rep.epochs.push_back({epoch, loss_sum / static_cast<double>(order.size()), val.nd, val.nrmse, val_nll});
    const double score = tc.select == Selection::ValidationNd ? val.nd : val_nll;
    if (score < best_score) {
      best_score = score;
      rep.best_nd = val.nd;
      rep.best_epoch = epoch;
      result.best = ps;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      rep.stopped_early = epoch < tc.epochs;
      break;
    }
  }
  result.best.zero_grad();
  return result;
}

struct TracePoint {
  int epoch = 0;
  double nd = 0.0;
};

inline std::vector<TracePoint> nd_vs_epoch_trace(const TrainReport& report) {
  std::vector<TracePoint> out;
  for (const auto& e : report.epochs) out.push_back({e.epoch, e.val_nd});
  return out;
}

/// CSV `epoch,nd` or, with a paired run, `epoch,nd_with_covariates,nd_without_covariates`
/// (empty cell where one run stopped earlier).
inline void write_trace(std::ostream& out, const TrainReport& report, const TrainReport* paired = nullptr) {
  const auto a = nd_vs_epoch_trace(report);
  if (!paired) {
    out << "epoch,nd\n";
    for (const auto& p : a) out << p.epoch << ',' << format_double(p.nd) << '\n';
    return;
  }
  const auto b = nd_vs_epoch_trace(*paired);
  out << "epoch,nd_with_covariates,nd_without_covariates\n";
  for (std::size_t k = 0; k < std::max(a.size(), b.size()); ++k) {
    out << k + 1 << ',';
    if (k < a.size()) out << format_double(a[k].nd);
    out << ',';
    if (k < b.size()) out << format_double(b[k].nd);
    out << '\n';
  }
}

}  // namespace arm3d::training
