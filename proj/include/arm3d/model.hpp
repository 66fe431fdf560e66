#pragma once

// The recurrent mixture-density forecaster. Every node runs the same stacked
// LSTM on [z_prev, GC row]; nodes interact only through the diffusion
// convolution GC_t = (W o A~_t) X_t. The plain forward path below is used for
// conditioning and sampling; the tape path computes training gradients.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "arm3d/autodiff.hpp"
#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"
#include "arm3d/density.hpp"
#include "arm3d/graph.hpp"
#include "arm3d/nn.hpp"

namespace arm3d::model {

inline constexpr int kDefaultSamples = 12;
inline constexpr int kDefaultHorizon = 7;

struct Arm3dnetConfig {
  int n_nodes = 1;
  int covariate_dim = 1;  // P
  int hidden_size = 16;
  int n_layers = 1;
  int mixture_k = density::kDefaultComponents;
  int horizon = kDefaultHorizon;
  int n_samples = kDefaultSamples;
  bool use_covariates = true;
  density::SigmaLink sigma_link = density::SigmaLink::Softplus;
  double sigma_floor = density::kDefaultSigmaFloor;

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw Error(ErrorCode::InvalidConfig, what);
    };
    need(n_nodes >= 1, "n_nodes must be positive");
    need(covariate_dim >= 0, "covariate_dim must be nonnegative");
    need(hidden_size >= 1, "hidden_size must be positive");
    need(n_layers >= 1, "n_layers must be positive");
    need(mixture_k >= 1 && mixture_k <= density::kMaxComponents, "mixture_k must be in [1, 16]");
    need(horizon >= 1, "horizon must be positive");
    need(n_samples >= 1, "n_samples must be positive");
    need(sigma_floor >= 0.0, "sigma_floor must be nonnegative");
  }

  density::HeadOptions head_options() const { return {sigma_link, sigma_floor}; }
};

namespace names {
inline constexpr const char* kGraphFilter = "gc.W";
inline std::string lstm(int layer, const char* part) { return "lstm" + std::to_string(layer) + "." + part; }
inline constexpr const char* kHeadPW = "head.p.W";
inline constexpr const char* kHeadPB = "head.p.b";
inline constexpr const char* kHeadMuW = "head.mu.W";
inline constexpr const char* kHeadMuB = "head.mu.b";
inline constexpr const char* kHeadSigmaW = "head.sigma.W";
inline constexpr const char* kHeadSigmaB = "head.sigma.b";
}  // namespace names

/// Fresh parameters: edge filter 1 + U(-0.01, 0.01); matrices U(+-1/sqrt(fan_in));
/// zero biases except the forget gate at +1.
inline nn::ParamStore init_params(const Arm3dnetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  nn::ParamStore ps;
  const int n = cfg.n_nodes, h = cfg.hidden_size, k = cfg.mixture_k;
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  Matrix w(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) w(i, j) = 1.0 + jitter(rng);
  ps.add(names::kGraphFilter, std::move(w));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const int in = l == 0 ? 1 + cfg.covariate_dim : h;
    ps.add(names::lstm(l, "Wx"), nn::uniform_init(4 * h, in, rng));
    ps.add(names::lstm(l, "Wh"), nn::uniform_init(4 * h, h, rng));
    Matrix b = Matrix::Zero(4 * h, 1);
    b.middleRows(h, h).setOnes();
    ps.add(names::lstm(l, "b"), std::move(b));
  }
  ps.add(names::kHeadPW, nn::uniform_init(k, h, rng));
  ps.add(names::kHeadPB, Matrix::Zero(k, 1));
  ps.add(names::kHeadMuW, nn::uniform_init(k, h, rng));
  ps.add(names::kHeadMuB, Matrix::Zero(k, 1));
  ps.add(names::kHeadSigmaW, nn::uniform_init(k, h, rng));
  ps.add(names::kHeadSigmaB, Matrix::Zero(k, 1));
  return ps;
}

/// Throws CheckpointMismatch unless every parameter exists with the shape cfg implies.
inline void check_params(const Arm3dnetConfig& cfg, const nn::ParamStore& ps) {
  const auto ref = init_params(cfg, 0);
  if (ref.size() != ps.size())
    throw Error(ErrorCode::CheckpointMismatch, "expected " + std::to_string(ref.size()) +
                                                   " tensors, found " + std::to_string(ps.size()));
  for (const auto& e : ref) {
    const auto& got = ps.at(e.name).value;
    if (got.rows() != e.value.rows() || got.cols() != e.value.cols())
      throw Error(ErrorCode::CheckpointMismatch, "'" + e.name + "' has shape " + shape_str(got) +
                                                     ", config implies " + shape_str(e.value));
  }
}

/// Plain copies of the parameter blocks used by the forward path.
struct ModelView {
  Matrix graph_filter;
  std::vector<nn::LstmCellParams> layers;
  density::GmmHeadParams head;

  ModelView(const Arm3dnetConfig& cfg, const nn::ParamStore& ps) {
    graph_filter = ps.at(names::kGraphFilter).value;
    for (int l = 0; l < cfg.n_layers; ++l)
      layers.push_back({ps.at(names::lstm(l, "Wx")).value, ps.at(names::lstm(l, "Wh")).value,
                        ps.at(names::lstm(l, "b")).value.col(0)});
    head.w_p = ps.at(names::kHeadPW).value;
    head.b_p = ps.at(names::kHeadPB).value.col(0);
    head.w_mu = ps.at(names::kHeadMuW).value;
    head.b_mu = ps.at(names::kHeadMuB).value.col(0);
    head.w_sigma = ps.at(names::kHeadSigmaW).value;
    head.b_sigma = ps.at(names::kHeadSigmaB).value.col(0);
  }
};

/// Per-layer LSTM state; columns are nodes.
struct RecurrentState {
  std::vector<Matrix> h;  // H x N per layer
  std::vector<Matrix> c;

  static RecurrentState zeros(const Arm3dnetConfig& cfg, int n_nodes) {
    RecurrentState s;
    for (int l = 0; l < cfg.n_layers; ++l) {
      s.h.push_back(Matrix::Zero(cfg.hidden_size, n_nodes));
      s.c.push_back(Matrix::Zero(cfg.hidden_size, n_nodes));
    }
    return s;
  }
};

struct StepInput {
  Matrix z_prev;  // 1 x N
  Matrix gc;      // N x P, graph-convolved covariates for this step
  RecurrentState state;
};

struct StepOutput {
  std::vector<density::GmmParams> mixtures;  // one per node
  RecurrentState state;
};

inline Matrix graph_convolve(const Arm3dnetConfig& cfg, const Matrix& graph_filter,
                             const graph::TransitionMatrix& tilde_a, const Matrix& x) {
  if (!cfg.use_covariates) return Matrix::Zero(x.rows(), x.cols());
  return graph::diffusion_convolve(graph_filter, tilde_a, x);
}

inline StepOutput forward_step(const Arm3dnetConfig& cfg, const ModelView& view, const StepInput& in) {
  const auto n = in.z_prev.cols();
  require_shape(in.z_prev.rows() == 1 && in.gc.rows() == n && in.gc.cols() == cfg.covariate_dim &&
                    static_cast<int>(in.state.h.size()) == cfg.n_layers &&
                    static_cast<int>(in.state.c.size()) == cfg.n_layers,
                "forward_step: z_prev " + shape_str(in.z_prev) + ", gc " + shape_str(in.gc));
  Matrix x(1 + cfg.covariate_dim, n);
  x << in.z_prev, in.gc.transpose();
  StepOutput out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto [h, c] = nn::lstm_step(view.layers[static_cast<std::size_t>(l)], x,
                                in.state.h[static_cast<std::size_t>(l)],
                                in.state.c[static_cast<std::size_t>(l)]);
    x = h;
    out.state.h.push_back(std::move(h));
    out.state.c.push_back(std::move(c));
  }
  const auto opt = cfg.head_options();
  for (Eigen::Index i = 0; i < n; ++i) out.mixtures.push_back(density::gmm_head(x.col(i), view.head, opt));
  return out;
}

inline StepOutput forward_step(const Arm3dnetConfig& cfg, const nn::ParamStore& ps, const StepInput& in) {
  return forward_step(cfg, ModelView(cfg, ps), in);
}

/// Contiguous slice of the panel: conditioning days [start, start + cond_len)
/// followed by prediction days [start + cond_len, start + cond_len + pred_len).
struct Window {
  int start = 0;
  int cond_len = 1;
  int pred_len = 1;

  int end() const { return start + cond_len + pred_len; }
  bool operator==(const Window&) const = default;
};

/// Panel targets/covariates together with one transition matrix per panel day.
struct SeriesData {
  const data::TimeSeriesPanel* panel = nullptr;
  const std::vector<graph::TransitionMatrix>* transitions = nullptr;

  void check(const Arm3dnetConfig& cfg) const {
    require_shape(panel && transitions, "SeriesData: missing panel or transitions");
    require_shape(panel->n_nodes() == cfg.n_nodes && panel->n_features() == cfg.covariate_dim,
                  "SeriesData: panel is " + std::to_string(panel->n_nodes()) + " nodes x " +
                      std::to_string(panel->n_features()) + " features, model expects " +
                      std::to_string(cfg.n_nodes) + " x " + std::to_string(cfg.covariate_dim));
    require_shape(static_cast<int>(transitions->size()) == panel->n_days(),
                  "SeriesData: need one transition matrix per day");
  }
};

inline void check_window(const SeriesData& data, const Window& w, bool need_prediction_targets) {
  const int last = need_prediction_targets ? w.end() : w.start + w.cond_len;
  if (w.start < 0 || w.cond_len < 1 || w.pred_len < 0 || last > data.panel->n_days())
    throw Error(ErrorCode::WindowTooLong, "window [" + std::to_string(w.start) + ", " +
                                              std::to_string(last) + ") exceeds T=" +
                                              std::to_string(data.panel->n_days()));
  if (!data.panel->targets.middleCols(w.start, last - w.start).allFinite())
    throw Error(ErrorCode::MissingTargets, "window starting at day " + std::to_string(w.start) +
                                               " has missing targets");
}

struct ConditionResult {
  RecurrentState state;  // after consuming the last conditioning day
  Matrix z_last;         // 1 x N, last observed targets
  Matrix step_nll;       // N x cond_len, per node and conditioning step
};

/// Teacher-forced unroll over the conditioning range: each step consumes the
/// observed previous target (zero before the first day of the window).
inline ConditionResult condition(const Arm3dnetConfig& cfg, const nn::ParamStore& ps,
                                 const SeriesData& data, const Window& w) {
  data.check(cfg);
  check_window(data, w, false);
  const ModelView view(cfg, ps);
  const int n = cfg.n_nodes;
  const auto& z = data.panel->targets;
  ConditionResult res;
  res.state = RecurrentState::zeros(cfg, n);
  res.step_nll = Matrix::Zero(n, w.cond_len);
  Matrix z_prev = Matrix::Zero(1, n);
  for (int s = 0; s < w.cond_len; ++s) {
    const int d = w.start + s;
    StepInput in{z_prev,
                 graph_convolve(cfg, view.graph_filter, (*data.transitions)[static_cast<std::size_t>(d)],
                                data.panel->covariates[static_cast<std::size_t>(d)]),
                 std::move(res.state)};
    auto out = forward_step(cfg, view, in);
    for (int i = 0; i < n; ++i)
      res.step_nll(i, s) = density::gmm_nll(out.mixtures[static_cast<std::size_t>(i)], z(i, d));
    res.state = std::move(out.state);
    z_prev = z.col(d).transpose();
  }
  res.z_last = z_prev;
  return res;
}

enum class LossRange { Prediction, Full };

/// Mean NLL over (node, step) pairs, teacher-forced throughout. Plain path.
inline double window_nll(const Arm3dnetConfig& cfg, const nn::ParamStore& ps, const SeriesData& data,
                         const Window& w, LossRange range = LossRange::Prediction) {
  data.check(cfg);
  check_window(data, w, true);
  const ModelView view(cfg, ps);
  const int n = cfg.n_nodes;
  const auto& z = data.panel->targets;
  RecurrentState state = RecurrentState::zeros(cfg, n);
  Matrix z_prev = Matrix::Zero(1, n);
  const int first_scored = range == LossRange::Prediction ? w.cond_len : 0;
  const int steps = w.cond_len + w.pred_len;
  if (steps <= first_scored) throw Error(ErrorCode::MissingTargets, "window has no scored steps");
  double total = 0.0;
  for (int s = 0; s < steps; ++s) {
    const int d = w.start + s;
    StepInput in{z_prev,
                 graph_convolve(cfg, view.graph_filter, (*data.transitions)[static_cast<std::size_t>(d)],
                                data.panel->covariates[static_cast<std::size_t>(d)]),
                 std::move(state)};
    auto out = forward_step(cfg, view, in);
    if (s >= first_scored)
      for (int i = 0; i < n; ++i) total += density::gmm_nll(out.mixtures[static_cast<std::size_t>(i)], z(i, d));
    state = std::move(out.state);
    z_prev = z.col(d).transpose();
  }
  return total / static_cast<double>(n * (steps - first_scored));
}

/// Records the same computation as window_nll on a tape and back-propagates
/// through the unrolled sequence, accumulating gradients into ps.
inline double window_nll_backward(const Arm3dnetConfig& cfg, nn::ParamStore& ps, const SeriesData& data,
                                  const Window& w, LossRange range = LossRange::Prediction) {
  data.check(cfg);
  check_window(data, w, true);
  using namespace nn;
  Tape tape;
  const int n = cfg.n_nodes, hsz = cfg.hidden_size;
  const auto& z = data.panel->targets;

  Var w_gc = tape.parameter(ps, names::kGraphFilter);
  std::vector<Var> wx, wh, bias;
  for (int l = 0; l < cfg.n_layers; ++l) {
    wx.push_back(tape.parameter(ps, names::lstm(l, "Wx")));
    wh.push_back(tape.parameter(ps, names::lstm(l, "Wh")));
    bias.push_back(tape.parameter(ps, names::lstm(l, "b")));
  }
  Var hp_w = tape.parameter(ps, names::kHeadPW), hp_b = tape.parameter(ps, names::kHeadPB);
  Var hm_w = tape.parameter(ps, names::kHeadMuW), hm_b = tape.parameter(ps, names::kHeadMuB);
  Var hs_w = tape.parameter(ps, names::kHeadSigmaW), hs_b = tape.parameter(ps, names::kHeadSigmaB);

  std::vector<Var> h, c;
  for (int l = 0; l < cfg.n_layers; ++l) {
    h.push_back(tape.constant(Matrix::Zero(hsz, n)));
    c.push_back(tape.constant(Matrix::Zero(hsz, n)));
  }
  const int first_scored = range == LossRange::Prediction ? w.cond_len : 0;
  const int steps = w.cond_len + w.pred_len;
  if (steps <= first_scored) throw Error(ErrorCode::MissingTargets, "window has no scored steps");
  const Matrix weights = Matrix::Constant(1, n, 1.0 / static_cast<double>(n * (steps - first_scored)));
  Matrix z_prev = Matrix::Zero(1, n);
  std::vector<Var> step_losses;
  for (int s = 0; s < steps; ++s) {
    const int d = w.start + s;
    Var zp = tape.constant(z_prev);
    Var x;
    if (cfg.use_covariates) {
      Var cov = tape.constant(data.panel->covariates[static_cast<std::size_t>(d)]);
      Var gc = masked_matmul(tape, w_gc, (*data.transitions)[static_cast<std::size_t>(d)].matrix, cov);
      x = vconcat(tape, zp, transpose(tape, gc));
    } else {
      x = vconcat(tape, zp, tape.constant(Matrix::Zero(cfg.covariate_dim, n)));
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      Var gates = add_bias(tape, add(tape, matmul(tape, wx[li], x), matmul(tape, wh[li], h[li])), bias[li]);
      Var ig = sigmoid(tape, rows(tape, gates, 0, hsz));
      Var fg = sigmoid(tape, rows(tape, gates, hsz, hsz));
      Var gg = tanh(tape, rows(tape, gates, 2 * hsz, hsz));
      Var og = sigmoid(tape, rows(tape, gates, 3 * hsz, hsz));
      c[li] = add(tape, hadamard(tape, fg, c[li]), hadamard(tape, ig, gg));
      h[li] = hadamard(tape, og, tanh(tape, c[li]));
      x = h[li];
    }
    if (s >= first_scored) {
      Var logits = add_bias(tape, matmul(tape, hp_w, x), hp_b);
      Var mu = add_bias(tape, matmul(tape, hm_w, x), hm_b);
      Var raw = add_bias(tape, matmul(tape, hs_w, x), hs_b);
      Var sig = cfg.sigma_link == density::SigmaLink::Softplus ? softplus(tape, raw) : exp(tape, raw);
      if (cfg.sigma_floor != 0.0) sig = add_scalar(tape, sig, cfg.sigma_floor);
      step_losses.push_back(gmm_nll(tape, logits, mu, sig, z.col(d).transpose(), weights));
    }
    z_prev = z.col(d).transpose();
  }
  Var loss = step_losses.front();
  for (std::size_t k = 1; k < step_losses.size(); ++k) loss = add(tape, loss, step_losses[k]);
  const double value = tape.scalar(loss);
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  return value;
}

struct ForecastArtifact {
  std::vector<Matrix> samples;  // S entries, each N x H
  Matrix q10, q50, q90;         // N x H
  Matrix point;                 // N x H, mean over trajectories of the mixture means

  int n_samples() const { return static_cast<int>(samples.size()); }
};

/// Linear-interpolation quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

/// Per-step inputs for the prediction range.
struct FutureInputs {
  std::vector<Matrix> covariates;                    // H entries, N x P
  std::vector<graph::TransitionMatrix> transitions;  // H entries
};

/// Prediction-range inputs for window w. With hold_last the covariates and
/// graph of the last conditioning day are repeated over the horizon.
inline FutureInputs future_inputs(const SeriesData& data, const Window& w, bool hold_last) {
  FutureInputs f;
  const int last_cond = w.start + w.cond_len - 1;
  if (!hold_last && w.end() > data.panel->n_days())
    throw Error(ErrorCode::HorizonTooLong, "horizon runs past the available covariates (T=" +
                                               std::to_string(data.panel->n_days()) + ")");
  for (int s = 0; s < w.pred_len; ++s) {
    const int d = hold_last ? last_cond : w.start + w.cond_len + s;
    f.covariates.push_back(data.panel->covariates[static_cast<std::size_t>(d)]);
    f.transitions.push_back((*data.transitions)[static_cast<std::size_t>(d)]);
  }
  return f;
}

/// Draws n_samples trajectories, feeding each drawn value back as the next
/// step's previous target. Trajectory s uses its own RNG stream.
inline ForecastArtifact ancestral_sample(const Arm3dnetConfig& cfg, const nn::ParamStore& ps,
                                         const ConditionResult& cond, const FutureInputs& future,
                                         std::uint64_t seed) {
  const ModelView view(cfg, ps);
  const int n = static_cast<int>(cond.z_last.cols());
  const int horizon = static_cast<int>(future.covariates.size());
  require_shape(static_cast<int>(future.transitions.size()) == horizon,
                "ancestral_sample: covariate and transition horizons differ");
  std::vector<Matrix> gcs;
  for (int s = 0; s < horizon; ++s)
    gcs.push_back(graph_convolve(cfg, view.graph_filter, future.transitions[static_cast<std::size_t>(s)],
                                 future.covariates[static_cast<std::size_t>(s)]));

  ForecastArtifact art;
  Matrix mean_sum = Matrix::Zero(n, horizon);
  for (int traj = 0; traj < cfg.n_samples; ++traj) {
    density::Rng rng(derive_seed(seed, "trajectory", static_cast<std::uint64_t>(traj)));
    Matrix path(n, horizon);
    RecurrentState state = cond.state;
    Matrix z_prev = cond.z_last;
    for (int s = 0; s < horizon; ++s) {
      auto out = forward_step(cfg, view, StepInput{z_prev, gcs[static_cast<std::size_t>(s)], std::move(state)});
      for (int i = 0; i < n; ++i) {
        const auto& mix = out.mixtures[static_cast<std::size_t>(i)];
        path(i, s) = density::gmm_sample(mix, rng);
        mean_sum(i, s) += density::gmm_moments(mix).mean;
      }
      state = std::move(out.state);
      z_prev = path.col(s).transpose();
    }
    art.samples.push_back(std::move(path));
  }
  art.point = mean_sum / static_cast<double>(cfg.n_samples);
  art.q10.resize(n, horizon);
  art.q50.resize(n, horizon);
  art.q90.resize(n, horizon);
  std::vector<double> column(static_cast<std::size_t>(cfg.n_samples));
  for (int i = 0; i < n; ++i)
    for (int s = 0; s < horizon; ++s) {
      for (int traj = 0; traj < cfg.n_samples; ++traj)
        column[static_cast<std::size_t>(traj)] = art.samples[static_cast<std::size_t>(traj)](i, s);
      art.q10(i, s) = quantile(column, 0.1);
      art.q50(i, s) = quantile(column, 0.5);
      art.q90(i, s) = quantile(column, 0.9);
    }
  return art;
}

/// Condition on the window's conditioning range, then sample its prediction range.
inline ForecastArtifact forecast_window(const Arm3dnetConfig& cfg, const nn::ParamStore& ps,
                                        const SeriesData& data, const Window& w, bool hold_last,
                                        std::uint64_t seed) {
  auto cond = condition(cfg, ps, data, w);
  return ancestral_sample(cfg, ps, cond, future_inputs(data, w, hold_last), seed);
}

}  // namespace arm3d::model
