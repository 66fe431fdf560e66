#pragma once

// Run configuration and the synth / train / forecast / evaluate workflows.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"
#include "arm3d/graph.hpp"
#include "arm3d/metrics.hpp"
#include "arm3d/model.hpp"
#include "arm3d/nn.hpp"
#include "arm3d/synthetic.hpp"
#include "arm3d/training.hpp"

namespace arm3d::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum class DataSource { Synthetic, Files };
enum class ForecastOrigin { Holdout, End };

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";

  DataSource source = DataSource::Synthetic;
  data::SyntheticConfig synthetic;
  std::string covid_path;
  std::string mobility_path;
  data::PanelBuildOptions panel;
  bool difference = false;

  graph::AdjacencyOptions graph;
  model::Arm3dnetConfig model;
  training::TrainConfig train;
  bool paired_trace = false;  // also train with covariates zeroed and write both traces

  bool hold_last = true;
  ForecastOrigin origin = ForecastOrigin::Holdout;
  bool dump_samples = false;

  bool median = false;
  bool baseline = false;
  bool table = false;
  std::string forecast_path;  // evaluate input; default <out>/forecast.csv

  void validate() const {
    if (source == DataSource::Files && (covid_path.empty() || mobility_path.empty()))
      throw Error(ErrorCode::InvalidConfig, "data.covid and data.mobility are both required for file input");
    synthetic.validate();
    train.validate();
    auto m = model;  // sizes come from the data later
    m.n_nodes = std::max(m.n_nodes, 1);
    m.covariate_dim = std::max(m.covariate_dim, 0);
    m.validate();
    if (graph.threshold < 0.0) throw Error(ErrorCode::InvalidConfig, "graph.threshold must be >= 0");
    if (graph.window < 2) throw Error(ErrorCode::InvalidConfig, "graph.window must be >= 2");
  }
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

inline void set_path(json& root, const std::string& dotted, const json& value) {
  json* node = &root;
  std::size_t pos = 0;
  while (true) {
    const auto dot = dotted.find('.', pos);
    const std::string key = dotted.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw Error(ErrorCode::Usage, "bad --set key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null())
      throw Error(ErrorCode::Usage, "--set " + dotted + ": '" + key + "' is not a section");
    pos = dot + 1;
  }
}

inline double field_double(std::string_view f, const std::string& where) {
  double v = 0.0;
  if (!parse_double(f, v)) throw Error(ErrorCode::MalformedRow, where + ": bad number '" + std::string(f) + "'");
  return v;
}

inline int field_int(std::string_view f, const std::string& where) {
  long long v = 0;
  if (!parse_int(f, v)) throw Error(ErrorCode::MalformedRow, where + ": bad integer '" + std::string(f) + "'");
  return static_cast<int>(v);
}

}  // namespace detail

/// Applies `key.path=value`; the value is read as JSON when it parses, else as a string.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorCode::Usage, "--set expects key=value, got '" + assignment + "'");
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  detail::set_path(root, assignment.substr(0, eq), value);
}

inline RunConfig config_from_json(const json& j) {
  using detail::read_opt;
  static const std::set<std::string> known{"seed", "out", "data", "synthetic", "graph", "model",
                                           "train", "forecast", "evaluate"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw Error(ErrorCode::InvalidConfig, "unknown config section '" + k + "'");

  RunConfig c;
  try {
    read_opt(j, "seed", c.seed);
    read_opt(j, "out", c.out);
    const bool has_files = j.contains("data");
    const bool has_synth = j.contains("synthetic");
    if (has_files && has_synth)
      throw Error(ErrorCode::InvalidConfig, "config has both data and synthetic sections; pick one");
    c.source = has_files ? DataSource::Files : DataSource::Synthetic;
    if (has_files) {
      const auto& d = j.at("data");
      read_opt(d, "covid", c.covid_path);
      read_opt(d, "mobility", c.mobility_path);
      read_opt(d, "forward_fill", c.panel.forward_fill);
      read_opt(d, "difference", c.difference);
      read_opt(d, "nodes", c.panel.nodes);
      std::string target = "cases";
      read_opt(d, "target", target);
      if (target == "cases") c.panel.target = data::TargetKind::Cases;
      else if (target == "deaths") c.panel.target = data::TargetKind::Deaths;
      else throw Error(ErrorCode::InvalidConfig, "data.target must be cases or deaths");
    }
    if (has_synth) {
      const auto& s = j.at("synthetic");
      read_opt(s, "n_nodes", c.synthetic.n_nodes);
      read_opt(s, "t_days", c.synthetic.t_days);
      read_opt(s, "n_modes", c.synthetic.n_modes);
      read_opt(s, "edge_density", c.synthetic.edge_density);
      read_opt(s, "noise_scale", c.synthetic.noise_scale);
      read_opt(s, "coupling", c.synthetic.coupling);
      read_opt(s, "difference", c.difference);
    }
    if (j.contains("graph")) {
      read_opt(j.at("graph"), "threshold", c.graph.threshold);
      read_opt(j.at("graph"), "window", c.graph.window);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_opt(m, "hidden_size", c.model.hidden_size);
      read_opt(m, "n_layers", c.model.n_layers);
      read_opt(m, "mixture_k", c.model.mixture_k);
      read_opt(m, "horizon", c.model.horizon);
      read_opt(m, "n_samples", c.model.n_samples);
      read_opt(m, "use_covariates", c.model.use_covariates);
      read_opt(m, "sigma_floor", c.model.sigma_floor);
      std::string link = "softplus";
      read_opt(m, "sigma_link", link);
      if (link == "softplus") c.model.sigma_link = density::SigmaLink::Softplus;
      else if (link == "exp") c.model.sigma_link = density::SigmaLink::Exp;
      else throw Error(ErrorCode::InvalidConfig, "model.sigma_link must be softplus or exp");
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "patience", c.train.patience);
      read_opt(t, "lr", c.train.lr);
      read_opt(t, "beta1", c.train.beta1);
      read_opt(t, "beta2", c.train.beta2);
      read_opt(t, "eps", c.train.eps);
      read_opt(t, "clip_norm", c.train.clip_norm);
      read_opt(t, "cond_len", c.train.cond_len);
      read_opt(t, "stride", c.train.stride);
      read_opt(t, "batch_size", c.train.batch_size);
      read_opt(t, "validation_fraction", c.train.validation_fraction);
      read_opt(t, "full_range_loss", c.train.full_range_loss);
      std::string select = "nd";
      read_opt(t, "select", select);
      if (select == "nd") c.train.select = training::Selection::ValidationNd;
      else if (select == "nll") c.train.select = training::Selection::ValidationNll;
      else throw Error(ErrorCode::InvalidConfig, "train.select must be nd or nll");
      read_opt(t, "paired_trace", c.paired_trace);
    }
    if (j.contains("forecast")) {
      const auto& f = j.at("forecast");
      std::string cov = "hold_last";
      read_opt(f, "covariates", cov);
      if (cov == "hold_last") c.hold_last = true;
      else if (cov == "observed") c.hold_last = false;
      else throw Error(ErrorCode::InvalidConfig, "forecast.covariates must be hold_last or observed");
      std::string origin = "holdout";
      read_opt(f, "origin", origin);
      if (origin == "holdout") c.origin = ForecastOrigin::Holdout;
      else if (origin == "end") c.origin = ForecastOrigin::End;
      else throw Error(ErrorCode::InvalidConfig, "forecast.origin must be holdout or end");
      read_opt(f, "samples", c.dump_samples);
    }
    if (j.contains("evaluate")) {
      const auto& e = j.at("evaluate");
      read_opt(e, "median", c.median);
      read_opt(e, "baseline", c.baseline);
      read_opt(e, "table", c.table);
      read_opt(e, "forecast", c.forecast_path);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
  c.train.point = c.median ? training::PointSummary::SampleMedian : training::PointSummary::MixtureMean;
  c.validate();
  return c;
}

inline json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::InvalidConfig, "config " + path + " is not a JSON object");
  return j;
}

// ---------------------------------------------------------------------------

inline fs::path out_file(const RunConfig& c, const char* name) { return fs::path(c.out) / name; }

inline void ensure_out_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec || !fs::is_directory(c.out))
    throw Error(ErrorCode::IoError, "cannot create output directory " + c.out);
}

inline std::ofstream open_output(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + p.string());
  return out;
}

inline data::SyntheticConfig seeded_synthetic(const RunConfig& c) {
  auto s = c.synthetic;
  s.seed = derive_seed(c.seed, "data");
  return s;
}

/// Panel with the test split applied plus one transition matrix per day.
struct Dataset {
  data::TimeSeriesPanel panel;  // raw units, t0 = T - horizon + 1
  std::vector<graph::TransitionMatrix> transitions;
};

inline Dataset assemble(data::TimeSeriesPanel panel, const std::vector<data::MobilityRecord>& mobility,
                        const RunConfig& c) {
  if (!panel.start_date) throw Error(ErrorCode::MalformedRow, "panel has no start date");
  const auto cube = graph::MobilityCube::from_records(mobility, panel.node_ids, *panel.start_date, panel.n_days());
  auto trans = graph::transitions(graph::build_dynamic_adjacency(cube, c.graph));
  if (c.difference) {
    panel = data::difference_targets(panel);
    trans.erase(trans.begin());
  }
  return {data::split_ranges(panel, c.model.horizon), std::move(trans)};
}

inline Dataset load_dataset(const RunConfig& c) {
  if (c.source == DataSource::Files) {
    auto covid = data::load_covid_csv(c.covid_path);
    auto mobility = data::load_mobility_csv(c.mobility_path);
    return assemble(data::build_panel(covid, mobility, c.panel), mobility, c);
  }
  const auto panel_path = out_file(c, "panel.csv");
  const auto mobility_path = out_file(c, "mobility.csv");
  for (const auto& p : {panel_path, mobility_path})
    if (!fs::exists(p)) throw Error(ErrorCode::IoError, "missing " + p.string() + " (run synth first)");
  return assemble(data::load_panel(panel_path.string()), data::load_mobility_csv(mobility_path.string()), c);
}

inline json model_config_json(const model::Arm3dnetConfig& m) {
  return {{"n_nodes", m.n_nodes},
          {"covariate_dim", m.covariate_dim},
          {"hidden_size", m.hidden_size},
          {"n_layers", m.n_layers},
          {"mixture_k", m.mixture_k},
          {"horizon", m.horizon},
          {"n_samples", m.n_samples},
          {"use_covariates", m.use_covariates},
          {"sigma_link", m.sigma_link == density::SigmaLink::Exp ? "exp" : "softplus"},
          {"sigma_floor", m.sigma_floor}};
}

inline model::Arm3dnetConfig model_config_for(const RunConfig& c, const data::TimeSeriesPanel& panel) {
  auto m = c.model;
  m.n_nodes = panel.n_nodes();
  m.covariate_dim = panel.n_features();
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------

inline void cmd_synth(const RunConfig& c, std::ostream& log) {
  ensure_out_dir(c);
  const auto syn = data::generate_synthetic_panel(seeded_synthetic(c));
  {
    auto f = open_output(out_file(c, "panel.csv"));
    data::write_panel(f, syn.panel);
  }
  {
    auto f = open_output(out_file(c, "mobility.csv"));
    data::write_mobility_csv(f, syn.mobility);
  }
  {
    auto f = open_output(out_file(c, "generator.json"));
    f << syn.truth.to_json().dump(2) << '\n';
  }
  const auto& z = syn.panel.targets;
  log << "synth: " << syn.panel.n_nodes() << " nodes, " << syn.panel.n_days() << " days, "
      << syn.mobility.size() << " mobility rows\n"
      << "targets: mean " << format_double(z.mean()) << ", min " << format_double(z.minCoeff()) << ", max "
      << format_double(z.maxCoeff()) << '\n';
}

struct TrainOutcome {
  training::TrainResult result;
  training::Preprocessing pre;
  model::Arm3dnetConfig model;
};

inline TrainOutcome fit(const RunConfig& c, const Dataset& ds, bool use_covariates) {
  auto m = model_config_for(c, ds.panel);
  m.use_covariates = use_covariates;
  auto [prepared, pre] = training::fit_preprocessing(ds.panel);
  auto tc = c.train;
  tc.seed = derive_seed(c.seed, "train");
  tc.dump_dir = (fs::path(c.out) / "nonfinite").string();
  return {training::train(m, tc, prepared, ds.transitions), std::move(pre), m};
}

inline void cmd_train(const RunConfig& c, std::ostream& log) {
  ensure_out_dir(c);
  const auto ds = load_dataset(c);
  auto run = fit(c, ds, c.model.use_covariates);

  nn::Metadata meta;
  meta["model"] = model_config_json(run.model).dump();
  meta["preprocessing"] = run.pre.to_json().dump();
  meta["nodes"] = json(ds.panel.node_ids).dump();
  meta["cond_len"] = std::to_string(c.train.cond_len);
  meta["best_epoch"] = std::to_string(run.result.report.best_epoch);
  meta["best_nd"] = format_double(run.result.report.best_nd);
  nn::save_checkpoint(out_file(c, "checkpoint.bin").string(), run.result.best, meta);
  {
    auto f = open_output(out_file(c, "report.jsonl"));
    run.result.report.write_jsonl(f);
  }
  auto trace = open_output(out_file(c, "trace.csv"));
  if (c.paired_trace) {
    const auto other = fit(c, ds, !c.model.use_covariates);
    const auto& with = c.model.use_covariates ? run.result.report : other.result.report;
    const auto& without = c.model.use_covariates ? other.result.report : run.result.report;
    training::write_trace(trace, with, &without);
  } else {
    training::write_trace(trace, run.result.report);
  }
  const auto& rep = run.result.report;
  log << "train: " << rep.epochs.size() << " epochs" << (rep.stopped_early ? " (early stop)" : "")
      << ", best epoch " << rep.best_epoch << ", validation ND " << format_double(rep.best_nd) << '\n';
}

struct LoadedModel {
  nn::ParamStore params;
  model::Arm3dnetConfig model;
  training::Preprocessing pre;
  std::vector<std::string> nodes;
  int cond_len = 0;
};

inline LoadedModel load_model(const std::string& path) {
  auto [ps, meta] = nn::load_checkpoint(path);
  LoadedModel lm;
  try {
    const auto m = json::parse(meta.at("model"));
    auto& cfg = lm.model;
    cfg.n_nodes = m.at("n_nodes");
    cfg.covariate_dim = m.at("covariate_dim");
    cfg.hidden_size = m.at("hidden_size");
    cfg.n_layers = m.at("n_layers");
    cfg.mixture_k = m.at("mixture_k");
    cfg.horizon = m.at("horizon");
    cfg.n_samples = m.at("n_samples");
    cfg.use_covariates = m.at("use_covariates");
    cfg.sigma_link = m.at("sigma_link") == "exp" ? density::SigmaLink::Exp : density::SigmaLink::Softplus;
    cfg.sigma_floor = m.at("sigma_floor");
    lm.pre = training::Preprocessing::from_json(json::parse(meta.at("preprocessing")));
    lm.nodes = json::parse(meta.at("nodes")).get<std::vector<std::string>>();
    lm.cond_len = detail::field_int(meta.at("cond_len"), path);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CheckpointMismatch, path + ": incomplete metadata (" + e.what() + ")");
  }
  model::check_params(lm.model, ps);
  lm.params = std::move(ps);
  return lm;
}

inline void cmd_forecast(const RunConfig& c, std::ostream& log) {
  ensure_out_dir(c);
  const auto lm = load_model(out_file(c, "checkpoint.bin").string());
  const auto ds = load_dataset(c);
  if (ds.panel.node_ids != lm.nodes)
    throw Error(ErrorCode::CheckpointMismatch, "checkpoint nodes differ from the data's nodes");
  if (lm.model.horizon != c.model.horizon)
    throw Error(ErrorCode::CheckpointMismatch, "checkpoint horizon " + std::to_string(lm.model.horizon) +
                                                   " differs from configured " + std::to_string(c.model.horizon));
  const auto prepared = training::apply_preprocessing(ds.panel, lm.pre);
  const int origin = c.origin == ForecastOrigin::Holdout ? prepared.cond_length() : prepared.n_days();
  if (origin < lm.cond_len)
    throw Error(ErrorCode::InsufficientHistory, "need " + std::to_string(lm.cond_len) +
                                                    " conditioning days before the forecast origin");
  const model::Window w{origin - lm.cond_len, lm.cond_len, lm.model.horizon};
  const model::SeriesData sd{&prepared, &ds.transitions};
  const auto art = model::forecast_window(lm.model, lm.params, sd, w, c.hold_last, derive_seed(c.seed, "forecast"));

  const double s = lm.pre.target_scale;
  auto f = open_output(out_file(c, "forecast.csv"));
  f << "node,step,q10,q50,q90,mean\n";
  for (int i = 0; i < lm.model.n_nodes; ++i)
    for (int h = 0; h < lm.model.horizon; ++h)
      f << lm.nodes[static_cast<std::size_t>(i)] << ',' << h + 1 << ',' << format_double(art.q10(i, h) * s) << ','
        << format_double(art.q50(i, h) * s) << ',' << format_double(art.q90(i, h) * s) << ','
        << format_double(art.point(i, h) * s) << '\n';
  if (c.dump_samples) {
    auto g = open_output(out_file(c, "samples.csv"));
    g << "node,step,sample_idx,value\n";
    for (int i = 0; i < lm.model.n_nodes; ++i)
      for (int h = 0; h < lm.model.horizon; ++h)
        for (int k = 0; k < art.n_samples(); ++k)
          g << lm.nodes[static_cast<std::size_t>(i)] << ',' << h + 1 << ',' << k << ','
            << format_double(art.samples[static_cast<std::size_t>(k)](i, h) * s) << '\n';
  }
  log << "forecast: " << lm.model.n_nodes << " nodes x " << lm.model.horizon << " steps, "
      << art.n_samples() << " samples\n";
}

/// Forecast table keyed by node: one row per step, columns q10,q50,q90,mean.
struct ForecastTable {
  std::vector<std::string> nodes;  // in file order
  std::map<std::string, std::vector<std::array<double, 4>>> rows;
};

inline ForecastTable read_forecast(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read forecast " + path);
  ForecastTable t;
  std::string line;
  std::getline(in, line);
  if (data::detail::trim(line) != "node,step,q10,q50,q90,mean")
    throw Error(ErrorCode::MissingColumn, path + ": expected header node,step,q10,q50,q90,mean");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (data::detail::trim(line).empty()) continue;
    const auto f = data::detail::split_commas(line);
    if (f.size() != 6) throw Error(ErrorCode::MalformedRow, path + ":" + std::to_string(line_no) + ": expected 6 fields");
    const std::string node(data::detail::trim(f[0]));
    const std::string where = path + ":" + std::to_string(line_no);
    const int step = detail::field_int(f[1], where);
    auto& v = t.rows[node];
    if (v.empty()) t.nodes.push_back(node);
    if (step != static_cast<int>(v.size()) + 1)
      throw Error(ErrorCode::AlignmentError, path + ":" + std::to_string(line_no) + ": steps of node " + node +
                                                 " are not consecutive from 1");
    v.push_back({detail::field_double(f[2], where), detail::field_double(f[3], where),
                 detail::field_double(f[4], where), detail::field_double(f[5], where)});
  }
  return t;
}

inline std::vector<metrics::MetricsReport> cmd_evaluate(const RunConfig& c, std::ostream& log) {
  ensure_out_dir(c);
  const auto path = c.forecast_path.empty() ? out_file(c, "forecast.csv").string() : c.forecast_path;
  const auto fc = read_forecast(path);
  const auto ds = load_dataset(c);
  const auto& panel = ds.panel;

  std::vector<std::string> missing, extra;
  for (const auto& id : panel.node_ids)
    if (!fc.rows.count(id)) missing.push_back(id);
  const std::set<std::string> known(panel.node_ids.begin(), panel.node_ids.end());
  for (const auto& id : fc.nodes)
    if (!known.count(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "forecast and actuals cover different nodes;";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" ") + what + ":";
      for (const auto& id : ids) msg += " " + id;
    };
    list("extra in forecast", extra);
    list("missing from forecast", missing);
    throw Error(ErrorCode::AlignmentError, msg);
  }

  const int horizon = panel.horizon();
  Matrix pred(panel.n_nodes(), horizon);
  for (int i = 0; i < panel.n_nodes(); ++i) {
    const auto& v = fc.rows.at(panel.node_ids[static_cast<std::size_t>(i)]);
    if (static_cast<int>(v.size()) != horizon)
      throw Error(ErrorCode::AlignmentError, "node " + panel.node_ids[static_cast<std::size_t>(i)] + " has " +
                                                 std::to_string(v.size()) + " forecast steps, actuals have " +
                                                 std::to_string(horizon));
    for (int h = 0; h < horizon; ++h) pred(i, h) = v[static_cast<std::size_t>(h)][c.median ? 1 : 3];
  }
  const Matrix actual = metrics::prediction_actuals(panel);
  std::vector<metrics::MetricsReport> rows{metrics::evaluate("ARM3Dnet", actual, pred)};
  if (c.baseline) rows.push_back(metrics::evaluate("Persistence", actual, metrics::persistence_baseline(panel)));

  json out = json::array();
  for (const auto& r : rows) out.push_back(r.to_json());
  auto f = open_output(out_file(c, "metrics.json"));
  f << out.dump(2) << '\n';
  if (c.table) {
    metrics::write_table(log, rows);
  } else {
    for (const auto& r : rows)
      log << r.model << ": NRMSE " << format_double(r.nrmse) << ", ND " << format_double(r.nd) << '\n';
  }
  return rows;
}

}  // namespace arm3d::cli
