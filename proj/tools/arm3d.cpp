#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "arm3d/cli.hpp"

int main(int argc, char** argv) {
  using namespace arm3d;
  CLI::App app{"arm3d: probabilistic multi-node forecasting with mobility graphs"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> sets;
  bool no_covariates = false, difference = false, forward_fill = false;
  bool median = false, baseline = false, table = false, samples = false, paired = false;
  bool hold_last = false, observed = false;
  std::string forecast_path;

  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "top-level seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--set", sets, "override a config value, key.path=value")->take_all();
  app.add_flag("--no-covariates", no_covariates, "zero the graph-convolved covariate input");
  app.add_flag("--difference", difference, "model day-over-day differences");
  app.add_flag("--forward-fill", forward_fill, "forward-fill missing days in the case data");
  app.add_flag("--median", median, "use the sample median as point forecast");
  app.add_flag("--baseline", baseline, "add the persistence baseline to the metrics");
  app.add_flag("--table", table, "print a comparison table");
  app.add_flag("--samples", samples, "also write every sampled trajectory");
  app.add_flag("--paired", paired, "also train with the covariate input switched, for the ND trace");
  auto* hl = app.add_flag("--hold-last", hold_last, "repeat the last observed covariates over the horizon");
  app.add_flag("--observed-covariates", observed, "use observed future covariates")->excludes(hl);
  app.add_option("--forecast", forecast_path, "forecast file to evaluate");

  auto* synth = app.add_subcommand("synth", "generate a synthetic panel");
  auto* train = app.add_subcommand("train", "train and write the best checkpoint");
  auto* forecast = app.add_subcommand("forecast", "sample forecasts from a checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "score a forecast against actuals");
  for (auto* sub : {synth, train, forecast, evaluate}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    auto j = cli::load_config_json(config_path);
    for (const auto& s : sets) cli::apply_override(j, s);
    if (seed) j["seed"] = *seed;
    if (out) j["out"] = *out;
    if (no_covariates) j["model"]["use_covariates"] = false;
    if (difference) j[j.contains("data") ? "data" : "synthetic"]["difference"] = true;
    if (forward_fill) j["data"]["forward_fill"] = true;
    if (median) j["evaluate"]["median"] = true;
    if (baseline) j["evaluate"]["baseline"] = true;
    if (table) j["evaluate"]["table"] = true;
    if (!forecast_path.empty()) j["evaluate"]["forecast"] = forecast_path;
    if (samples) j["forecast"]["samples"] = true;
    if (hold_last) j["forecast"]["covariates"] = "hold_last";
    if (observed) j["forecast"]["covariates"] = "observed";
    if (paired) j["train"]["paired_trace"] = true;
    const auto cfg = cli::config_from_json(j);

    if (synth->parsed()) cli::cmd_synth(cfg, std::cout);
    else if (train->parsed()) cli::cmd_train(cfg, std::cout);
    else if (forecast->parsed()) cli::cmd_forecast(cfg, std::cout);
    else cli::cmd_evaluate(cfg, std::cout);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
