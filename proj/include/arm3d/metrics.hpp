#pragma once

#include <cmath>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"

namespace arm3d::metrics {

namespace detail {
inline void check_pair(const Matrix& actual, const Matrix& predicted) {
  if (actual.rows() != predicted.rows() || actual.cols() != predicted.cols())
    throw Error(ErrorCode::ShapeMismatch,
                "actual " + shape_str(actual) + " vs predicted " + shape_str(predicted));
}
}  // namespace detail

/// sqrt(mean squared error) / mean |actual|, pooled over every cell.
inline double nrmse(const Matrix& actual, const Matrix& predicted) {
  detail::check_pair(actual, predicted);
  const double cells = static_cast<double>(actual.size());
  const double denom = actual.cwiseAbs().sum() / cells;
  if (!(denom > 0.0)) throw Error(ErrorCode::ZeroDenominator, "nrmse: actuals are all zero");
  return std::sqrt((actual - predicted).squaredNorm() / cells) / denom;
}

/// sum |actual - predicted| / sum |actual|.
inline double nd(const Matrix& actual, const Matrix& predicted) {
  detail::check_pair(actual, predicted);
  const double denom = actual.cwiseAbs().sum();
  if (!(denom > 0.0)) throw Error(ErrorCode::ZeroDenominator, "nd: actuals are all zero");
  return (actual - predicted).cwiseAbs().sum() / denom;
}

/// Every prediction-range value is the node's last conditioning-range observation.
inline Matrix persistence_baseline(const data::TimeSeriesPanel& panel) {
  const int cond = panel.cond_length();
  if (cond < 1) throw Error(ErrorCode::InvalidConfig, "persistence: empty conditioning range");
  return panel.targets.col(cond - 1).replicate(1, panel.horizon());
}

inline Matrix prediction_actuals(const data::TimeSeriesPanel& panel) {
  return panel.targets.rightCols(panel.horizon());
}

struct MetricsReport {
  std::string model;
  double nrmse = 0.0;
  double nd = 0.0;
  int n_series = 0;
  int horizon = 0;

  nlohmann::json to_json() const {
    return {{"model", model}, {"nrmse", nrmse}, {"nd", nd}, {"n_series", n_series}, {"horizon", horizon}};
  }
};

inline MetricsReport evaluate(const std::string& model, const Matrix& actual, const Matrix& predicted) {
  return {model, nrmse(actual, predicted), nd(actual, predicted), static_cast<int>(actual.rows()),
          static_cast<int>(actual.cols())};
}

inline void write_table(std::ostream& out, const std::vector<MetricsReport>& rows) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-16s | %8s | %8s\n", "Model", "NRMSE", "ND");
  out << buf << std::string(38, '-') << '\n';
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-16s | %8.3f | %8.3f\n", r.model.c_str(), r.nrmse, r.nd);
    out << buf;
  }
}

}  // namespace arm3d::metrics
