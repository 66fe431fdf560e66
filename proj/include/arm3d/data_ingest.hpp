#pragma once

// Panel construction from county case files and mobility records, covariate
// standardization and range splitting. The panel cache format lives here too.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "arm3d/common.hpp"

namespace arm3d::data {

/// Calendar day stored as days since 1970-01-01.
struct Date {
  int days = 0;

  static std::optional<Date> parse(std::string_view s) {
    // strict YYYY-MM-DD
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    long long y = 0, m = 0, d = 0;
    if (!parse_int(s.substr(0, 4), y) || !parse_int(s.substr(5, 2), m) ||
        !parse_int(s.substr(8, 2), d))
      return std::nullopt;
    using namespace std::chrono;
    year_month_day ymd{year{static_cast<int>(y)}, month{static_cast<unsigned>(m)},
                       day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    return Date{static_cast<int>(sys_days{ymd}.time_since_epoch().count())};
  }

  std::string str() const {
    using namespace std::chrono;
    year_month_day ymd{sys_days{std::chrono::days{days}}};
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
  }

  Date operator+(int n) const { return Date{days + n}; }
  int operator-(Date o) const { return days - o.days; }
  auto operator<=>(const Date&) const = default;
};

struct CovidRecord {
  Date date;
  std::string fips;
  long long cum_cases = 0;
  long long cum_deaths = 0;

  bool operator==(const CovidRecord&) const = default;
};

struct MobilityRecord {
  Date date;
  std::string origin_fips;
  std::string dest_fips;
  long long aggregated_visits = 0;
  double mean_distance = 0.0;
  long long device_count = 0;

  bool operator==(const MobilityRecord&) const = default;
};

inline constexpr const char* kCovidHeader = "date,fips,cum_cases,cum_deaths";
inline constexpr const char* kMobilityHeader =
    "date,origin_fips,dest_fips,aggregated_visits,mean_distance,device_count";

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

// Maps header names to column positions; throws MissingColumn for absent ones.
inline std::vector<std::size_t> resolve_columns(std::string_view header,
                                                const std::vector<std::string>& wanted) {
  auto cols = split_commas(header);
  std::vector<std::size_t> idx;
  for (const auto& name : wanted) {
    auto it = std::find_if(cols.begin(), cols.end(),
                           [&](std::string_view c) { return trim(c) == name; });
    if (it == cols.end()) throw Error(ErrorCode::MissingColumn, "missing column '" + name + "'");
    idx.push_back(static_cast<std::size_t>(it - cols.begin()));
  }
  return idx;
}

inline long long parse_count(std::string_view field, std::size_t line_no, const char* what) {
  long long v = 0;
  if (!parse_int(field, v) || v < 0)
    throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) + ": bad " + what +
                                             " '" + std::string(field) + "'");
  return v;
}

inline Date parse_date_field(std::string_view field, std::size_t line_no) {
  auto d = Date::parse(trim(field));
  if (!d)
    throw Error(ErrorCode::MalformedRow,
                "line " + std::to_string(line_no) + ": bad date '" + std::string(field) + "'");
  return *d;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  return in;
}

}  // namespace detail

inline std::vector<CovidRecord> parse_covid_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, "empty covid file");
  auto col = detail::resolve_columns(line, {"date", "fips", "cum_cases", "cum_deaths"});
  std::size_t need = *std::max_element(col.begin(), col.end()) + 1;

  std::vector<CovidRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_commas(line);
    if (f.size() < need)
      throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) + ": too few fields");
    CovidRecord r;
    r.date = detail::parse_date_field(f[col[0]], line_no);
    r.fips = std::string(detail::trim(f[col[1]]));
    if (r.fips.empty())
      throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) + ": empty fips");
    r.cum_cases = detail::parse_count(f[col[2]], line_no, "cum_cases");
    r.cum_deaths = detail::parse_count(f[col[3]], line_no, "cum_deaths");
    out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const CovidRecord& a, const CovidRecord& b) {
    return std::tie(a.fips, a.date) < std::tie(b.fips, b.date);
  });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].fips == out[i - 1].fips && out[i].date == out[i - 1].date)
      throw Error(ErrorCode::DuplicateKey,
                  "duplicate (" + out[i].date.str() + ", " + out[i].fips + ")");
  }
  return out;
}

inline std::vector<CovidRecord> load_covid_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_covid_csv(in);
}

inline void write_covid_csv(std::ostream& out, const std::vector<CovidRecord>& records) {
  out << kCovidHeader << '\n';
  for (const auto& r : records)
    out << r.date.str() << ',' << r.fips << ',' << r.cum_cases << ',' << r.cum_deaths << '\n';
}

inline std::vector<MobilityRecord> parse_mobility_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, "empty mobility file");
  auto col = detail::resolve_columns(line, {"date", "origin_fips", "dest_fips", "aggregated_visits",
                                            "mean_distance", "device_count"});
  std::size_t need = *std::max_element(col.begin(), col.end()) + 1;

  std::vector<MobilityRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_commas(line);
    if (f.size() < need)
      throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) + ": too few fields");
    MobilityRecord r;
    r.date = detail::parse_date_field(f[col[0]], line_no);
    r.origin_fips = std::string(detail::trim(f[col[1]]));
    r.dest_fips = std::string(detail::trim(f[col[2]]));
    if (r.origin_fips.empty() || r.dest_fips.empty())
      throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) + ": empty fips");
    r.aggregated_visits = detail::parse_count(f[col[3]], line_no, "aggregated_visits");
    if (!parse_double(f[col[4]], r.mean_distance) || !(r.mean_distance >= 0.0) ||
        !std::isfinite(r.mean_distance))
      throw Error(ErrorCode::MalformedRow, "line " + std::to_string(line_no) +
                                               ": bad mean_distance '" +
                                               std::string(f[col[4]]) + "'");
    r.device_count = detail::parse_count(f[col[5]], line_no, "device_count");
    out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const MobilityRecord& a, const MobilityRecord& b) {
    return std::tie(a.date, a.origin_fips, a.dest_fips) <
           std::tie(b.date, b.origin_fips, b.dest_fips);
  });
  for (std::size_t i = 1; i < out.size(); ++i) {
    const auto& a = out[i - 1];
    const auto& b = out[i];
    if (a.date == b.date && a.origin_fips == b.origin_fips && a.dest_fips == b.dest_fips)
      throw Error(ErrorCode::DuplicateKey, "duplicate (" + b.date.str() + ", " + b.origin_fips +
                                               " -> " + b.dest_fips + ")");
  }
  return out;
}

inline std::vector<MobilityRecord> load_mobility_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_mobility_csv(in);
}

inline void write_mobility_csv(std::ostream& out, const std::vector<MobilityRecord>& records) {
  out << kMobilityHeader << '\n';
  for (const auto& r : records)
    out << r.date.str() << ',' << r.origin_fips << ',' << r.dest_fips << ','
        << r.aggregated_visits << ',' << format_double(r.mean_distance) << ',' << r.device_count
        << '\n';
}

/// inflow[i] = sum over origins j of visits(j -> i) * cum_cases(j) on `date`.
inline std::vector<double> derive_inflow(const std::vector<MobilityRecord>& mobility,
                                         const std::vector<CovidRecord>& covid, Date date,
                                         const std::vector<std::string>& nodes) {
  std::map<std::string, double> cases;
  for (const auto& r : covid)
    if (r.date == date) cases[r.fips] = static_cast<double>(r.cum_cases);

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) index[nodes[i]] = i;

  std::vector<double> inflow(nodes.size(), 0.0);
  for (const auto& r : mobility) {
    if (r.date != date) continue;
    auto dest = index.find(r.dest_fips);
    if (dest == index.end()) continue;
    auto c = cases.find(r.origin_fips);
    if (c == cases.end())
      throw Error(ErrorCode::MissingCaseData,
                  "no case record for origin " + r.origin_fips + " on " + date.str());
    inflow[dest->second] += static_cast<double>(r.aggregated_visits) * c->second;
  }
  return inflow;
}

struct TimeSeriesPanel {
  std::vector<std::string> node_ids;
  std::vector<std::string> feature_names;
  Matrix targets;                  // N x T
  std::vector<Matrix> covariates;  // T entries, each N x P
  int t0 = 2;                      // 1-based first day of the prediction range
  std::optional<Date> start_date;

  int n_nodes() const { return static_cast<int>(targets.rows()); }
  int n_days() const { return static_cast<int>(targets.cols()); }
  int n_features() const { return static_cast<int>(feature_names.size()); }
  /// Days in the conditioning range [1, t0-1].
  int cond_length() const { return t0 - 1; }
  int horizon() const { return n_days() - t0 + 1; }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(node_ids.size());
    if (targets.rows() != n)
      throw Error(ErrorCode::ShapeMismatch, "targets rows != node count");
    if (static_cast<int>(covariates.size()) != n_days())
      throw Error(ErrorCode::ShapeMismatch, "covariate day count != T");
    for (const auto& x : covariates)
      if (x.rows() != n || x.cols() != n_features())
        throw Error(ErrorCode::ShapeMismatch, "covariate matrix has shape " + shape_str(x));
    if (!(1 < t0 && t0 <= n_days()))
      throw Error(ErrorCode::InvalidConfig, "t0 must satisfy 1 < t0 <= T");
    if (!targets.allFinite()) throw Error(ErrorCode::MissingTargets, "non-finite target entries");
    for (const auto& x : covariates)
      if (!x.allFinite()) throw Error(ErrorCode::MalformedRow, "non-finite covariate entries");
  }

  /// Panel restricted to a subset of nodes (by position), preserving order given.
  TimeSeriesPanel select_nodes(const std::vector<int>& rows) const {
    TimeSeriesPanel out;
    out.feature_names = feature_names;
    out.t0 = t0;
    out.start_date = start_date;
    out.targets.resize(static_cast<Eigen::Index>(rows.size()), targets.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      out.node_ids.push_back(node_ids[static_cast<std::size_t>(rows[k])]);
      out.targets.row(static_cast<Eigen::Index>(k)) = targets.row(rows[k]);
    }
    for (const auto& x : covariates) {
      Matrix sub(static_cast<Eigen::Index>(rows.size()), x.cols());
      for (std::size_t k = 0; k < rows.size(); ++k)
        sub.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
      out.covariates.push_back(std::move(sub));
    }
    return out;
  }
};

struct FeatureStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Standardizes every covariate feature with statistics pooled over all nodes
/// and the conditioning range; population standard deviation.
inline std::pair<TimeSeriesPanel, std::vector<FeatureStats>> standardize_covariates(
    const TimeSeriesPanel& panel) {
  const int p = panel.n_features();
  const int cond = panel.cond_length();
  std::vector<FeatureStats> stats(static_cast<std::size_t>(p));
  TimeSeriesPanel out = panel;
  for (int f = 0; f < p; ++f) {
    double sum = 0.0;
    std::size_t count = 0;
    for (int t = 0; t < cond; ++t) {
      sum += panel.covariates[static_cast<std::size_t>(t)].col(f).sum();
      count += static_cast<std::size_t>(panel.n_nodes());
    }
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (int t = 0; t < cond; ++t)
      ss += (panel.covariates[static_cast<std::size_t>(t)].col(f).array() - mean).square().sum();
    const double sd = std::sqrt(ss / static_cast<double>(count));
    if (!(sd > 0.0))
      throw Error(ErrorCode::DegenerateFeature,
                  "feature '" + panel.feature_names[static_cast<std::size_t>(f)] +
                      "' is constant over the conditioning range");
    stats[static_cast<std::size_t>(f)] = {mean, sd};
    for (auto& x : out.covariates) x.col(f) = (x.col(f).array() - mean) / sd;
  }
  return {std::move(out), std::move(stats)};
}

inline TimeSeriesPanel unstandardize_covariates(const TimeSeriesPanel& panel,
                                                const std::vector<FeatureStats>& stats) {
  if (static_cast<int>(stats.size()) != panel.n_features())
    throw Error(ErrorCode::ShapeMismatch, "feature stats count != feature count");
  TimeSeriesPanel out = panel;
  for (auto& x : out.covariates)
    for (int f = 0; f < panel.n_features(); ++f) {
      const auto& s = stats[static_cast<std::size_t>(f)];
      x.col(f) = x.col(f).array() * s.std + s.mean;
    }
  return out;
}

/// Sets t0 = T - horizon + 1 so that the prediction range has `horizon` steps.
inline TimeSeriesPanel split_ranges(const TimeSeriesPanel& panel, int horizon) {
  if (horizon < 1) throw Error(ErrorCode::InvalidConfig, "horizon must be positive");
  if (horizon >= panel.n_days())
    throw Error(ErrorCode::HorizonTooLong, "horizon " + std::to_string(horizon) +
                                               " leaves no conditioning range in T=" +
                                               std::to_string(panel.n_days()));
  TimeSeriesPanel out = panel;
  out.t0 = panel.n_days() - horizon + 1;
  return out;
}

/// Replaces targets with day-over-day increments; the first day is dropped.
inline TimeSeriesPanel difference_targets(const TimeSeriesPanel& panel) {
  if (panel.n_days() < 3 || panel.t0 <= 2)
    throw Error(ErrorCode::InvalidConfig, "differencing needs t0 > 2");
  TimeSeriesPanel out;
  out.node_ids = panel.node_ids;
  out.feature_names = panel.feature_names;
  const auto t = panel.targets.cols();
  out.targets = panel.targets.rightCols(t - 1) - panel.targets.leftCols(t - 1);
  out.covariates.assign(panel.covariates.begin() + 1, panel.covariates.end());
  out.t0 = panel.t0 - 1;
  if (panel.start_date) out.start_date = *panel.start_date + 1;
  return out;
}

enum class TargetKind { Cases, Deaths };

struct PanelBuildOptions {
  TargetKind target = TargetKind::Cases;
  bool forward_fill = false;
  std::vector<std::string> nodes;  // empty: every county present in the covid file
};

/// Joins case and mobility records into a dense panel with covariates
/// [inflow, mean_distance]. Inflow on day d uses cases from day d-1 (day 0 uses
/// its own). Missing (county, day) cells are an error unless forward_fill.
inline TimeSeriesPanel build_panel(const std::vector<CovidRecord>& covid,
                                   const std::vector<MobilityRecord>& mobility,
                                   const PanelBuildOptions& opt = {}) {
  if (covid.empty()) throw Error(ErrorCode::MissingTargets, "no covid records");
  std::vector<std::string> nodes = opt.nodes;
  if (nodes.empty()) {
    std::set<std::string> ids;
    for (const auto& r : covid) ids.insert(r.fips);
    nodes.assign(ids.begin(), ids.end());
  }
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) index[nodes[i]] = static_cast<int>(i);

  Date first = covid.front().date, last = covid.front().date;
  for (const auto& r : covid) {
    first = std::min(first, r.date);
    last = std::max(last, r.date);
  }
  const int n = static_cast<int>(nodes.size());
  const int t_days = (last - first) + 1;
  if (t_days < 2) throw Error(ErrorCode::InvalidConfig, "need at least two days of data");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  Matrix cases = Matrix::Constant(n, t_days, nan);
  Matrix deaths = Matrix::Constant(n, t_days, nan);
  for (const auto& r : covid) {
    auto it = index.find(r.fips);
    if (it == index.end()) continue;
    const int d = r.date - first;
    cases(it->second, d) = static_cast<double>(r.cum_cases);
    deaths(it->second, d) = static_cast<double>(r.cum_deaths);
  }

  // Per-day covariate sums; days with no mobility rows at all are gaps.
  std::vector<Matrix> cov(static_cast<std::size_t>(t_days), Matrix::Zero(n, 2));
  std::vector<bool> has_mobility(static_cast<std::size_t>(t_days), false);
  Matrix dist_weight = Matrix::Zero(n, t_days);
  for (const auto& r : mobility) {
    const int d = r.date - first;
    if (d < 0 || d >= t_days) continue;
    has_mobility[static_cast<std::size_t>(d)] = true;
    auto o = index.find(r.origin_fips);
    if (o != index.end()) {
      const double w = r.device_count > 0 ? static_cast<double>(r.device_count) : 1.0;
      cov[static_cast<std::size_t>(d)](o->second, 1) += w * r.mean_distance;
      dist_weight(o->second, d) += w;
    }
  }

  std::ostringstream gaps;
  bool any_gap = false;
  auto report_gap = [&](const std::string& what, int d) {
    any_gap = true;
    gaps << "\n  " << what << " missing on " << (first + d).str();
  };

  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < t_days; ++d) {
      if (!std::isnan(cases(i, d))) continue;
      if (opt.forward_fill && d > 0 && !std::isnan(cases(i, d - 1))) {
        cases(i, d) = cases(i, d - 1);
        deaths(i, d) = deaths(i, d - 1);
      } else {
        report_gap("county " + nodes[static_cast<std::size_t>(i)], d);
      }
    }
  }
  for (int d = 0; d < t_days; ++d) {
    if (has_mobility[static_cast<std::size_t>(d)]) continue;
    if (!(opt.forward_fill && d > 0)) report_gap("mobility", d);
  }
  if (any_gap) throw Error(ErrorCode::GapInSeries, "gaps in input data:" + gaps.str());

  // Inflow from the previous day's cumulative cases.
  for (const auto& r : mobility) {
    const int d = r.date - first;
    if (d < 0 || d >= t_days) continue;
    auto dest = index.find(r.dest_fips);
    if (dest == index.end()) continue;
    auto orig = index.find(r.origin_fips);
    if (orig == index.end())
      throw Error(ErrorCode::MissingCaseData,
                  "no case record for origin " + r.origin_fips + " on " + r.date.str());
    const int lag = d > 0 ? d - 1 : 0;
    cov[static_cast<std::size_t>(d)](dest->second, 0) +=
        static_cast<double>(r.aggregated_visits) * cases(orig->second, lag);
  }
  for (int d = 0; d < t_days; ++d) {
    auto& x = cov[static_cast<std::size_t>(d)];
    if (!has_mobility[static_cast<std::size_t>(d)]) {
      x = cov[static_cast<std::size_t>(d - 1)];  // forward-filled day
      continue;
    }
    for (int i = 0; i < n; ++i)
      x(i, 1) = dist_weight(i, d) > 0 ? x(i, 1) / dist_weight(i, d) : 0.0;
  }

  TimeSeriesPanel panel;
  panel.node_ids = nodes;
  panel.feature_names = {"inflow", "mean_distance"};
  panel.targets = opt.target == TargetKind::Cases ? cases : deaths;
  panel.covariates = std::move(cov);
  panel.t0 = t_days;
  panel.start_date = first;
  panel.validate();
  return panel;
}

// Panel cache: line-oriented text with '#' metadata lines followed by one row
// per (node, day). Numbers use shortest round-trip formatting, so a
// write/read cycle reproduces every double bit-exactly.
inline constexpr const char* kPanelMagic = "#arm3d-panel 1";

inline void write_panel(std::ostream& out, const TimeSeriesPanel& panel) {
  out << kPanelMagic << '\n';
  out << "#nodes " << panel.n_nodes() << '\n';
  for (const auto& id : panel.node_ids) out << "#node " << id << '\n';
  out << "#days " << panel.n_days() << '\n';
  out << "#t0 " << panel.t0 << '\n';
  if (panel.start_date) out << "#start_date " << panel.start_date->str() << '\n';
  out << "node,day,target";
  for (const auto& f : panel.feature_names) out << ',' << f;
  out << '\n';
  for (int i = 0; i < panel.n_nodes(); ++i)
    for (int t = 0; t < panel.n_days(); ++t) {
      out << i << ',' << t << ',' << format_double(panel.targets(i, t));
      for (int f = 0; f < panel.n_features(); ++f)
        out << ',' << format_double(panel.covariates[static_cast<std::size_t>(t)](i, f));
      out << '\n';
    }
}

inline TimeSeriesPanel read_panel(std::istream& in) {
  auto bad = [](const std::string& what) { return Error(ErrorCode::MalformedRow, "panel: " + what); };
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kPanelMagic)
    throw bad("missing '" + std::string(kPanelMagic) + "' header");
  TimeSeriesPanel panel;
  long long n = -1, t_days = -1, t0 = -1;
  while (std::getline(in, line)) {
    auto l = detail::trim(line);
    if (l.empty()) continue;
    if (l.front() != '#') break;
    auto sp = l.find(' ');
    auto key = l.substr(1, sp == std::string_view::npos ? l.size() : sp - 1);
    auto val = sp == std::string_view::npos ? std::string_view{} : l.substr(sp + 1);
    if (key == "nodes") {
      if (!parse_int(val, n)) throw bad("bad node count");
    } else if (key == "node") {
      panel.node_ids.emplace_back(val);
    } else if (key == "days") {
      if (!parse_int(val, t_days)) throw bad("bad day count");
    } else if (key == "t0") {
      if (!parse_int(val, t0)) throw bad("bad t0");
    } else if (key == "start_date") {
      panel.start_date = Date::parse(val);
      if (!panel.start_date) throw bad("bad start_date");
    }
  }
  if (n < 1 || t_days < 2 || t0 < 0 || static_cast<long long>(panel.node_ids.size()) != n)
    throw bad("incomplete metadata");

  auto cols = detail::split_commas(detail::trim(line));
  if (cols.size() < 3 || cols[0] != "node" || cols[1] != "day" || cols[2] != "target")
    throw Error(ErrorCode::MissingColumn, "panel: expected 'node,day,target' header");
  for (std::size_t c = 3; c < cols.size(); ++c) panel.feature_names.emplace_back(cols[c]);
  const int p = panel.n_features();

  panel.t0 = static_cast<int>(t0);
  panel.targets = Matrix::Constant(n, t_days, std::numeric_limits<double>::quiet_NaN());
  panel.covariates.assign(static_cast<std::size_t>(t_days), Matrix::Zero(n, p));
  long long rows = 0;
  while (std::getline(in, line)) {
    auto l = detail::trim(line);
    if (l.empty()) continue;
    auto f = detail::split_commas(l);
    long long i = 0, t = 0;
    if (static_cast<int>(f.size()) != 3 + p || !parse_int(f[0], i) || !parse_int(f[1], t) ||
        i < 0 || i >= n || t < 0 || t >= t_days)
      throw bad("bad row '" + std::string(l) + "'");
    double v = 0.0;
    if (!parse_double(f[2], v)) throw bad("bad target '" + std::string(f[2]) + "'");
    panel.targets(i, t) = v;
    for (int k = 0; k < p; ++k) {
      if (!parse_double(f[static_cast<std::size_t>(3 + k)], v)) throw bad("bad covariate");
      panel.covariates[static_cast<std::size_t>(t)](i, k) = v;
    }
    ++rows;
  }
  if (rows != n * t_days) throw bad("expected " + std::to_string(n * t_days) + " rows");
  panel.validate();
  return panel;
}

inline void save_panel(const std::string& path, const TimeSeriesPanel& panel) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  write_panel(out, panel);
  if (!out) throw Error(ErrorCode::IoError, "write failed for '" + path + "'");
}

inline TimeSeriesPanel load_panel(const std::string& path) {
  auto in = detail::open_input(path);
  return read_panel(in);
}

}  // namespace arm3d::data
