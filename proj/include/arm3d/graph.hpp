#pragma once

// Dynamic mobility graph: Pearson-weighted daily adjacency, row-stochastic
// transition matrices and the masked diffusion convolution.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "arm3d/common.hpp"
#include "arm3d/data_ingest.hpp"

namespace arm3d::graph {

inline double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw Error(ErrorCode::LengthMismatch, "pearson: lengths " + std::to_string(x.size()) +
                                               " and " + std::to_string(y.size()));
  if (x.size() < 2) throw Error(ErrorCode::LengthMismatch, "pearson: need at least 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double dx = x[k] - mx;
    const double dy = y[k] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::ConstantVector, "pearson: constant input");
  // sxx * syy is commutative, so swapping the arguments gives the same bits.
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Daily origin->destination visit counts aligned to a node order and day range.
struct MobilityCube {
  std::vector<std::string> node_ids;
  data::Date start;
  std::vector<Matrix> visits;  // per day, N x N, visits(i, j) = trips i -> j

  int n_nodes() const { return static_cast<int>(node_ids.size()); }
  int n_days() const { return static_cast<int>(visits.size()); }

  static MobilityCube from_records(const std::vector<data::MobilityRecord>& records,
                                   const std::vector<std::string>& nodes, data::Date start,
                                   int n_days) {
    MobilityCube cube;
    cube.node_ids = nodes;
    cube.start = start;
    const auto n = static_cast<Eigen::Index>(nodes.size());
    cube.visits.assign(static_cast<std::size_t>(n_days), Matrix::Zero(n, n));
    std::map<std::string, Eigen::Index> index;
    for (Eigen::Index i = 0; i < n; ++i) index[nodes[static_cast<std::size_t>(i)]] = i;
    for (const auto& r : records) {
      const int d = r.date - start;
      if (d < 0 || d >= n_days) continue;
      auto o = index.find(r.origin_fips);
      auto t = index.find(r.dest_fips);
      if (o == index.end() || t == index.end()) continue;
      cube.visits[static_cast<std::size_t>(d)](o->second, t->second) +=
          static_cast<double>(r.aggregated_visits);
    }
    return cube;
  }

  MobilityCube select_nodes(const std::vector<int>& rows) const {
    MobilityCube out;
    out.start = start;
    for (int r : rows) out.node_ids.push_back(node_ids[static_cast<std::size_t>(r)]);
    const auto m = static_cast<Eigen::Index>(rows.size());
    for (const auto& v : visits) {
      Matrix sub(m, m);
      for (Eigen::Index a = 0; a < m; ++a)
        for (Eigen::Index b = 0; b < m; ++b) sub(a, b) = v(rows[a], rows[b]);
      out.visits.push_back(std::move(sub));
    }
    return out;
  }
};

struct AdjacencyOptions {
  double threshold = 200.0;  // minimum day-t visits i -> j for an edge
  int window = 14;           // trailing days used for the correlation
};

/// A_t(i, j) = Pearson correlation of the trailing outbound-visit series of i
/// and j when visits i -> j on day t reach the threshold, else 0. A_t(i, i) = 1.
/// Pairs where either series is constant over the window get no edge.
inline Matrix build_daily_adjacency(const MobilityCube& cube, int day,
                                    const AdjacencyOptions& opt = {}) {
  if (day < 0 || day >= cube.n_days())
    throw Error(ErrorCode::InsufficientHistory, "day " + std::to_string(day) + " out of range");
  const int first = std::max(0, day - opt.window + 1);
  const int len = day - first + 1;
  if (len < 2)
    throw Error(ErrorCode::InsufficientHistory,
                "day " + std::to_string(day) + " has " + std::to_string(len) + " day(s) of history");
  const int n = cube.n_nodes();
  Matrix series(n, len);
  for (int k = 0; k < len; ++k)
    series.col(k) = cube.visits[static_cast<std::size_t>(first + k)].rowwise().sum();

  Matrix a = Matrix::Identity(n, n);
  const Matrix& today = cube.visits[static_cast<std::size_t>(day)];
  std::vector<double> xi(static_cast<std::size_t>(len)), xj(static_cast<std::size_t>(len));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j || today(i, j) < opt.threshold) continue;
      for (int k = 0; k < len; ++k) {
        xi[static_cast<std::size_t>(k)] = series(i, k);
        xj[static_cast<std::size_t>(k)] = series(j, k);
      }
      try {
        a(i, j) = pearson_correlation(xi, xj);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ConstantVector) throw;
      }
    }
  }
  return a;
}

struct TransitionMatrix {
  Matrix matrix;

  int size() const { return static_cast<int>(matrix.rows()); }
};

/// Clamp negative weights to zero, then divide each nonzero row by its sum.
inline TransitionMatrix to_transition(const Matrix& a) {
  require_shape(a.rows() == a.cols(), "to_transition: adjacency must be square, got " + shape_str(a));
  Matrix t = a.cwiseMax(0.0);
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    const double s = t.row(i).sum();
    if (s > 0.0) t.row(i) /= s;
  }
  return {std::move(t)};
}

/// GC = (W o A~) X with o the elementwise product.
inline Matrix diffusion_convolve(const Matrix& w, const TransitionMatrix& tilde_a, const Matrix& x) {
  const auto& a = tilde_a.matrix;
  require_shape(w.rows() == a.rows() && w.cols() == a.cols() && a.rows() == a.cols() &&
                    x.rows() == a.cols(),
                "diffusion_convolve: W " + shape_str(w) + ", A~ " + shape_str(a) + ", X " +
                    shape_str(x));
  return w.cwiseProduct(a) * x;
}

struct DynamicAdjacency {
  std::vector<std::string> node_ids;
  std::vector<Matrix> per_day;
  AdjacencyOptions options;

  int n_days() const { return static_cast<int>(per_day.size()); }
};

/// Builds A_t for every day of the cube. Days without two days of history
/// (only day 0) use the identity: each node keeps its own covariates only.
inline DynamicAdjacency build_dynamic_adjacency(const MobilityCube& cube,
                                                const AdjacencyOptions& opt = {}) {
  DynamicAdjacency out;
  out.node_ids = cube.node_ids;
  out.options = opt;
  for (int d = 0; d < cube.n_days(); ++d) {
    if (d == 0 || opt.window < 2)
      out.per_day.push_back(Matrix::Identity(cube.n_nodes(), cube.n_nodes()));
    else
      out.per_day.push_back(build_daily_adjacency(cube, d, opt));
  }
  return out;
}

inline std::vector<TransitionMatrix> transitions(const DynamicAdjacency& adj) {
  std::vector<TransitionMatrix> out;
  out.reserve(adj.per_day.size());
  for (const auto& a : adj.per_day) out.push_back(to_transition(a));
  return out;
}

/// Sparse triplet dump `day,i,j,weight` of every nonzero entry.
inline void write_adjacency(std::ostream& out, const DynamicAdjacency& adj) {
  out << "day,i,j,weight\n";
  for (int d = 0; d < adj.n_days(); ++d) {
    const auto& a = adj.per_day[static_cast<std::size_t>(d)];
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        if (a(i, j) != 0.0) out << d << ',' << i << ',' << j << ',' << format_double(a(i, j)) << '\n';
  }
}

}  // namespace arm3d::graph
