#pragma once

// Dense maps, activations, the LSTM cell, the parameter store, Adam and the
// binary checkpoint format. Everything is float64.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "arm3d/common.hpp"

namespace arm3d::nn {

/// Returns W x + b; output dimension is W.rows(). Columns of x are a batch.
inline Matrix dense_forward(const Matrix& w, const Vector& b, const Matrix& x) {
  require_shape(w.cols() == x.rows() && w.rows() == b.size(),
                "dense: W " + shape_str(w) + ", b " + std::to_string(b.size()) + ", x " +
                    shape_str(x));
  return (w * x).colwise() + b;
}

inline Vector dense_forward(const Matrix& w, const Vector& b, const Vector& x) {
  Matrix out = dense_forward(w, b, Matrix(x));
  return out.col(0);
}

inline double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix softplus(const Matrix& x) { return x.unaryExpr([](double v) { return softplus(v); }); }
inline Matrix sigmoid(const Matrix& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

/// Max-shifted softmax.
inline Vector softmax(const Vector& v) {
  const double m = v.maxCoeff();
  Vector e = (v.array() - m).exp();
  return e / e.sum();
}

/// log(sum(exp(v))) without overflow.
inline double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

/// Gate blocks are stacked [input; forget; candidate; output] along the rows.
struct LstmCellParams {
  Matrix w_x;  // 4H x I
  Matrix w_h;  // 4H x H
  Vector b;    // 4H

  int hidden() const { return static_cast<int>(w_h.cols()); }
  int input() const { return static_cast<int>(w_x.cols()); }

  void check() const {
    const auto h = w_h.cols();
    require_shape(w_h.rows() == 4 * h && w_x.rows() == 4 * h && b.size() == 4 * h,
                  "lstm params: w_x " + shape_str(w_x) + ", w_h " + shape_str(w_h) + ", b " +
                      std::to_string(b.size()));
  }
};

/// One LSTM step; columns of x, h_prev and c_prev are independent sequences.
inline std::pair<Matrix, Matrix> lstm_step(const LstmCellParams& p, const Matrix& x,
                                           const Matrix& h_prev, const Matrix& c_prev) {
  p.check();
  const auto h = p.w_h.cols();
  require_shape(x.rows() == p.w_x.cols() && h_prev.rows() == h && c_prev.rows() == h &&
                    h_prev.cols() == x.cols() && c_prev.cols() == x.cols(),
                "lstm_step: x " + shape_str(x) + ", h " + shape_str(h_prev) + ", c " +
                    shape_str(c_prev));
  Matrix gates = ((p.w_x * x + p.w_h * h_prev).colwise() + p.b).eval();
  Matrix in = sigmoid(gates.topRows(h));
  Matrix forget = sigmoid(gates.middleRows(h, h));
  Matrix cand = gates.middleRows(2 * h, h).array().tanh();
  Matrix out = sigmoid(gates.bottomRows(h));
  Matrix c = forget.cwiseProduct(c_prev) + in.cwiseProduct(cand);
  Matrix hn = out.cwiseProduct(Matrix(c.array().tanh()));
  return {std::move(hn), std::move(c)};
}

inline std::pair<Vector, Vector> lstm_step(const LstmCellParams& p, const Vector& x,
                                           const Vector& h_prev, const Vector& c_prev) {
  auto [h, c] = lstm_step(p, Matrix(x), Matrix(h_prev), Matrix(c_prev));
  return {h.col(0), c.col(0)};
}

/// Named parameter tensors, each with a same-shaped gradient buffer.
/// Iteration order is insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
  };

  std::size_t add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw Error(ErrorCode::InvalidConfig, "duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    Matrix grad = Matrix::Zero(init.rows(), init.cols());
    entries_.push_back({name, std::move(init), std::move(grad)});
    return entries_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::CheckpointMismatch, "no parameter '" + name + "'");
    return it->second;
  }

  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& at(const std::string& name) { return entries_[index_of(name)]; }
  const Entry& at(const std::string& name) const { return entries_[index_of(name)]; }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& e : entries_) s += e.grad.squaredNorm();
    return std::sqrt(s);
  }

  void scale_grads(double f) {
    for (auto& e : entries_) e.grad *= f;
  }

  bool grads_finite() const {
    for (const auto& e : entries_)
      if (!e.grad.allFinite()) return false;
    return true;
  }

  std::vector<Matrix> grads() const {
    std::vector<Matrix> out;
    for (const auto& e : entries_) out.push_back(e.grad);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Rescales all gradients so that their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamStore& params, double max_norm) {
  const double norm = params.grad_norm();
  if (max_norm > 0.0 && norm > max_norm) params.scale_grads(max_norm / norm);
  return norm;
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

inline void adam_update(AdamState& state, ParamStore& params) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& e : params) {
      state.m.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
      state.v.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& e = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    m = state.beta1 * m + (1.0 - state.beta1) * e.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * e.grad.cwiseProduct(e.grad);
    e.value.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
    e.grad.setZero();
  }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries.
inline Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(cols, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng);
  return m;
}

// Checkpoint: "ARM3DCKP", u32 version, u32 metadata count, (key, value)
// strings, u32 tensor count, then (name, u64 rows, u64 cols, column-major
// float64 data) per tensor. Strings are u32 length + bytes. Little-endian.
inline constexpr char kCheckpointMagic[8] = {'A', 'R', 'M', '3', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(ErrorCode::CheckpointMismatch, "truncated checkpoint");
  return v;
}

inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 24)) throw Error(ErrorCode::CheckpointMismatch, "corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw Error(ErrorCode::CheckpointMismatch, "truncated checkpoint");
  return s;
}
}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ParamStore& params, const Metadata& meta = {}) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    detail::put_string(out, e.name);
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(e.value.rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(e.value.cols()));
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(e.value.size())));
  }
}

inline std::pair<ParamStore, Metadata> read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw Error(ErrorCode::CheckpointMismatch, "not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::CheckpointMismatch, "unsupported checkpoint version " + std::to_string(version));
  Metadata meta;
  const auto n_meta = detail::get<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < n_meta; ++k) {
    auto key = detail::get_string(in);
    meta[key] = detail::get_string(in);
  }
  ParamStore params;
  const auto n = detail::get<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < n; ++k) {
    auto name = detail::get_string(in);
    const auto rows = detail::get<std::uint64_t>(in);
    const auto cols = detail::get<std::uint64_t>(in);
    if (rows > (1u << 20) || cols > (1u << 20))
      throw Error(ErrorCode::CheckpointMismatch, "corrupt tensor shape for '" + name + "'");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!in) throw Error(ErrorCode::CheckpointMismatch, "truncated tensor '" + name + "'");
    params.add(name, std::move(m));
  }
  return {std::move(params), std::move(meta)};
}

inline void save_checkpoint(const std::string& path, const ParamStore& params, const Metadata& meta = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  write_checkpoint(out, params, meta);
  if (!out) throw Error(ErrorCode::IoError, "write failed for '" + path + "'");
}

inline std::pair<ParamStore, Metadata> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace arm3d::nn
