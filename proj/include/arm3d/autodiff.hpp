#pragma once

// Reverse-mode tape over matrix-valued nodes. Each op evaluates eagerly and,
// when any input needs a gradient, records a closure that pushes the output
// gradient back to its inputs. Parameter leaves flush their gradient into the
// owning ParamStore at the end of backward().

#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include "arm3d/common.hpp"
#include "arm3d/nn.hpp"

namespace arm3d::nn {

struct Var {
  int id = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false); }

  Var parameter(ParamStore& store, std::size_t index) {
    Var v = push(store[index].value, true);
    leaves_.push_back({v.id, &store, index});
    return v;
  }

  Var parameter(ParamStore& store, const std::string& name) {
    return parameter(store, store.index_of(name));
  }

  const Matrix& value(Var v) const { return node(v).value; }
  double scalar(Var v) const { return node(v).value(0, 0); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() target with respect to v.
  const Matrix& grad(Var v) const { return node(v).grad; }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    leaves_.clear();
  }

  /// Accumulates d(loss)/d(param) into every ParamStore entry referenced by the tape.
  void backward(Var loss) {
    if (nodes_.empty() || loss.id < 0 || loss.id >= static_cast<int>(nodes_.size()))
      throw Error(ErrorCode::GraphNotRecorded, "backward called on a variable not recorded on this tape");
    auto& root = nodes_[static_cast<std::size_t>(loss.id)];
    require_shape(root.value.size() == 1, "backward: loss must be scalar, got " + shape_str(root.value));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    root.grad = Matrix::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0 || !n.back) continue;
      n.back(*this, n.grad);
    }
    for (const auto& leaf : leaves_) {
      const auto& g = nodes_[static_cast<std::size_t>(leaf.id)].grad;
      if (g.size() != 0) (*leaf.store)[leaf.index].grad += g;
    }
  }

  // Op construction helpers used by the free functions below.
  Var push(Matrix value, bool requires_grad) {
    nodes_.push_back({std::move(value), Matrix(), {}, requires_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <class Back>
  Var record(Matrix value, std::initializer_list<Var> inputs, Back&& back) {
    bool rg = false;
    for (Var v : inputs) rg = rg || node(v).requires_grad;
    Var out = push(std::move(value), rg);
    if (rg) nodes_.back().back = std::forward<Back>(back);
    return out;
  }

  /// Adds g into the gradient buffer of v (no-op for constants).
  void accumulate(Var v, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> back;
    bool requires_grad = false;
  };
  struct Leaf {
    int id;
    ParamStore* store;
    std::size_t index;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw Error(ErrorCode::GraphNotRecorded, "variable not on this tape");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
  std::vector<Leaf> leaves_;
};

inline Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.cols() == bv.rows(), "matmul: " + shape_str(av) + " * " + shape_str(bv));
  return t.record(av * bv, {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

inline Var add(Tape& t, Var a, Var b) {
  require_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "add: " + shape_str(t.value(a)) + " + " + shape_str(t.value(b)));
  return t.record(t.value(a) + t.value(b), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// a (R x C) plus bias column (R x 1) added to every column.
inline Var add_bias(Tape& t, Var a, Var bias) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(bias);
  require_shape(bv.cols() == 1 && bv.rows() == av.rows(),
                "add_bias: " + shape_str(av) + " + " + shape_str(bv));
  return t.record((av.colwise() + bv.col(0)).eval(), {a, bias}, [a, bias](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(bias)) tp.accumulate(bias, g.rowwise().sum());
  });
}

inline Var hadamard(Tape& t, Var a, Var b) {
  require_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                "hadamard: " + shape_str(t.value(a)) + " o " + shape_str(t.value(b)));
  return t.record(t.value(a).cwiseProduct(t.value(b)), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

inline Var sigmoid(Tape& t, Var a) {
  Matrix y = sigmoid(t.value(a));
  return t.record(y, {a}, [a, y](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(Matrix(y.array() * (1.0 - y.array()))));
  });
}

inline Var tanh(Tape& t, Var a) {
  Matrix y = t.value(a).array().tanh();
  return t.record(y, {a}, [a, y](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(Matrix(1.0 - y.array().square())));
  });
}

inline Var softplus(Tape& t, Var a) {
  return t.record(softplus(t.value(a)), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(sigmoid(tp.value(a))));
  });
}

inline Var exp(Tape& t, Var a) {
  Matrix y = t.value(a).array().exp();
  return t.record(y, {a}, [a, y](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(y)); });
}

inline Var add_scalar(Tape& t, Var a, double c) {
  return t.record((t.value(a).array() + c).matrix(), {a},
                  [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g); });
}

inline Var scale(Tape& t, Var a, double c) {
  return t.record(t.value(a) * c, {a}, [a, c](Tape& tp, const Matrix& g) { tp.accumulate(a, g * c); });
}

inline Var sum(Tape& t, Var a) {
  Matrix s(1, 1);
  s(0, 0) = t.value(a).sum();
  const auto r = t.value(a).rows(), c = t.value(a).cols();
  return t.record(s, {a}, [a, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

/// Rows [start, start + count) of a.
inline Var rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = t.value(a);
  require_shape(start >= 0 && count >= 0 && start + count <= av.rows(),
                "rows: slice out of range of " + shape_str(av));
  const auto r = av.rows(), c = av.cols();
  return t.record(av.middleRows(start, count), {a}, [a, start, count, r, c](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleRows(start, count) = g;
    tp.accumulate(a, full);
  });
}

/// [a; b] stacked along rows.
inline Var vconcat(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.cols() == bv.cols(), "vconcat: " + shape_str(av) + " over " + shape_str(bv));
  Matrix out(av.rows() + bv.rows(), av.cols());
  out << av, bv;
  const auto ra = av.rows(), rb = bv.rows();
  return t.record(std::move(out), {a, b}, [a, b, ra, rb](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.topRows(ra));
    tp.accumulate(b, g.bottomRows(rb));
  });
}

inline Var transpose(Tape& t, Var a) {
  return t.record(t.value(a).transpose(), {a},
                  [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g.transpose()); });
}

/// (w o mask) x, with mask a constant.
inline Var masked_matmul(Tape& t, Var w, const Matrix& mask, Var x) {
  const Matrix& wv = t.value(w);
  const Matrix& xv = t.value(x);
  require_shape(wv.rows() == mask.rows() && wv.cols() == mask.cols() && wv.cols() == xv.rows(),
                "masked_matmul: W " + shape_str(wv) + ", mask " + shape_str(mask) + ", X " +
                    shape_str(xv));
  Matrix wm = wv.cwiseProduct(mask);
  Matrix out = wm * xv;
  return t.record(std::move(out), {w, x}, [w, x, mask, wm](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(w))
      tp.accumulate(w, Matrix((g * tp.value(x).transpose()).cwiseProduct(mask)));
    if (tp.requires_grad(x)) tp.accumulate(x, wm.transpose() * g);
  });
}

/// Weighted sum over columns b of -log sum_k softmax(logits)_k N(z_b; mu_kb, sigma_kb).
/// logits, mu, sigma are K x B; z and weights are 1 x B constants.
inline Var gmm_nll(Tape& t, Var logits, Var mu, Var sigma, const Matrix& z, const Matrix& weights) {
  const Matrix& lv = t.value(logits);
  const Matrix& mv = t.value(mu);
  const Matrix& sv = t.value(sigma);
  const auto k = lv.rows(), b = lv.cols();
  require_shape(mv.rows() == k && sv.rows() == k && mv.cols() == b && sv.cols() == b &&
                    z.rows() == 1 && z.cols() == b && weights.rows() == 1 && weights.cols() == b,
                "gmm_nll: logits " + shape_str(lv) + ", mu " + shape_str(mv) + ", sigma " +
                    shape_str(sv) + ", z " + shape_str(z));
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Matrix prob(k, b), resp(k, b);
  double total = 0.0;
  for (Eigen::Index j = 0; j < b; ++j) {
    const double lm = lv.col(j).maxCoeff();
    const double lse_l = lm + std::log((lv.col(j).array() - lm).exp().sum());
    Vector a(k);
    for (Eigen::Index c = 0; c < k; ++c) {
      const double u = (z(0, j) - mv(c, j)) / sv(c, j);
      a(c) = lv(c, j) - lse_l - half_log_2pi - std::log(sv(c, j)) - 0.5 * u * u;
    }
    const double am = a.maxCoeff();
    const double lse_a = am + std::log((a.array() - am).exp().sum());
    total += weights(0, j) * (-lse_a);
    prob.col(j) = (lv.col(j).array() - lse_l).exp();
    resp.col(j) = (a.array() - lse_a).exp();
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.record(std::move(out), {logits, mu, sigma},
                  [logits, mu, sigma, z, weights, prob, resp](Tape& tp, const Matrix& g) {
                    const Matrix& mv = tp.value(mu);
                    const Matrix& sv = tp.value(sigma);
                    const auto k = mv.rows(), b = mv.cols();
                    Matrix gl(k, b), gm(k, b), gs(k, b);
                    for (Eigen::Index j = 0; j < b; ++j) {
                      const double w = g(0, 0) * weights(0, j);
                      for (Eigen::Index c = 0; c < k; ++c) {
                        const double s = sv(c, j);
                        const double d = z(0, j) - mv(c, j);
                        const double r = resp(c, j);
                        gl(c, j) = w * (prob(c, j) - r);
                        gm(c, j) = -w * r * d / (s * s);
                        gs(c, j) = w * r * (1.0 / s - d * d / (s * s * s));
                      }
                    }
                    tp.accumulate(logits, gl);
                    tp.accumulate(mu, gm);
                    tp.accumulate(sigma, gs);
                  });
}

}  // namespace arm3d::nn
