#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "arm3d/autodiff.hpp"
#include "arm3d/density.hpp"
#include "arm3d/nn.hpp"

using namespace arm3d;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no arm3d::Error thrown";
  return ErrorCode::Usage;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// direct density sum, no log-sum-exp
double naive_gmm_nll(const density::GmmParams& p, double z) {
  long double s = 0.0L;
  for (int k = 0; k < p.k(); ++k) {
    const long double u = (z - p.means(k)) / p.sigmas(k);
    s += p.weights(k) * std::exp(-0.5L * u * u) / (p.sigmas(k) * std::sqrt(2.0L * std::numbers::pi_v<long double>));
  }
  return static_cast<double>(-std::log(s));
}

density::GmmParams mixture(std::vector<double> w, std::vector<double> m, std::vector<double> s) {
  density::GmmParams p;
  p.weights = Eigen::Map<Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
  p.means = Eigen::Map<Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
  p.sigmas = Eigen::Map<Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
  return p;
}

}  // namespace

// ---- dense / activations ----

TEST(Dense, Examples) {
  Matrix w(1, 2);
  w << 1, 2;
  Vector b(1), x(2);
  b << 3;
  x << 4, 5;
  EXPECT_EQ(nn::dense_forward(w, b, x)(0), 17.0);
  EXPECT_TRUE(nn::dense_forward(Matrix::Identity(2, 2), Vector::Zero(2), x) == x);
  EXPECT_TRUE(nn::dense_forward(Matrix::Zero(3, 2), Vector::Zero(3), x).isZero(0.0));
  EXPECT_EQ(code_of([&] { nn::dense_forward(Matrix::Zero(3, 3), Vector::Zero(3), x); }), ErrorCode::ShapeMismatch);
}

TEST(Softplus, Examples) {
  EXPECT_NEAR(nn::softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(nn::softplus(100.0), 100.0, 1e-9);
  const double tiny = nn::softplus(-100.0);
  EXPECT_GT(tiny, 0.0);
  EXPECT_NEAR(tiny / std::exp(-100.0), 1.0, 1e-12);
}

TEST(Softplus, Bounds) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng);
    const double y = nn::softplus(x);
    EXPECT_GT(y, 0.0);
    EXPECT_GE(y - std::max(x, 0.0), 0.0);
    EXPECT_LE(y - std::max(x, 0.0), std::log(2.0) + 1e-15);
  }
}

TEST(Softmax, Examples) {
  Vector a(2), b(3), c(3);
  a << 0, 0;
  b << 7, 7, 7;
  c << 1, 2, 3;
  EXPECT_NEAR(nn::softmax(a)(0), 0.5, 1e-15);
  EXPECT_NEAR(nn::softmax(b)(2), 1.0 / 3.0, 1e-15);
  const Vector s = nn::softmax(c);
  EXPECT_NEAR(s(0), 0.09003057317038046, 1e-12);
  EXPECT_NEAR(s(1), 0.24472847105479765, 1e-12);
  EXPECT_NEAR(s(2), 0.6652409557748219, 1e-12);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 5.0);
  for (int rep = 0; rep < 1000; ++rep) {
    Vector v(5);
    for (auto& x : v) x = nd(rng);
    const Vector s = nn::softmax(v);
    EXPECT_NEAR(s.sum(), 1.0, 1e-12);
    const Vector t = nn::softmax((v.array() + nd(rng) * 100).matrix());
    EXPECT_LT((s - t).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---- lstm ----

TEST(Lstm, ZeroWeightsGiveZeroState) {
  nn::LstmCellParams p{Matrix::Zero(12, 2), Matrix::Zero(12, 3), Vector::Zero(12)};
  Vector x(2);
  x << 5, -4;
  const auto [h, c] = nn::lstm_step(p, x, Vector(Vector::Zero(3)), Vector(Vector::Zero(3)));
  EXPECT_TRUE(h.isZero(0.0));
  EXPECT_TRUE(c.isZero(0.0));
}

TEST(Lstm, SaturatedForgetGateKeepsCell) {
  const int hd = 2;
  nn::LstmCellParams p{Matrix::Zero(4 * hd, 1), Matrix::Zero(4 * hd, hd), Vector::Zero(4 * hd)};
  p.b.segment(hd, hd).setConstant(100.0);
  Vector c0(hd);
  c0 << 0.7, -1.3;
  const auto [h, c] = nn::lstm_step(p, Vector(Vector::Ones(1)), Vector(Vector::Zero(hd)), c0);
  EXPECT_NEAR(c(0), 0.7, 1e-12);
  EXPECT_NEAR(c(1), -1.3, 1e-12);
}

TEST(Lstm, ScalarOracle) {
  nn::LstmCellParams p{Matrix(4, 1), Matrix(4, 1), Vector(4)};
  p.w_x << 0.3, -0.2, 0.5, 0.1;
  p.w_h << -0.4, 0.25, 0.15, 0.6;
  p.b << 0.05, 1.0, -0.1, 0.2;
  const double x = 0.8, h0 = -0.3, c0 = 0.45;
  const double i = sig(0.3 * x - 0.4 * h0 + 0.05);
  const double f = sig(-0.2 * x + 0.25 * h0 + 1.0);
  const double g = std::tanh(0.5 * x + 0.15 * h0 - 0.1);
  const double o = sig(0.1 * x + 0.6 * h0 + 0.2);
  const double c = f * c0 + i * g;
  const double h = o * std::tanh(c);
  const auto [hv, cv] = nn::lstm_step(p, Vector(Vector::Constant(1, x)), Vector(Vector::Constant(1, h0)),
                                        Vector(Vector::Constant(1, c0)));
  EXPECT_NEAR(hv(0), h, 1e-12);
  EXPECT_NEAR(cv(0), c, 1e-12);
}

TEST(Lstm, HiddenBounded) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int rep = 0; rep < 200; ++rep) {
    nn::LstmCellParams p{Matrix::NullaryExpr(12, 2, [&] { return nd(rng); }),
                         Matrix::NullaryExpr(12, 3, [&] { return nd(rng); }),
                         Vector::NullaryExpr(12, [&] { return nd(rng); })};
    const auto [h, c] = nn::lstm_step(p, Vector(Vector::NullaryExpr(2, [&] { return nd(rng); })),
                                      Vector(Vector::NullaryExpr(3, [&] { return nd(rng); })),
                                      Vector(Vector::NullaryExpr(3, [&] { return nd(rng); })));
    EXPECT_LT(h.cwiseAbs().maxCoeff(), 1.0);
  }
}

// ---- reverse mode ----

TEST(Tape, SumOfParametersHasUnitGradient) {
  nn::ParamStore ps;
  ps.add("a", Matrix::Random(2, 3));
  ps.add("b", Matrix::Random(4, 1));
  nn::Tape t;
  auto loss = nn::add(t, nn::sum(t, t.parameter(ps, "a")), nn::sum(t, t.parameter(ps, "b")));
  t.backward(loss);
  EXPECT_TRUE(ps.at("a").grad == Matrix::Ones(2, 3));
  EXPECT_TRUE(ps.at("b").grad == Matrix::Ones(4, 1));
}

TEST(Tape, LeastSquaresGradient) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  nn::ParamStore ps;
  ps.add("W", Matrix::NullaryExpr(3, 4, [&] { return nd(rng); }));
  const Matrix x = Matrix::NullaryExpr(4, 1, [&] { return nd(rng); });
  const Matrix y = Matrix::NullaryExpr(3, 1, [&] { return nd(rng); });
  nn::Tape t;
  auto r = nn::add(t, nn::matmul(t, t.parameter(ps, "W"), t.constant(x)), t.constant(-y));
  auto loss = nn::scale(t, nn::sum(t, nn::hadamard(t, r, r)), 0.5);
  t.backward(loss);
  const Matrix want = (ps.at("W").value * x - y) * x.transpose();
  EXPECT_LT((ps.at("W").grad - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Tape, Errors) {
  nn::Tape t;
  EXPECT_EQ(code_of([&] { t.backward(nn::Var{}); }), ErrorCode::GraphNotRecorded);
  auto v = t.constant(Matrix::Ones(2, 2));
  EXPECT_EQ(code_of([&] { t.backward(v); }), ErrorCode::ShapeMismatch);
}

TEST(Tape, GmmNllMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  for (int k = 1; k <= 5; ++k) {
    nn::ParamStore ps;
    ps.add("l", Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }));
    ps.add("m", Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }));
    ps.add("s", Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }));
    const Matrix z = Matrix::NullaryExpr(1, 3, [&] { return 2.0 * nd(rng); });
    const Matrix w = Matrix::Constant(1, 3, 1.0 / 3.0);
    auto plain = [&] {
      double s = 0.0;
      for (int j = 0; j < 3; ++j) {
        density::GmmParams p;
        p.weights = nn::softmax(Vector(ps.at("l").value.col(j)));
        p.means = ps.at("m").value.col(j);
        p.sigmas = ps.at("s").value.col(j).unaryExpr([](double v) { return nn::softplus(v) + 1e-6; });
        s += density::gmm_nll(p, z(0, j)) / 3.0;
      }
      return s;
    };
    ps.zero_grad();
    nn::Tape t;
    auto sigma = nn::add_scalar(t, nn::softplus(t, t.parameter(ps, "s")), 1e-6);
    auto loss = nn::gmm_nll(t, t.parameter(ps, "l"), t.parameter(ps, "m"), sigma, z, w);
    EXPECT_NEAR(t.scalar(loss), plain(), 1e-12);
    t.backward(loss);
    for (auto& e : ps)
      for (Eigen::Index i = 0; i < e.value.size(); ++i) {
        const double keep = e.value(i);
        e.value(i) = keep + 1e-5;
        const double up = plain();
        e.value(i) = keep - 1e-5;
        const double down = plain();
        e.value(i) = keep;
        const double fd = (up - down) / 2e-5;
        const double an = e.grad(i);
        EXPECT_LT(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}), 1e-4)
            << e.name << "[" << i << "] K=" << k;
      }
  }
}

// ---- optimizer ----

TEST(Adam, OneStepValue) {
  nn::ParamStore ps;
  ps.add("x", Matrix::Constant(1, 1, 0.5));
  ps.at("x").grad(0, 0) = 1.0;
  nn::AdamState st;
  nn::adam_update(st, ps);
  EXPECT_NEAR(ps.at("x").value(0, 0) - 0.5, -0.0009999999900000001, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  nn::ParamStore ps;
  ps.add("y", Matrix::Constant(2, 2, 0.25));
  nn::AdamState st;
  for (int i = 0; i < 3; ++i) nn::adam_update(st, ps);
  EXPECT_TRUE(ps.at("y").value == Matrix::Constant(2, 2, 0.25));
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  nn::ParamStore ps;
  ps.add("x", Matrix::Constant(1, 1, 0.25));
  nn::AdamState st;
  ps.at("x").grad(0, 0) = 2.0;
  nn::adam_update(st, ps);
  const double m1 = st.m[0](0, 0), v1 = st.v[0](0, 0);
  nn::adam_update(st, ps);  // the first update zeroed the gradient
  EXPECT_DOUBLE_EQ(st.m[0](0, 0), 0.9 * m1);
  EXPECT_DOUBLE_EQ(st.v[0](0, 0), 0.999 * v1);
}

TEST(Adam, ConstantGradientStepTendsToLr) {
  nn::ParamStore ps;
  ps.add("x", Matrix::Zero(1, 1));
  nn::AdamState st;
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 5000; ++i) {
    ps.at("x").grad(0, 0) = -3.0;
    nn::adam_update(st, ps);
    step = ps.at("x").value(0, 0) - prev;
    prev = ps.at("x").value(0, 0);
  }
  EXPECT_GT(step, 0.0);
  EXPECT_NEAR(step, st.lr, 1e-6);
}

TEST(Clip, GlobalNorm) {
  nn::ParamStore ps;
  ps.add("a", Matrix::Zero(1, 2));
  ps.at("a").grad << 3, 4;
  EXPECT_DOUBLE_EQ(nn::clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.grad_norm(), 1.0, 1e-15);
}

TEST(Checkpoint, RoundTrip) {
  nn::ParamStore ps;
  ps.add("w", Matrix::Random(3, 2));
  ps.add("b", Matrix::Random(3, 1));
  nn::Metadata meta{{"k", "v"}};
  std::stringstream buf;
  nn::write_checkpoint(buf, ps, meta);
  const auto [back, m2] = nn::read_checkpoint(buf);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(back.at("w").value == ps.at("w").value);
  EXPECT_TRUE(back.at("b").value == ps.at("b").value);
  EXPECT_EQ(m2, meta);
  std::stringstream junk("not a checkpoint");
  EXPECT_EQ(code_of([&] { nn::read_checkpoint(junk); }), ErrorCode::CheckpointMismatch);
}

// ---- density ----

TEST(GaussianHead, Examples) {
  Vector h(2);
  h << 0.5, -1.5;
  const auto z = density::gaussian_head(h, Matrix::Zero(1, 2), 0.0, Matrix::Zero(1, 2), 0.0);
  EXPECT_EQ(z.mu, 0.0);
  EXPECT_NEAR(z.sigma, std::log(2.0), 1e-15);
  Matrix wm(1, 2), ws(1, 2);
  wm << 0.2, 0.4;
  ws << -0.3, 0.6;
  const auto g = density::gaussian_head(h, wm, 0.1, ws, 0.05);
  EXPECT_NEAR(g.mu, -0.4, 1e-12);
  EXPECT_NEAR(g.sigma, 0.31326168751822283, 1e-12);
  const auto big = density::gaussian_head(h, wm, 0.0, Matrix::Zero(1, 2), 100.0);
  EXPECT_NEAR(big.sigma, 100.0, 1e-9);
}

namespace {
density::GmmHeadParams zero_head(int k, int h) {
  return {Matrix::Zero(k, h), Matrix::Zero(k, h), Matrix::Zero(k, h), Vector::Zero(k), Vector::Zero(k), Vector::Zero(k)};
}
}  // namespace

TEST(GmmHead, ZeroInputsGiveSymmetricMixture) {
  const auto p = density::gmm_head(Vector::Zero(4), zero_head(5, 4), {density::SigmaLink::Softplus, 0.0});
  for (int k = 0; k < 5; ++k) {
    EXPECT_NEAR(p.weights(k), 0.2, 1e-15);
    EXPECT_EQ(p.means(k), 0.0);
    EXPECT_NEAR(p.sigmas(k), std::log(2.0), 1e-15);
  }
  EXPECT_EQ(density::kDefaultComponents, 5);
}

TEST(GmmHead, SingleComponentAlwaysWeightOne) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd(0.0, 10.0);
  auto hp = zero_head(1, 3);
  hp.w_p = Matrix::NullaryExpr(1, 3, [&] { return nd(rng); });
  for (int rep = 0; rep < 20; ++rep)
    EXPECT_EQ(density::gmm_head(Vector::NullaryExpr(3, [&] { return nd(rng); }), hp).weights(0), 1.0);
}

TEST(GmmHead, AlwaysValid) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 4.0);
  for (int rep = 0; rep < 2000; ++rep) {
    const int k = 1 + static_cast<int>(rng() % 6);
    density::GmmHeadParams hp{Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }),
                              Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }),
                              Matrix::NullaryExpr(k, 3, [&] { return nd(rng); }),
                              Vector::NullaryExpr(k, [&] { return nd(rng); }),
                              Vector::NullaryExpr(k, [&] { return nd(rng); }),
                              Vector::NullaryExpr(k, [&] { return nd(rng); })};
    const auto p = density::gmm_head(Vector::NullaryExpr(3, [&] { return nd(rng); }), hp);
    EXPECT_TRUE(p.valid(1e-12));
  }
}

TEST(GmmNll, Examples) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(density::gmm_nll(mixture({1.0}, {0.0}, {1.0}), 0.0), half_log_2pi, 1e-15);
  EXPECT_NEAR(density::gmm_nll(mixture({0.5, 0.5}, {0, 0}, {1, 1}), 0.0), half_log_2pi, 1e-15);
  const auto p = mixture({0.3, 0.7}, {-1, 2}, {0.5, 1.5});
  EXPECT_NEAR(density::gmm_nll(p, 0.4), 2.2058947409041861, 1e-10);
}

TEST(GmmNll, FarTailsStayFinite) {
  const auto p = mixture({0.3, 0.7}, {-1, 2}, {0.5, 1.5});
  for (double z : {1e6, -1e6, 1.5e6, -3e6}) EXPECT_TRUE(std::isfinite(density::gmm_nll(p, z)));
}

TEST(GmmNll, SingleComponentReducesToGaussian) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 100; ++rep) {
    Vector h = Vector::NullaryExpr(3, [&] { return nd(rng); });
    Matrix wm = Matrix::NullaryExpr(1, 3, [&] { return nd(rng); });
    Matrix ws = Matrix::NullaryExpr(1, 3, [&] { return nd(rng); });
    const double bm = nd(rng), bs = nd(rng), z = 3.0 * nd(rng);
    const auto g = density::gaussian_head(h, wm, bm, ws, bs);
    density::GmmHeadParams hp{Matrix::Zero(1, 3), wm, ws, Vector::Zero(1), Vector::Constant(1, bm),
                              Vector::Constant(1, bs)};
    const auto p = density::gmm_head(h, hp, {density::SigmaLink::Softplus, 0.0});
    EXPECT_NEAR(density::gmm_nll(p, z), density::gaussian_nll(g, z), 1e-12);
  }
}

TEST(GmmNll, MatchesDirectSummation) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const int k = 1 + static_cast<int>(rng() % 5);
    density::GmmParams p;
    p.weights = nn::softmax(Vector::NullaryExpr(k, [&] { return nd(rng); }));
    p.means = Vector::NullaryExpr(k, [&] { return 3.0 * nd(rng); });
    p.sigmas = Vector::NullaryExpr(k, [&] { return u(rng); });
    const double z = 4.0 * nd(rng);
    EXPECT_NEAR(density::gmm_nll(p, z), naive_gmm_nll(p, z), 1e-10);
  }
}

TEST(GmmSample, Degenerate) {
  density::Rng rng(10);
  for (int i = 0; i < 100; ++i) EXPECT_NEAR(density::gmm_sample(mixture({1.0}, {7.0}, {1e-12}), rng), 7.0, 1e-9);
  const auto p = mixture({1.0, 0.0}, {3.0, 100.0}, {1.0, 1.0});
  for (int i = 0; i < 10000; ++i) EXPECT_LT(density::gmm_sample(p, rng), 50.0);
}

TEST(GmmSample, MeanAndVarianceMatchMoments) {
  const auto p = mixture({0.3, 0.7}, {-1, 2}, {0.5, 1.5});
  const auto mom = density::gmm_moments(p);
  EXPECT_NEAR(mom.mean, 1.1, 1e-15);
  EXPECT_NEAR(mom.variance, 3.54, 1e-12);
  density::Rng rng(11);
  const int n = 1000000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = density::gmm_sample(p, rng);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_LT(std::abs(mean - 1.1), 3.0 * std::sqrt(mom.variance / n));
  EXPECT_NEAR(var, 3.54, 0.03);
}

TEST(GmmMoments, Examples) {
  const auto a = density::gmm_moments(mixture({1.0}, {2.5}, {0.7}));
  EXPECT_DOUBLE_EQ(a.mean, 2.5);
  EXPECT_NEAR(a.variance, 0.49, 1e-15);
  EXPECT_EQ(density::gmm_moments(mixture({0.5, 0.5}, {-3, 3}, {1, 1})).mean, 0.0);
}

TEST(GmmSample, KolmogorovSmirnov) {
  const auto p = mixture({0.2, 0.5, 0.3}, {-4, 0, 5}, {1.0, 0.5, 2.0});
  density::Rng rng(12);
  const int n = 20000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = density::gmm_sample(p, rng);
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    const double f = density::gmm_cdf(p, xs[static_cast<std::size_t>(i)]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  EXPECT_LT(d, 1.628 / std::sqrt(static_cast<double>(n)));
}
