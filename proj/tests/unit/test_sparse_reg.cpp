#include <doctest.h>

#include <Eigen/QR>
#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "pisml/common.hpp"
#include "pisml/sparse_reg.hpp"

using namespace pisml;
using namespace pisml::reg;

namespace {

Eigen::MatrixXd gaussian(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> d;
  Eigen::MatrixXd M(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) M(i, j) = d(rng);
  }
  return M;
}

double soft(double v, double k) { return v > k ? v - k : (v < -k ? v + k : 0.0); }

}  // namespace

TEST_CASE("stlsq recovers a planted 3-sparse system exactly") {
  std::mt19937_64 rng(42);
  const Eigen::MatrixXd Theta = gaussian(rng, 200, 10);
  Eigen::MatrixXd Xi = Eigen::MatrixXd::Zero(10, 2);
  Xi(1, 0) = 2.5;
  Xi(4, 0) = -0.7;
  Xi(8, 0) = 1.2;
  Xi(0, 1) = 0.3;
  Xi(2, 1) = -4.0;
  Xi(9, 1) = 0.9;
  const Eigen::MatrixXd Y = Theta * Xi;
  const auto c = fit_stlsq(Theta, Y, 0.1, 1e-12);
  CHECK(c.active_count() == 6);
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 10; ++i) {
      CHECK(c.mask(i, j) == (Xi(i, j) != 0.0));
      CHECK(std::abs(c.values(i, j) - Xi(i, j)) <= 1e-6);
    }
  }
  // the configured entry point (normalized problem) gives the same support
  FitConfig cfg;
  cfg.solver = Solver::stlsq;
  cfg.threshold = 0.05;
  cfg.alpha = 1e-12;
  const auto cn = fit(Theta, Y, cfg);
  CHECK((cn.mask == c.mask).all());
  CHECK((cn.values - Xi).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("l1 matches soft thresholding on an orthonormal design") {
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(rng, 60, 8)).householderQ() *
                            Eigen::MatrixXd::Identity(60, 8);
  const Eigen::MatrixXd Y = gaussian(rng, 60, 3);
  const double lambda = 0.6;
  std::vector<double> obj;
  const auto c = fit_l1(Q, Y, lambda, 20000, 1e-14, &obj);
  const Eigen::MatrixXd B = Q.transpose() * Y;
  for (int j = 0; j < 3; ++j) {
    for (int i = 0; i < 8; ++i) CHECK(std::abs(c.values(i, j) - soft(B(i, j), lambda)) <= 1e-6);
  }
  for (std::size_t k = 1; k < obj.size(); ++k) CHECK(obj[k] <= obj[k - 1] + 1e-12);
}

TEST_CASE("ridge solves the regularized normal equations") {
  std::mt19937_64 rng(9);
  const Eigen::MatrixXd Theta = gaussian(rng, 50, 6), Y = gaussian(rng, 50, 2);
  const double alpha = 0.3;
  const auto c = fit_ridge(Theta, Y, alpha);
  const Eigen::MatrixXd A = Theta.transpose() * Theta + alpha * Eigen::MatrixXd::Identity(6, 6);
  const Eigen::MatrixXd residual = A * c.values - Theta.transpose() * Y;
  CHECK(residual.cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(c.active_count() == 12);
}

TEST_CASE("normalized coefficients round trip") {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd Theta = gaussian(rng, 30, 4) * 5.0, Y = gaussian(rng, 30, 3) * 0.1;
  const auto nz = normalization_for(Theta, Y);
  const Eigen::MatrixXd Xi = gaussian(rng, 4, 3);
  CHECK((from_normalized(to_normalized(Xi, nz), nz) - Xi).cwiseAbs().maxCoeff() <= 1e-14);
  // a zero column keeps unit scale
  Eigen::MatrixXd T2 = Theta;
  T2.col(2).setZero();
  CHECK(normalization_for(T2, Y).column_scale[2] == 1.0);
}

TEST_CASE("derivative estimate is exact for quadratics and guards events") {
  Trajectory t;
  const int K = 50;
  t.states.resize(K, 2);
  for (int k = 0; k < K; ++k) {
    const double s = 1e-3 * k;
    t.times.push_back(s);
    t.states(k, 0) = 3.0 * s * s - s + 2.0;
    t.states(k, 1) = -0.5 * s;
    t.inputs.push_back(k < 20 ? 1.0 : 0.9);
  }
  t.input = InputSignal(1.0, {{0.02, 0.9, 0.0}});
  const auto d = estimate_derivatives(t, 3);
  for (int k = 0; k < K; ++k) {
    CHECK(d.xdot(k, 0) == doctest::Approx(6.0 * t.times[k] - 1.0).epsilon(1e-9));
    CHECK(d.xdot(k, 1) == doctest::Approx(-0.5).epsilon(1e-9));
  }
  CHECK_FALSE(d.valid[20]);
  CHECK_FALSE(d.valid[17]);
  CHECK(d.valid[10]);
  CHECK(d.valid[30]);
}

TEST_CASE("scalers invert and serialize") {
  std::mt19937_64 rng(2);
  Eigen::MatrixXd Z = gaussian(rng, 40, 5);
  Z.col(3).setConstant(0.7);
  for (auto mode : {ScalerMode::identity, ScalerMode::minmax, ScalerMode::standard}) {
    const Scaler s = fit_scaler(Z, mode);
    CHECK((s.invert(s.apply(Z)) - Z).cwiseAbs().maxCoeff() <= 1e-12);
    const Scaler back = nlohmann::json(s).get<Scaler>();
    CHECK(back.shift == s.shift);
    CHECK(back.scale == s.scale);
    CHECK(back.mode == s.mode);
  }
  const Eigen::MatrixXd M = fit_scaler(Z, ScalerMode::minmax).apply(Z);
  for (int j : {0, 1, 2, 4}) {
    CHECK(M.col(j).minCoeff() == doctest::Approx(0.0));
    CHECK(M.col(j).maxCoeff() == doctest::Approx(1.0));
  }
  const Eigen::MatrixXd S = fit_scaler(Z, ScalerMode::standard).apply(Z);
  CHECK(S.col(0).mean() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(S.col(3).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("coefficient matrices serialize with mask and hash") {
  CoefficientMatrix c(Eigen::MatrixXd::Random(5, 3), "abc");
  c.mask(2, 1) = false;
  c.enforce_mask();
  CHECK(c.values(2, 1) == 0.0);
  const auto back = nlohmann::json(c).get<CoefficientMatrix>();
  CHECK(back.values == c.values);
  CHECK((back.mask == c.mask).all());
  CHECK(back.library_hash == "abc");
  CHECK_THROWS_AS(fit_ridge(Eigen::MatrixXd::Ones(3, 2), Eigen::MatrixXd::Ones(4, 1), 0.1), ValidationError);
  CHECK_THROWS_AS(fit_l1(Eigen::MatrixXd::Ones(3, 2), Eigen::MatrixXd::Ones(3, 1), -1.0), ValidationError);
}
