#include <doctest.h>

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "pisml/common.hpp"
#include "pisml/dataset.hpp"
#include "pisml/hybrid.hpp"
#include "pisml/training.hpp"

using namespace pisml;

namespace {

HybridModel random_hybrid(std::uint64_t seed, bool layer_norm = false) {
  Rng rng = make_rng(seed, "test");
  HybridModel m;
  m.mode = ModelMode::pisml_phy;
  m.library = feat::build_extended_library(13, 0.5, 0.0);
  Eigen::MatrixXd xi(m.library.size(), 13);
  for (int j = 0; j < xi.cols(); ++j) {
    for (int i = 0; i < xi.rows(); ++i) xi(i, j) = normal(rng);
  }
  m.xi = reg::CoefficientMatrix(xi, m.library.hash());
  m.xi.mask(3, 2) = false;
  m.xi.enforce_mask();
  m.mlp = nn::make_mlp({14, 10, 8, 13}, rng, false, layer_norm);
  m.scaler.mode = reg::ScalerMode::standard;
  m.scaler.shift = Eigen::VectorXd::Constant(14, 0.1);
  m.scaler.scale = Eigen::VectorXd::LinSpaced(14, 0.5, 3.0);
  m.out_scale = Eigen::VectorXd::LinSpaced(13, 1.0, 40.0);
  return m;
}

Eigen::VectorXd random_point(Rng& rng) {
  Eigen::VectorXd x(13);
  for (auto& v : x) v = uniform(rng, -1.0, 1.0);
  return x;
}

// The stiff-grid inverter without damping resistor is a linear
// combination of extended-library columns; recover it by least squares.
HybridModel exact_model(const sim::GfmParams& p) {
  HybridModel m;
  m.mode = ModelMode::mod_sindy;
  m.library = feat::build_extended_library(13, p.P_0, p.Q_0);
  Rng rng = make_rng(0, "exact");
  const int K = 600;
  Eigen::MatrixXd X(K, 13), U(K, 1), Y(K, 13);
  for (int k = 0; k < K; ++k) {
    X.row(k) = random_point(rng).transpose();
    U(k, 0) = uniform(rng, 0.3, 1.3);
    Y.row(k) = sim::gfm_derivative(StateVector(X.row(k).transpose()), U(k, 0), p).transpose();
  }
  const Eigen::MatrixXd Theta = m.library.evaluate(X, U);
  m.xi = reg::CoefficientMatrix(Theta.colPivHouseholderQr().solve(Y), m.library.hash());
  m.scaler = reg::identity_scaler(14);
  m.out_scale = Eigen::VectorXd::Ones(13);
  return m;
}

}  // namespace

TEST_CASE("hybrid derivative is backbone plus scaled network") {
  const HybridModel m = random_hybrid(1);
  Rng rng = make_rng(2, "pts");
  const Eigen::VectorXd x = random_point(rng);
  Eigen::VectorXd u(1);
  u << 0.9;
  const Eigen::VectorXd backbone = m.xi.values.transpose() * m.library.evaluate(x, u);
  Eigen::VectorXd z(14);
  z << x, 0.9;
  const Eigen::VectorXd zs = m.scaler.scale.cwiseProduct(z - m.scaler.shift);
  const Eigen::VectorXd expect = backbone + m.out_scale.cwiseProduct(m.mlp->forward(zs));
  CHECK((m.derivative(x, 0.9) - expect).cwiseAbs().maxCoeff() <= 1e-12 * expect.cwiseAbs().maxCoeff());
  CHECK((m.residual(x, 0.9) - m.out_scale.cwiseProduct(m.mlp->forward(zs))).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("hybrid jacobian matches central differences") {
  for (bool ln : {false, true}) {
    const HybridModel m = random_hybrid(3, ln);
    Rng rng = make_rng(4, "pts");
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::VectorXd x = random_point(rng);
      const Eigen::MatrixXd J = m.jacobian(x, 1.1);
      Eigen::MatrixXd F(13, 13);
      for (int j = 0; j < 13; ++j) {
        Eigen::VectorXd xp = x, xm = x;
        xp[j] += 1e-6;
        xm[j] -= 1e-6;
        F.col(j) = (m.derivative(xp, 1.1) - m.derivative(xm, 1.1)) / 2e-6;
      }
      CHECK((J - F).cwiseAbs().maxCoeff() / F.cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("absorbing the scaler leaves the field unchanged") {
  const HybridModel m = random_hybrid(5);
  const HybridModel a = absorb_scaler(m);
  CHECK(a.scaler.mode == reg::ScalerMode::identity);
  Rng rng = make_rng(6, "pts");
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd x = random_point(rng);
    const Eigen::VectorXd f = m.derivative(x, 0.95);
    CHECK((a.derivative(x, 0.95) - f).cwiseAbs().maxCoeff() <= 1e-10 * f.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("model json round trip is exact") {
  const HybridModel m = random_hybrid(7, true);
  const HybridModel back = nlohmann::json::parse(nlohmann::json(m).dump()).get<HybridModel>();
  Rng rng = make_rng(8, "pts");
  const Eigen::VectorXd x = random_point(rng);
  CHECK(back.derivative(x, 1.0) == m.derivative(x, 1.0));
  CHECK(back.mode == m.mode);
  CHECK(nlohmann::json(back).dump() == nlohmann::json(m).dump());
  auto j = nlohmann::json(m);
  j["xi"]["library_hash"] = "0000";
  CHECK_THROWS_AS(j.get<HybridModel>(), ValidationError);
}

TEST_CASE("undamped inverter is exactly representable in the extended library") {
  sim::GfmParams p;
  p.R_d = 0.0;
  const HybridModel m = exact_model(p);
  Rng rng = make_rng(9, "pts");
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const Eigen::VectorXd x = random_point(rng);
    const double u = uniform(rng, 0.3, 1.3);
    const Eigen::VectorXd f = sim::gfm_derivative(StateVector(x), u, p);
    worst = std::max(worst, (m.derivative(x, u) - f).cwiseAbs().maxCoeff() / f.cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("exact model reproduces simulated data through rollout and both losses") {
  sim::GfmParams p;
  p.R_d = 0.0;
  const HybridModel m = exact_model(p);
  sim::TestScenario sc;
  sc.t_end = 0.03;
  const StateVector x0 = sim::find_equilibrium(p, sc.u_start);
  const InputSignal in = sim::scenario_input(sc);
  // the simulator at dt = 5e-5 uses the same rk4 steps as a 2-substep rollout
  const Trajectory truth = sim::simulate_gfm(p, x0, in, sc.t_end, 1e-4, 5e-5);
  const Trajectory pred = rollout(m, Eigen::VectorXd(x0), in, sc.t_end);
  REQUIRE(pred.size() == truth.size());
  CHECK((pred.states - truth.states).cwiseAbs().maxCoeff() <= 1e-7);

  const std::vector<Trajectory> trajs = {truth};
  const auto windows = train::make_windows(trajs, 40, 10);
  train::TrajLossOptions opt;
  const auto lt = train::loss_traj(m, trajs, windows, opt, false);
  CHECK_FALSE(lt.diverged);
  CHECK(lt.value <= 1e-10);

  Rng rng = make_rng(10, "dirs");
  std::vector<sim::PerturbationRecord> records;
  for (int k = 0; k < 8; ++k) {
    StateVector dx;
    for (auto& v : dx) v = normal(rng);
    dx *= 1e-4 / dx.norm();
    records.push_back(sim::measure_perturbation(p, StateVector(truth.states.row(40 * k).transpose()),
                                                truth.inputs[40 * k], dx, 1e-7));
  }
  const auto lp = train::loss_pert(m, records, train::pert_weights(records), false);
  CHECK(lp.value <= 1e-6);
}

TEST_CASE("model equilibrium of the exact model is the simulator equilibrium") {
  sim::GfmParams p;
  p.R_d = 0.0;
  const HybridModel m = exact_model(p);
  const StateVector xs = sim::find_equilibrium(p, 0.8);
  const Eigen::VectorXd xm = model_equilibrium(m, 0.8, Eigen::VectorXd(xs) * 1.01);
  CHECK((xm - Eigen::VectorXd(xs)).cwiseAbs().maxCoeff() <= 1e-7);
}
