#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>

#include "pisml/dataset.hpp"
#include "pisml/gfm.hpp"
#include "pisml/integrate.hpp"

using namespace pisml;
using namespace pisml::sim;

namespace {

StateMatrix fd_jacobian(const StateVector& x, double u, const GfmParams& p) {
  StateMatrix J;
  for (int j = 0; j < kStateDim; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[j]));
    StateVector xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    J.col(j) = (gfm_derivative(xp, u, p) - gfm_derivative(xm, u, p)) / (2 * h);
  }
  return J;
}

}  // namespace

TEST_CASE("filtered power responds to measured power at the filter bandwidth") {
  GfmParams p;
  StateVector x = StateVector::Zero();
  x[kVcd] = 1.0;
  x[kItd] = 1.0;
  x[kIod] = 1.0;
  const StateVector dx = gfm_derivative(x, 1.0, p);
  CHECK(dx[kPinv] == doctest::Approx(10.0 * kPi).epsilon(1e-12));
  CHECK(dx[kQinv] == doctest::Approx(0.0));
}

TEST_CASE("equilibrium residual is below 1e-10 across the training range") {
  GfmParams p;
  for (double u : {0.8, 0.9, 1.0, 1.1, 1.2}) {
    const StateVector xs = find_equilibrium(p, u);
    CHECK(gfm_derivative(xs, u, p).cwiseAbs().maxCoeff() <= 1e-10);
    // the droop loop settles the filtered power at the set-point
    CHECK(xs[kPinv] == doctest::Approx(p.P_0).epsilon(1e-8));
  }
}

TEST_CASE("rk4 matches the exponential on a scalar decay") {
  const VectorField f = [](const Eigen::VectorXd& x, double, double, Eigen::VectorXd& dx) {
    dx = -100.0 * x;
  };
  IntegratorConfig cfg;
  cfg.dt = 1e-4;
  cfg.sample_dt = 1e-3;
  Eigen::VectorXd x0(1);
  x0 << 1.0;
  const Trajectory tr = integrate(f, x0, InputSignal(1.0), 0.05, cfg);
  for (int k = 0; k < tr.size(); ++k) {
    CHECK(std::abs(tr.states(k, 0) - std::exp(-100.0 * tr.times[k])) < 1e-9);
  }
}

TEST_CASE("rk4 and adaptive rk45 agree on the test scenario") {
  GfmParams p;
  TestScenario sc;
  const StateVector x0 = find_equilibrium(p, sc.u_start);
  const VectorField f = [&p](const Eigen::VectorXd& x, double u, double, Eigen::VectorXd& dx) {
    dx = gfm_derivative(StateVector(x), u, p);
  };
  IntegratorConfig a;
  a.dt = 1e-6;
  IntegratorConfig b;
  b.method = Method::rk45;
  const Trajectory ta = integrate(f, x0, scenario_input(sc), sc.t_end, a, grid_phase_jump);
  const Trajectory tb = integrate(f, x0, scenario_input(sc), sc.t_end, b, grid_phase_jump);
  REQUIRE(ta.size() == tb.size());
  const double err = (ta.states - tb.states).cwiseAbs().maxCoeff();
  MESSAGE("max |rk4 - rk45| = " << err);
  CHECK(err <= 1e-5);
}

TEST_CASE("equilibrium at u = 0.8 is small-signal stable") {
  GfmParams p;
  const StateVector xs = find_equilibrium(p, 0.8);
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(fd_jacobian(xs, 0.8, p)));
  for (int i = 0; i < kStateDim; ++i) CHECK(es.eigenvalues()[i].real() < 0.0);
}

TEST_CASE("parameters round-trip through json and reject unknown keys") {
  GfmParams p;
  p.m_p = 0.03;
  nlohmann::json j = p;
  const GfmParams q = j.get<GfmParams>();
  CHECK(q.m_p == 0.03);
  CHECK(params_hash(p) == params_hash(q));
  j["bogus"] = 1.0;
  CHECK_THROWS_AS(j.get<GfmParams>(), ValidationError);
}

TEST_CASE("dataset generation is deterministic") {
  GfmParams p;
  DatasetSpec spec;
  spec.n_traj = 2;
  spec.perturbations_per_traj = 3;
  spec.seed = 7;
  const Dataset a = generate_dataset(p, spec);
  const Dataset b = generate_dataset(p, spec);
  REQUIRE(a.trajectories.size() == 2);
  CHECK(a.trajectories[0].size() == 201);
  CHECK((a.trajectories[1].states - b.trajectories[1].states).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(a.records.size() == 6);
  // small-signal slope agrees with the Jacobian-vector product
  const auto& r = a.records[0];
  const StateVector jv = fd_jacobian(r.anchor_state, r.anchor_u, p) * r.delta_x;
  CHECK((r.delta_xdot - jv).norm() <= 1e-2 * jv.norm() + 1e-8);
}

TEST_CASE("clamped references never leave the limits") {
  GfmParams p = saturation_variant(GfmParams{});
  p.i_limit = 0.55;  // the u = 1 operating point needs i_td = 0.499
  const Trajectory tr = simulate_scenario(p, TestScenario{});
  double peak_i = 0.0, peak_free = 0.0;
  GfmParams free = p;
  free.saturation = false;
  for (int k = 0; k < tr.size(); ++k) {
    const StateVector x = tr.states.row(k).transpose();
    const double u = tr.inputs[k];
    GfmAlgebraic a, b;
    gfm_rhs(x, u * std::cos(x[kDelta]), -u * std::sin(x[kDelta]), p.omega_0, p, &a);
    gfm_rhs(x, u * std::cos(x[kDelta]), -u * std::sin(x[kDelta]), p.omega_0, free, &b);
    peak_i = std::max({peak_i, std::abs(a.i_td_ref), std::abs(a.i_tq_ref)});
    peak_free = std::max({peak_free, std::abs(b.i_td_ref), std::abs(b.i_tq_ref)});
    CHECK(std::abs(a.v_td_ref) <= p.v_limit);
    CHECK(std::abs(a.v_tq_ref) <= p.v_limit);
  }
  CHECK(peak_i <= 0.55);
  CHECK(peak_free > 0.55);  // the limiter is actually engaged
}

TEST_CASE("saturated datasets start every trajectory at a steady state") {
  DatasetSpec spec;
  spec.n_traj = 4;
  spec.perturbations_per_traj = 2;
  spec.seed = 5;
  const GfmParams p = saturation_variant(GfmParams{});
  const Dataset d = generate_dataset(p, spec);
  for (const auto& tr : d.trajectories) {
    const StateVector x0 = tr.states.row(0).transpose();
    CHECK(gfm_derivative(x0, tr.inputs[0], p).cwiseAbs().maxCoeff() <= 1e-8);
  }
  // no operating point in range keeps the limiters inactive
  spec.excitation.u0_min = 1.4;
  spec.excitation.u0_max = 1.45;
  CHECK_THROWS_AS(generate_dataset(p, spec), ValidationError);
}
