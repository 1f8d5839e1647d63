#include "pisml/dataset.hpp"

#include <cmath>

#include "pisml/parallel.hpp"
#include "pisml/rng.hpp"

namespace pisml::sim {

Trajectory simulate_gfm(const GfmParams& p, const StateVector& x0,
                        const InputSignal& u, double t_end, double sample_dt,
                        double dt) {
  p.validate();
  IntegratorConfig cfg;
  cfg.method = Method::rk4;
  cfg.dt = dt;
  cfg.sample_dt = sample_dt;
  const VectorField field = [&p](const Eigen::VectorXd& x, double uu, double,
                                 Eigen::VectorXd& dx) {
    dx = gfm_derivative(StateVector(x), uu, p);
  };
  Trajectory traj = integrate(field, Eigen::VectorXd(x0), u, t_end, cfg, grid_phase_jump);
  traj.meta.params_hash = params_hash(p);
  return traj;
}

PerturbationRecord measure_perturbation(const GfmParams& p,
                                        const StateVector& anchor, double u,
                                        const StateVector& dx, double step) {
  // Two rk4 steps of size `step` for the nominal and the perturbed rollout,
  // then a second-order one-sided slope of their difference at t = 0.
  auto rk4 = [&](StateVector x) {
    const StateVector k1 = gfm_derivative(x, u, p);
    const StateVector k2 = gfm_derivative(x + 0.5 * step * k1, u, p);
    const StateVector k3 = gfm_derivative(x + 0.5 * step * k2, u, p);
    const StateVector k4 = gfm_derivative(x + step * k3, u, p);
    return StateVector(x + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  };
  const StateVector n1 = rk4(anchor);
  const StateVector n2 = rk4(n1);
  const StateVector p0 = anchor + dx;
  const StateVector p1 = rk4(p0);
  const StateVector p2 = rk4(p1);
  const StateVector d0 = p0 - anchor;
  const StateVector d1 = p1 - n1;
  const StateVector d2 = p2 - n2;

  PerturbationRecord rec;
  rec.anchor_state = anchor;
  rec.anchor_u = u;
  rec.delta_x = dx;
  rec.delta_xdot = (-3.0 * d0 + 4.0 * d1 - d2) / (2.0 * step);
  return rec;
}

void add_measurement_noise(Trajectory& traj, double snr_db, std::uint64_t seed) {
  Rng rng(seed);
  const double ratio = std::pow(10.0, snr_db / 10.0);
  for (Eigen::Index c = 0; c < traj.states.cols(); ++c) {
    const double power = traj.states.col(c).squaredNorm() / static_cast<double>(traj.states.rows());
    const double sigma = std::sqrt(power / ratio);
    for (Eigen::Index k = 0; k < traj.states.rows(); ++k) {
      traj.states(k, c) += sigma * normal(rng);
    }
  }
  traj.meta.snr_db = snr_db;
}

namespace {

struct TrajectoryPlan {
  double u0 = 1.0;
  InputSignal input;
  std::vector<int> anchors;
  std::vector<StateVector> directions;
};

// With limiters enabled a steady state exists only while no reference is
// clamped (the PI integrators have no anti-windup).
bool limiters_inactive(const GfmParams& p, double u) {
  if (!p.saturation) return true;
  GfmParams free = p;
  free.saturation = false;
  StateVector x;
  try {
    x = find_equilibrium(free, u);
  } catch (const NumericalError&) {
    return false;
  }
  GfmAlgebraic a;
  gfm_rhs(x, u * std::cos(x[kDelta]), -u * std::sin(x[kDelta]), free.omega_0, free, &a);
  return std::abs(a.i_td_ref) < p.i_limit && std::abs(a.i_tq_ref) < p.i_limit &&
         std::abs(a.v_td_ref) < p.v_limit && std::abs(a.v_tq_ref) < p.v_limit;
}

}  // namespace

Dataset generate_dataset(const GfmParams& p, const DatasetSpec& spec) {
  p.validate();
  if (spec.n_traj < 1) throw ValidationError("generate_dataset: n_traj must be >= 1");
  const auto& ex = spec.excitation;
  if (!(ex.u0_min > 0.0 && ex.u0_max >= ex.u0_min && ex.sag_min > 0.0 &&
        ex.sag_max >= ex.sag_min && ex.event_time >= 0.0 && ex.t_end > ex.event_time &&
        ex.sample_dt > 0.0)) {
    throw ValidationError("generate_dataset: invalid excitation");
  }

  // All random draws happen up front in a fixed order.
  Rng rng = make_rng(spec.seed, "dataset");
  const int n_samples = static_cast<int>(std::lround(ex.t_end / ex.sample_dt)) + 1;
  const int event_index = static_cast<int>(std::lround(ex.event_time / ex.sample_dt));
  std::vector<TrajectoryPlan> plans(spec.n_traj);
  for (auto& plan : plans) {
    plan.u0 = uniform(rng, ex.u0_min, ex.u0_max);
    for (int attempt = 0; !limiters_inactive(p, plan.u0); ++attempt) {
      if (attempt == 1000) {
        throw ValidationError("generate_dataset: no initial operating point in [u0_min, u0_max] "
                              "keeps the limiters inactive");
      }
      plan.u0 = uniform(rng, ex.u0_min, ex.u0_max);
    }
    // 0: sag only, 1: phase jump only, 2: both
    const int kind = static_cast<int>(uniform(rng, 0.0, 3.0));
    double mag = plan.u0;
    double jump = 0.0;
    if (kind != 1) mag = uniform(rng, ex.sag_min, ex.sag_max);
    if (kind != 0) {
      const double sign = uniform(rng) < 0.5 ? -1.0 : 1.0;
      jump = sign * uniform(rng, ex.jump_min_deg, ex.jump_max_deg) * kPi / 180.0;
    }
    // the event sits exactly on the sample grid
    plan.input = InputSignal(plan.u0, {{event_index * ex.sample_dt, mag, jump}});
    for (int a = 0; a < spec.perturbations_per_traj; ++a) {
      // anchors spread over the trajectory, away from the event instant
      int idx = static_cast<int>(uniform(rng, 0.0, n_samples - 1.0));
      if (std::abs(idx - event_index) <= 3) idx = std::min(n_samples - 1, event_index + 4 + a);
      plan.anchors.push_back(idx);
      StateVector dir;
      for (int i = 0; i < kStateDim; ++i) dir[i] = normal(rng);
      plan.directions.push_back(spec.perturbation_norm * dir / dir.norm());
    }
  }

  Dataset out;
  out.trajectories.resize(spec.n_traj);
  std::vector<std::vector<PerturbationRecord>> recs(spec.n_traj);
  parallel_for(spec.n_traj, [&](int i) {
    const auto& plan = plans[i];
    const StateVector x0 = find_equilibrium(p, plan.u0);
    Trajectory clean = simulate_gfm(p, x0, plan.input, ex.t_end, ex.sample_dt, spec.integrator_dt);
    for (std::size_t a = 0; a < plan.anchors.size(); ++a) {
      const int k = plan.anchors[a];
      recs[i].push_back(measure_perturbation(p, clean.states.row(k).transpose(), clean.inputs[k],
                                             plan.directions[a], spec.perturbation_step));
    }
    clean.meta.scenario = "train-" + std::to_string(i);
    clean.meta.seed = spec.seed;
    if (spec.snr_db && std::isfinite(*spec.snr_db)) {
      add_measurement_noise(clean, *spec.snr_db, stream_seed(spec.seed, "noise", i));
    }
    out.trajectories[i] = std::move(clean);
  });
  for (auto& r : recs) {
    out.records.insert(out.records.end(), r.begin(), r.end());
  }
  return out;
}

InputSignal scenario_input(const TestScenario& sc) {
  return InputSignal(sc.u_start, {{sc.t_sag, sc.u_sag, sc.jump_deg * kPi / 180.0},
                                  {sc.t_step, sc.u_test, 0.0}});
}

Trajectory simulate_scenario(const GfmParams& p, const TestScenario& sc) {
  const StateVector x0 = find_equilibrium(p, sc.u_start);
  Trajectory traj = simulate_gfm(p, x0, scenario_input(sc), sc.t_end);
  traj.meta.scenario = "test";
  return traj;
}

}  // namespace pisml::sim
