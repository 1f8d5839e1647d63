#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pisml/gfm.hpp"
#include "pisml/integrate.hpp"

namespace pisml::sim {

/// Small-signal response around a sampled anchor state.
struct PerturbationRecord {
  StateVector anchor_state = StateVector::Zero();
  double anchor_u = 1.0;
  StateVector delta_x = StateVector::Zero();
  StateVector delta_xdot = StateVector::Zero();
};

/// Random grid excitation applied to every generated trajectory.
struct Excitation {
  double u0_min = 0.8;   // initial operating point range (pu)
  double u0_max = 1.2;
  double sag_min = 0.8;  // post-event magnitude range (pu)
  double sag_max = 1.0;
  double jump_min_deg = 5.0;
  double jump_max_deg = 10.0;
  double event_time = 0.005;
  double t_end = 0.02;
  double sample_dt = 1e-4;
};

struct DatasetSpec {
  int n_traj = 12;
  Excitation excitation;
  std::optional<double> snr_db;  // empty = clean
  std::uint64_t seed = 0;
  int perturbations_per_traj = 16;
  double perturbation_norm = 1e-4;
  double perturbation_step = 1e-7;  // slope extraction step for paired rollouts
  double integrator_dt = 1e-5;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<PerturbationRecord> records;
};

/// Simulates the stiff-grid inverter from x0 under `u` (rk4 at `dt`,
/// sampled at `sample_dt`), applying grid phase jumps to the angle state.
Trajectory simulate_gfm(const GfmParams& p, const StateVector& x0,
                        const InputSignal& u, double t_end,
                        double sample_dt = 1e-4, double dt = 1e-5);

/// Seeded training data: each trajectory starts at the equilibrium of a
/// random u0, receives one sag and/or phase jump at `event_time`, and is
/// sampled at 10 kHz. Perturbation records come from paired rollouts.
Dataset generate_dataset(const GfmParams& p, const DatasetSpec& spec);

/// Paired-rollout small-signal record at (anchor, u) along direction dx.
PerturbationRecord measure_perturbation(const GfmParams& p,
                                        const StateVector& anchor, double u,
                                        const StateVector& dx, double step);

/// Adds white Gaussian noise per state channel so that each channel reaches
/// the requested SNR against its own mean signal power.
void add_measurement_noise(Trajectory& traj, double snr_db, std::uint64_t seed);

/// Standard evaluation scenario: equilibrium at u_start, sag plus phase jump
/// at 5 ms, step to u_test at t_step, run to t_end.
struct TestScenario {
  double u_start = 1.0;
  double u_sag = 0.9;
  double jump_deg = 7.5;
  double t_sag = 0.005;
  double u_test = 0.4;
  double t_step = 0.02;
  double t_end = 0.04;
};

InputSignal scenario_input(const TestScenario& sc);
Trajectory simulate_scenario(const GfmParams& p, const TestScenario& sc);

}  // namespace pisml::sim
