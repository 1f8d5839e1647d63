#pragma once

#include <Eigen/Core>
#include <array>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "pisml/gfm.hpp"
#include "pisml/integrate.hpp"

namespace pisml::sim {

/// Three grid-forming units in a star: each unit bus feeds one RL line into
/// a common RL load bus. Node voltages come from a virtual resistor r_n
/// carrying the net current injected into each node.
struct MicrogridParams {
  std::array<GfmParams, 3> units;
  double R_line = 0.01;
  double L_line = 0.001;
  double R_load = 0.9;
  double L_load = 0.4358;
  double r_n = 1000.0;

  /// Heterogeneous reference configuration (droop and inner-loop gains
  /// differ per unit, P_0 = 0.3 on every unit).
  static MicrogridParams reference();
  void validate() const;
};

void to_json(nlohmann::json& j, const MicrogridParams& p);
void from_json(const nlohmann::json& j, MicrogridParams& p);

/// Parallel RL branch switched onto the load bus at `time`.
struct LoadStep {
  double time = 0.02;
  double R = 3.6;
  double L = 1.7432;
};

/// Replacement dynamics for one unit, in the stiff-grid convention: the
/// bus voltage enters as magnitude u and angle state x[0] such that
/// (v_bd, v_bq) = (u cos x0, -u sin x0); component 0 of the result is
/// omega_b (omega_inv - omega_0).
using UnitField = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double u)>;

/// State layout: 13 states per unit (unit frames, delta_j relative to the
/// common frame), then line currents (D,Q) of units 1..3, load current,
/// step-branch current (all in the common frame). The common frame rotates
/// with unit 1, so delta_1 has zero derivative.
class Microgrid {
 public:
  static constexpr int kUnitStates = 13;
  static constexpr int kDim = 3 * kUnitStates + 10;

  explicit Microgrid(MicrogridParams p, LoadStep step = {}, UnitField unit1 = {});

  const MicrogridParams& params() const noexcept { return p_; }
  const LoadStep& load_step() const noexcept { return step_; }
  bool has_replacement() const noexcept { return static_cast<bool>(unit1_); }

  static int unit_offset(int j) { return kUnitStates * j; }
  static int line_offset(int j) { return 3 * kUnitStates + 2 * j; }
  static constexpr int load_offset() { return 3 * kUnitStates + 6; }
  static constexpr int step_offset() { return 3 * kUnitStates + 8; }

  Eigen::VectorXd derivative(const Eigen::VectorXd& X, bool step_active) const;

  /// Bus voltage of unit j expressed in its own frame.
  Eigen::Vector2d unit_bus_voltage(const Eigen::VectorXd& X, int j) const;

  /// Operating point with the step branch disconnected (delta_1 = 0).
  /// Pseudo-transient continuation followed by Newton on the reduced
  /// system; throws NoEquilibriumError when it stalls.
  Eigen::VectorXd equilibrium(bool step_active = false) const;

  /// Jacobian of the reduced system (delta_1 removed), central differences.
  Eigen::MatrixXd reduced_jacobian(const Eigen::VectorXd& X, bool step_active) const;

  /// rk4 step size inside the explicit stability limit of the network.
  double stable_dt() const;

  /// Simulates from the pre-step equilibrium; returns one trajectory per
  /// unit (unit-frame states, input column = bus-voltage magnitude).
  std::vector<Trajectory> simulate(double t_end, double sample_dt = 1e-4) const;

 private:
  MicrogridParams p_;
  LoadStep step_;
  UnitField unit1_;
};

}  // namespace pisml::sim
