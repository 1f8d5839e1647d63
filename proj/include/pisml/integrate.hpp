#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pisml {

/// A step change of the grid-voltage magnitude and/or grid phase.
struct InputEvent {
  double time = 0.0;
  double magnitude = 1.0;
  double phase_jump = 0.0;  // rad, added to the grid angle
};

/// Piecewise-constant grid-voltage magnitude u(t) with a time-sorted event
/// list. The value is right-continuous at event times.
class InputSignal {
 public:
  InputSignal() = default;
  explicit InputSignal(double initial, std::vector<InputEvent> events = {});

  double initial() const noexcept { return initial_; }
  const std::vector<InputEvent>& events() const noexcept { return events_; }
  double value(double t) const;

  /// The signal seen from `t0` onward, re-timed so that t0 maps to zero.
  InputSignal shifted(double t0) const;

  void validate() const;

 private:
  double initial_ = 1.0;
  std::vector<InputEvent> events_;
};

struct TrajectoryMeta {
  std::string scenario = "custom";
  std::optional<double> snr_db;  // empty means clean
  std::uint64_t seed = 0;
  double dt = 1e-4;
  std::string params_hash;
};

/// Uniformly sampled trajectory; row k of `states` is x(t_k).
struct Trajectory {
  std::vector<double> times;
  Eigen::MatrixXd states;
  std::vector<double> inputs;
  InputSignal input;
  TrajectoryMeta meta;

  int size() const noexcept { return static_cast<int>(times.size()); }
  int n_states() const noexcept { return static_cast<int>(states.cols()); }
  void validate() const;
};

/// dx = f(x, u, t).
using VectorField = std::function<void(const Eigen::VectorXd& x, double u,
                                       double t, Eigen::VectorXd& dx)>;

/// State map applied at an input event (e.g. a grid phase jump shifts the
/// relative angle state).
using JumpMap = std::function<void(Eigen::VectorXd& x, const InputEvent& ev)>;

enum class Method { rk4, rk45 };

struct IntegratorConfig {
  Method method = Method::rk4;
  double dt = 1e-5;           // rk4 internal step
  double rel_tol = 1e-8;      // rk45
  double abs_tol = 1e-10;     // rk45
  double sample_dt = 1e-4;    // output grid
  double min_step = 1e-13;    // rk45 underflow bound
  double max_step = 1e-3;     // rk45
  long max_steps = 50'000'000;
  double blowup = 1e8;        // |x| beyond this is treated as divergence
};

/// Integrates `field` from x0 over [0, t_end] and emits samples on the
/// uniform grid k * cfg.sample_dt. Events are honoured exactly: integration
/// stops at each event time, applies `jump` and the new input magnitude,
/// then restarts.
Trajectory integrate(const VectorField& field, const Eigen::VectorXd& x0,
                     const InputSignal& u, double t_end,
                     const IntegratorConfig& cfg, const JumpMap& jump = {});

/// Default jump map: a grid phase jump of +theta shifts the inverter angle
/// measured against the grid (state 0) by -theta.
void grid_phase_jump(Eigen::VectorXd& x, const InputEvent& ev);

}  // namespace pisml
