#include "pisml/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pisml/common.hpp"

namespace pisml {

InputSignal::InputSignal(double initial, std::vector<InputEvent> events)
    : initial_(initial), events_(std::move(events)) {
  validate();
}

double InputSignal::value(double t) const {
  double v = initial_;
  for (const auto& ev : events_) {
    if (ev.time <= t) {
      v = ev.magnitude;
    } else {
      break;
    }
  }
  return v;
}

InputSignal InputSignal::shifted(double t0) const {
  InputSignal out;
  out.initial_ = value(t0);
  for (const auto& ev : events_) {
    if (ev.time > t0) {
      out.events_.push_back({ev.time - t0, ev.magnitude, ev.phase_jump});
    }
  }
  return out;
}

void InputSignal::validate() const {
  if (!(initial_ > 0.0) || !std::isfinite(initial_)) {
    throw ValidationError("input signal: magnitude must be positive");
  }
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const auto& ev = events_[i];
    if (!(ev.magnitude > 0.0) || !std::isfinite(ev.magnitude) ||
        !std::isfinite(ev.time) || !std::isfinite(ev.phase_jump)) {
      throw ValidationError("input signal: invalid event");
    }
    if (i > 0 && ev.time < events_[i - 1].time) {
      throw ValidationError("input signal: events must be time-sorted");
    }
  }
}

void Trajectory::validate() const {
  const auto k = times.size();
  if (static_cast<std::size_t>(states.rows()) != k || inputs.size() != k) {
    throw ValidationError("trajectory: times, states and inputs differ in length");
  }
  for (std::size_t i = 1; i < k; ++i) {
    if (!(times[i] > times[i - 1])) {
      throw ValidationError("trajectory: times must be increasing");
    }
  }
  if (!states.allFinite()) {
    throw ValidationError("trajectory: non-finite state");
  }
}

void grid_phase_jump(Eigen::VectorXd& x, const InputEvent& ev) {
  if (ev.phase_jump != 0.0 && x.size() > 0) {
    x[0] -= ev.phase_jump;
  }
}

namespace {

void check_state(const Eigen::VectorXd& x, double t, double bound) {
  if (!x.allFinite() || x.cwiseAbs().maxCoeff() > bound) {
    std::ostringstream os;
    os << "integration diverged at t=" << t;
    throw DivergenceError(os.str(), t);
  }
}

struct Rk4Stepper {
  const VectorField& f;
  Eigen::VectorXd k1, k2, k3, k4, tmp;

  explicit Rk4Stepper(const VectorField& field, Eigen::Index n)
      : f(field), k1(n), k2(n), k3(n), k4(n), tmp(n) {}

  void step(Eigen::VectorXd& x, double u, double t, double h) {
    f(x, u, t, k1);
    tmp = x + 0.5 * h * k1;
    f(tmp, u, t + 0.5 * h, k2);
    tmp = x + 0.5 * h * k2;
    f(tmp, u, t + 0.5 * h, k3);
    tmp = x + h * k3;
    f(tmp, u, t + h, k4);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  void advance(Eigen::VectorXd& x, double u, double t0, double t1, double dt,
               double bound) {
    const double len = t1 - t0;
    if (len <= 0.0) return;
    const long n = std::max(1L, static_cast<long>(std::ceil(len / dt - 1e-9)));
    const double h = len / static_cast<double>(n);
    for (long i = 0; i < n; ++i) {
      step(x, u, t0 + i * h, h);
      check_state(x, t0 + (i + 1) * h, bound);
    }
  }
};

// Dormand-Prince 5(4) with Hairer's 4th-order dense output.
struct Dopri5 {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                          a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33,
                          a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113,
                          a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695,
                          e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0,
                          d3 = 87487479700.0 / 32700410799.0,
                          d4 = -10690763975.0 / 1880347072.0,
                          d5 = 701980252875.0 / 199316789632.0,
                          d6 = -1453857185.0 / 822651844.0,
                          d7 = 69997945.0 / 29380423.0;
};

}  // namespace

Trajectory integrate(const VectorField& field, const Eigen::VectorXd& x0,
                     const InputSignal& u, double t_end,
                     const IntegratorConfig& cfg, const JumpMap& jump) {
  u.validate();
  if (!(cfg.sample_dt > 0.0)) throw ValidationError("integrate: sample_dt must be > 0");
  if (!(t_end >= 0.0)) throw ValidationError("integrate: t_end must be >= 0");
  if (cfg.method == Method::rk4 && !(cfg.dt > 0.0)) {
    throw ValidationError("integrate: rk4 requires dt > 0");
  }
  if (cfg.method == Method::rk45 && !(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0)) {
    throw ValidationError("integrate: rk45 requires rel_tol, abs_tol > 0");
  }

  const Eigen::Index n = x0.size();
  const long n_samples = std::lround(t_end / cfg.sample_dt) + 1;
  const double eps = 1e-9 * cfg.sample_dt;

  Trajectory traj;
  traj.times.resize(n_samples);
  traj.inputs.resize(n_samples);
  traj.states.resize(n_samples, n);
  traj.input = u;
  traj.meta.dt = cfg.sample_dt;
  for (long k = 0; k < n_samples; ++k) traj.times[k] = k * cfg.sample_dt;

  const auto& events = u.events();
  std::size_t next_event = 0;
  double u_now = u.initial();
  Eigen::VectorXd x = x0;
  auto apply_events_up_to = [&](double t) {
    while (next_event < events.size() && events[next_event].time <= t + eps) {
      if (jump) jump(x, events[next_event]);
      u_now = events[next_event].magnitude;
      ++next_event;
    }
  };

  apply_events_up_to(0.0);
  check_state(x, 0.0, cfg.blowup);
  traj.states.row(0) = x.transpose();
  traj.inputs[0] = u_now;

  if (cfg.method == Method::rk4) {
    Rk4Stepper rk(field, n);
    double t = 0.0;
    for (long k = 1; k < n_samples; ++k) {
      const double target = traj.times[k];
      while (t < target - eps) {
        double stop = target;
        if (next_event < events.size() && events[next_event].time < target - eps) {
          stop = std::max(events[next_event].time, t);
        }
        rk.advance(x, u_now, t, stop, cfg.dt, cfg.blowup);
        t = stop;
        apply_events_up_to(t);
      }
      t = target;
      apply_events_up_to(t);
      traj.states.row(k) = x.transpose();
      traj.inputs[k] = u_now;
    }
    return traj;
  }

  // Adaptive Dormand-Prince: integrate each event-free segment continuously
  // and fill sample points from the dense output.
  using D = Dopri5;
  Eigen::VectorXd k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), y(n), y1(n),
      err(n), r2(n), r3(n), r4(n), r5(n);
  long next_sample = 1;
  double t = 0.0;
  double h = std::min(cfg.max_step, cfg.sample_dt);
  long steps = 0;

  while (next_sample < n_samples) {
    double seg_end = traj.times[n_samples - 1];
    if (next_event < events.size()) seg_end = std::min(seg_end, events[next_event].time);
    if (seg_end < t) seg_end = t;

    field(x, u_now, t, k1);
    while (t < seg_end - eps) {
      if (++steps > cfg.max_steps) throw StiffnessError("rk45: step budget exhausted");
      h = std::min({h, cfg.max_step, seg_end - t});
      y = x + h * D::a21 * k1;
      field(y, u_now, t + D::c2 * h, k2);
      y = x + h * (D::a31 * k1 + D::a32 * k2);
      field(y, u_now, t + D::c3 * h, k3);
      y = x + h * (D::a41 * k1 + D::a42 * k2 + D::a43 * k3);
      field(y, u_now, t + D::c4 * h, k4);
      y = x + h * (D::a51 * k1 + D::a52 * k2 + D::a53 * k3 + D::a54 * k4);
      field(y, u_now, t + D::c5 * h, k5);
      y = x + h * (D::a61 * k1 + D::a62 * k2 + D::a63 * k3 + D::a64 * k4 + D::a65 * k5);
      field(y, u_now, t + h, k6);
      y1 = x + h * (D::a71 * k1 + D::a73 * k3 + D::a74 * k4 + D::a75 * k5 + D::a76 * k6);
      field(y1, u_now, t + h, k7);
      err = h * (D::e1 * k1 + D::e3 * k3 + D::e4 * k4 + D::e5 * k5 + D::e6 * k6 + D::e7 * k7);

      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double sc = cfg.abs_tol + cfg.rel_tol * std::max(std::abs(x[i]), std::abs(y1[i]));
        acc += (err[i] / sc) * (err[i] / sc);
      }
      const double e = std::sqrt(acc / static_cast<double>(n));
      if (!std::isfinite(e)) {
        h *= 0.25;
        if (h < cfg.min_step * std::max(1.0, std::abs(t))) {
          throw DivergenceError("rk45: non-finite stage", t);
        }
        continue;
      }
      if (e <= 1.0) {
        const double t_new = t + h;
        r2 = y1 - x;
        r3 = h * k1 - r2;
        r4 = r2 - h * k7 - r3;
        r5 = h * (D::d1 * k1 + D::d3 * k3 + D::d4 * k4 + D::d5 * k5 + D::d6 * k6 + D::d7 * k7);
        while (next_sample < n_samples && traj.times[next_sample] <= t_new + eps &&
               traj.times[next_sample] < seg_end - eps) {
          const double th = (traj.times[next_sample] - t) / h;
          const double th1 = 1.0 - th;
          Eigen::VectorXd xs = x + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)));
          traj.states.row(next_sample) = xs.transpose();
          traj.inputs[next_sample] = u_now;
          ++next_sample;
        }
        x = y1;
        k1 = k7;
        t = t_new;
        check_state(x, t, cfg.blowup);
      }
      const double fac = (e == 0.0) ? 5.0 : std::clamp(0.9 * std::pow(e, -0.2), 0.2, 5.0);
      h *= fac;
      if (h < cfg.min_step * std::max(1.0, std::abs(t))) {
        throw StiffnessError("rk45: step size underflow");
      }
    }
    t = seg_end;
    apply_events_up_to(t);
    // samples that coincide with the segment end are taken after the event
    while (next_sample < n_samples && traj.times[next_sample] <= t + eps) {
      traj.states.row(next_sample) = x.transpose();
      traj.inputs[next_sample] = u_now;
      ++next_sample;
    }
    if (next_sample >= n_samples) break;
    if (next_event >= events.size() && t >= traj.times[n_samples - 1] - eps) break;
  }
  return traj;
}

}  // namespace pisml
