#include "pisml/microgrid.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

namespace pisml::sim {

namespace {

Eigen::Vector2d rotate(double angle, double d, double q) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * d - s * q, s * d + c * q};
}

}  // namespace

MicrogridParams MicrogridParams::reference() {
  MicrogridParams mp;
  const double m_p[3] = {0.03, 0.06, 0.05};
  const double K_pV[3] = {1.6, 2.0, 1.4};
  const double K_iV[3] = {3.0, 4.0, 2.0};
  const double K_pC[3] = {0.5, 0.3, 0.4};
  for (int j = 0; j < 3; ++j) {
    GfmParams& u = mp.units[j];
    u.m_p = m_p[j];
    u.K_pV = K_pV[j];
    u.K_iV = K_iV[j];
    u.K_pC = K_pC[j];
    u.K_iC = 4.0;
    u.P_0 = 0.3;
  }
  return mp;
}

void MicrogridParams::validate() const {
  for (const auto& u : units) u.validate();
  if (!(r_n >= 100.0)) throw ValidationError("microgrid: r_n must be >= 100");
  if (!(L_line > 0.0 && L_load > 0.0 && R_line >= 0.0 && R_load >= 0.0)) {
    throw ValidationError("microgrid: line and load impedances must be positive");
  }
  for (const auto& u : units) {
    if (u.f_nom != units[0].f_nom || u.omega_0 != units[0].omega_0) {
      throw ValidationError("microgrid: units must share f_nom and omega_0");
    }
  }
}

void to_json(nlohmann::json& j, const MicrogridParams& p) {
  j = {{"units", p.units},   {"R_line", p.R_line}, {"L_line", p.L_line},
       {"R_load", p.R_load}, {"L_load", p.L_load}, {"r_n", p.r_n}};
}

void from_json(const nlohmann::json& j, MicrogridParams& p) {
  p = MicrogridParams::reference();
  for (const auto& [key, value] : j.items()) {
    if (key == "units") {
      if (!value.is_array() || value.size() != 3) throw ValidationError("microgrid: need exactly 3 units");
      for (int i = 0; i < 3; ++i) p.units[i] = value[i].get<GfmParams>();
    } else if (key == "R_line") {
      p.R_line = value.get<double>();
    } else if (key == "L_line") {
      p.L_line = value.get<double>();
    } else if (key == "R_load") {
      p.R_load = value.get<double>();
    } else if (key == "L_load") {
      p.L_load = value.get<double>();
    } else if (key == "r_n") {
      p.r_n = value.get<double>();
    } else {
      throw ValidationError("microgrid: unknown key '" + key + "'");
    }
  }
  p.validate();
}

Microgrid::Microgrid(MicrogridParams p, LoadStep step, UnitField unit1)
    : p_(std::move(p)), step_(step), unit1_(std::move(unit1)) {
  p_.validate();
  if (!(step_.R >= 0.0 && step_.L > 0.0)) throw ValidationError("microgrid: bad load step branch");
}

Eigen::Vector2d Microgrid::unit_bus_voltage(const Eigen::VectorXd& X, int j) const {
  const int o = unit_offset(j);
  const Eigen::Vector2d io = rotate(X[o], X[o + kIod], X[o + kIoq]);
  const Eigen::Vector2d vb = p_.r_n * (io - X.segment<2>(line_offset(j)));
  return rotate(-X[o], vb[0], vb[1]);
}

Eigen::VectorXd Microgrid::derivative(const Eigen::VectorXd& X, bool step_active) const {
  if (X.size() != kDim) throw ValidationError("microgrid: state has wrong dimension");
  const double wb = p_.units[0].omega_b();
  Eigen::VectorXd dX(kDim);

  // common-frame speed follows unit 1
  double omega_com = 0.0;
  Eigen::VectorXd f1;
  const Eigen::Vector2d vb1 = unit_bus_voltage(X, 0);
  if (unit1_) {
    const double u = vb1.norm();
    Eigen::VectorXd xm = X.segment(0, kUnitStates);
    xm[0] = std::atan2(-vb1[1], vb1[0]);
    f1 = unit1_(xm, u);
    if (f1.size() != kUnitStates) throw ValidationError("microgrid: replacement field has wrong size");
    omega_com = p_.units[0].omega_0 + f1[0] / wb;
  } else {
    const auto& g = p_.units[0];
    omega_com = g.omega_0 - g.m_p * (X[kPinv] - g.P_0);
  }

  Eigen::Vector2d vb_common[3];
  for (int j = 0; j < 3; ++j) {
    const int o = unit_offset(j);
    const Eigen::Vector2d vb = j == 0 ? vb1 : unit_bus_voltage(X, j);
    vb_common[j] = rotate(X[o], vb[0], vb[1]);
    if (j == 0 && unit1_) {
      dX.segment(o, kUnitStates) = f1;
      dX[o] = 0.0;
    } else {
      const StateVector x = X.segment<kUnitStates>(o);
      dX.segment<kUnitStates>(o) = gfm_rhs(x, vb[0], vb[1], omega_com, p_.units[j]);
    }
  }

  // load bus: lines in, load and (optional) step branch out
  Eigen::Vector2d inj = -X.segment<2>(load_offset());
  if (step_active) inj -= X.segment<2>(step_offset());
  for (int j = 0; j < 3; ++j) inj += X.segment<2>(line_offset(j));
  const Eigen::Vector2d vL = p_.r_n * inj;

  auto rl = [&](const Eigen::Vector2d& i, const Eigen::Vector2d& v, double R, double L) {
    Eigen::Vector2d d;
    d[0] = wb / L * (v[0] - R * i[0]) + wb * omega_com * i[1];
    d[1] = wb / L * (v[1] - R * i[1]) - wb * omega_com * i[0];
    return d;
  };
  for (int j = 0; j < 3; ++j) {
    const Eigen::Vector2d i = X.segment<2>(line_offset(j));
    dX.segment<2>(line_offset(j)) = rl(i, vb_common[j] - vL, p_.R_line, p_.L_line);
  }
  dX.segment<2>(load_offset()) = rl(X.segment<2>(load_offset()), vL, p_.R_load, p_.L_load);
  if (step_active) {
    dX.segment<2>(step_offset()) = rl(X.segment<2>(step_offset()), vL, step_.R, step_.L);
  } else {
    dX.segment<2>(step_offset()).setZero();
  }
  return dX;
}

Eigen::MatrixXd Microgrid::reduced_jacobian(const Eigen::VectorXd& X, bool step_active) const {
  // delta_1 is pinned by construction; the step branch is dropped when it is
  // disconnected because its current is frozen at zero
  std::vector<int> idx;
  for (int i = 1; i < kDim; ++i) {
    if (!step_active && i >= step_offset()) continue;
    idx.push_back(i);
  }
  const int n = static_cast<int>(idx.size());
  Eigen::MatrixXd J(n, n);
  for (int c = 0; c < n; ++c) {
    const double h = 1e-7 * std::max(1.0, std::abs(X[idx[c]]));
    Eigen::VectorXd xp = X, xm = X;
    xp[idx[c]] += h;
    xm[idx[c]] -= h;
    const Eigen::VectorXd d = (derivative(xp, step_active) - derivative(xm, step_active)) / (2.0 * h);
    for (int r = 0; r < n; ++r) J(r, c) = d[idx[r]];
  }
  return J;
}

Eigen::VectorXd Microgrid::equilibrium(bool step_active) const {
  // initial guess: each unit at its stiff-grid operating point at u = 1
  Eigen::VectorXd X = Eigen::VectorXd::Zero(kDim);
  StateVector x1 = find_equilibrium(p_.units[0], 1.0);
  for (int j = 0; j < 3; ++j) {
    const StateVector xj = j == 0 ? x1 : find_equilibrium(p_.units[j], 1.0);
    const int o = unit_offset(j);
    X.segment<kUnitStates>(o) = xj;
    X[o] = xj[kDelta] - x1[kDelta];
    const Eigen::Vector2d io = rotate(X[o], xj[kIod], xj[kIoq]);
    X.segment<2>(line_offset(j)) = io;
    X.segment<2>(load_offset()) += io;
  }

  std::vector<int> idx;
  for (int i = 1; i < kDim; ++i) {
    if (!step_active && i >= step_offset()) continue;
    idx.push_back(i);
  }
  const int n = static_cast<int>(idx.size());
  auto residual = [&](const Eigen::VectorXd& Y) {
    const Eigen::VectorXd d = derivative(Y, step_active);
    Eigen::VectorXd r(n);
    for (int i = 0; i < n; ++i) r[i] = d[idx[i]];
    return r;
  };

  // pseudo-transient continuation: (I/tau - J) dx = f, tau grown by the
  // residual reduction ratio (switched evolution relaxation)
  double tau = 1e-6;
  Eigen::VectorXd r = residual(X);
  for (int it = 0; it < 300; ++it) {
    if (r.lpNorm<Eigen::Infinity>() <= 1e-9) return X;
    const Eigen::MatrixXd J = reduced_jacobian(X, step_active);
    Eigen::MatrixXd A = -J;
    A.diagonal().array() += 1.0 / tau;
    const Eigen::VectorXd dx = A.partialPivLu().solve(r);
    Eigen::VectorXd Y = X;
    for (int i = 0; i < n; ++i) Y[idx[i]] += dx[i];
    const Eigen::VectorXd ry = residual(Y);
    if (!ry.allFinite()) {
      tau *= 0.1;
      continue;
    }
    tau = std::clamp(tau * r.norm() / ry.norm(), 1e-9, 1e14);
    X = Y;
    r = ry;
    // the virtual-resistor rows amplify round-off, so the residual floor
    // sits near 1e-8; a vanishing Newton update is the convergence signal
    if (tau >= 1e4 && dx.lpNorm<Eigen::Infinity>() <= 1e-14 * (1.0 + X.lpNorm<Eigen::Infinity>()) &&
        r.lpNorm<Eigen::Infinity>() <= 1e-6) {
      return X;
    }
  }
  if (r.lpNorm<Eigen::Infinity>() <= 1e-9) return X;
  throw NoEquilibriumError("microgrid: equilibrium search stalled at residual " +
                           std::to_string(r.lpNorm<Eigen::Infinity>()) + " (max |dx/dt|)");
}

double Microgrid::stable_dt() const {
  // fastest network mode: the load node charges through r_n from three lines
  const double wb = p_.units[0].omega_b();
  double lg_inv = 0.0;
  for (const auto& u : p_.units) lg_inv = std::max(lg_inv, 1.0 / u.L_g);
  const double unit_node = wb * p_.r_n * (lg_inv + 1.0 / p_.L_line);
  const double load_node = wb * p_.r_n * (3.0 / p_.L_line + 1.0 / p_.L_load + 1.0 / step_.L);
  // rk4 real-axis stability bound is about 2.78
  return 2.0 / std::max(unit_node, load_node);
}

std::vector<Trajectory> Microgrid::simulate(double t_end, double sample_dt) const {
  const Eigen::VectorXd X0 = equilibrium(false);
  // the input signal only marks the switching instant: 1 before, 2 after
  const InputSignal sw(1.0, {InputEvent{step_.time, 2.0, 0.0}});
  IntegratorConfig cfg;
  cfg.sample_dt = sample_dt;
  cfg.dt = sample_dt / std::ceil(sample_dt / stable_dt());
  cfg.blowup = 1e6;
  const VectorField field = [this](const Eigen::VectorXd& x, double u, double, Eigen::VectorXd& dx) {
    dx = derivative(x, u > 1.5);
    if (!dx.allFinite()) throw NumericalError("microgrid: non-finite derivative");
  };
  const Trajectory net = integrate(field, X0, sw, t_end, cfg);

  std::vector<Trajectory> out(3);
  for (int j = 0; j < 3; ++j) {
    Trajectory& tr = out[j];
    tr.times = net.times;
    tr.states = net.states.middleCols(unit_offset(j), kUnitStates);
    tr.inputs.resize(net.size());
    for (int k = 0; k < net.size(); ++k) {
      tr.inputs[k] = unit_bus_voltage(net.states.row(k).transpose(), j).norm();
    }
    tr.input = InputSignal(tr.inputs.front());
    tr.meta.scenario = "microgrid-unit" + std::to_string(j + 1);
    tr.meta.dt = sample_dt;
    tr.meta.params_hash = params_hash(p_.units[j]);
  }
  return out;
}

}  // namespace pisml::sim
