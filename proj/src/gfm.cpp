#include "pisml/gfm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pisml/integrate.hpp"

namespace pisml::sim {

void GfmParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ValidationError(std::string("gfm params: ") + name + " must be > 0");
    }
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError(std::string("gfm params: ") + name + " must be >= 0");
    }
  };
  positive(f_nom, "f_nom");
  positive(L_f, "L_f");
  positive(C_f, "C_f");
  positive(L_g, "L_g");
  non_negative(R_f, "R_f");
  non_negative(R_d, "R_d");
  non_negative(R_g, "R_g");
  non_negative(m_p, "m_p");
  non_negative(m_q, "m_q");
  non_negative(omega_c, "omega_c");
  non_negative(K_pV, "K_pV");
  non_negative(K_iV, "K_iV");
  non_negative(K_pC, "K_pC");
  non_negative(K_iC, "K_iC");
  positive(omega_0, "omega_0");
  if (saturation) {
    positive(i_limit, "i_limit");
    positive(v_limit, "v_limit");
  }
}

#define PISML_GFM_FIELDS(X)                                                   \
  X(S_base) X(V_base) X(f_nom) X(L_f) X(R_f) X(C_f) X(R_d) X(L_g) X(R_g)      \
  X(m_p) X(m_q) X(omega_c) X(K_pV) X(K_iV) X(K_pC) X(K_iC) X(P_0) X(Q_0)      \
  X(V_0) X(omega_0) X(saturation) X(i_limit) X(v_limit)

void to_json(nlohmann::json& j, const GfmParams& p) {
  j = nlohmann::json::object();
#define X(name) j[#name] = p.name;
  PISML_GFM_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, GfmParams& p) {
  if (!j.is_object()) throw ValidationError("gfm params: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
#define X(name) known = known || key == #name;
    PISML_GFM_FIELDS(X)
#undef X
    if (!known) throw ValidationError("gfm params: unknown field '" + key + "'");
  }
#define X(name) \
  if (j.contains(#name)) j.at(#name).get_to(p.name);
  PISML_GFM_FIELDS(X)
#undef X
  p.validate();
}

#undef PISML_GFM_FIELDS

std::string params_hash(const GfmParams& p) {
  nlohmann::json j = p;
  return hex64(fnv1a64(j.dump()));
}

StateVector gfm_rhs(const StateVector& x, double v_bd, double v_bq,
                    double omega_com, const GfmParams& p, GfmAlgebraic* alg) {
  const double wb = p.omega_b();
  const double P = x[kPinv], Q = x[kQinv];
  const double itd = x[kItd], itq = x[kItq];
  const double vcd = x[kVcd], vcq = x[kVcq];
  const double iod = x[kIod], ioq = x[kIoq];

  const double omega_inv = p.omega_0 - p.m_p * (P - p.P_0);
  const double V = p.V_0 - p.m_q * (Q - p.Q_0);
  const double vod = vcd + p.R_d * (itd - iod);
  const double voq = vcq + p.R_d * (itq - ioq);
  const double vod_ref = V;
  const double voq_ref = 0.0;

  double itd_ref = p.K_pV * (vod_ref - vod) + p.K_iV * x[kPhiD];
  double itq_ref = p.K_pV * (voq_ref - voq) + p.K_iV * x[kPhiQ];
  if (p.saturation) {
    itd_ref = std::clamp(itd_ref, -p.i_limit, p.i_limit);
    itq_ref = std::clamp(itq_ref, -p.i_limit, p.i_limit);
  }
  double vtd = p.K_pC * (itd_ref - itd) + p.K_iC * x[kGammaD] - p.omega_0 * p.L_f * itq;
  double vtq = p.K_pC * (itq_ref - itq) + p.K_iC * x[kGammaQ] + p.omega_0 * p.L_f * itd;
  if (p.saturation) {
    vtd = std::clamp(vtd, -p.v_limit, p.v_limit);
    vtq = std::clamp(vtq, -p.v_limit, p.v_limit);
  }

  StateVector dx;
  dx[kDelta] = wb * (omega_inv - omega_com);
  dx[kPinv] = -p.omega_c * P + p.omega_c * (vod * iod + voq * ioq);
  dx[kQinv] = -p.omega_c * Q + p.omega_c * (voq * iod - vod * ioq);
  dx[kPhiD] = vod_ref - vod;
  dx[kPhiQ] = voq_ref - voq;
  dx[kGammaD] = itd_ref - itd;
  dx[kGammaQ] = itq_ref - itq;
  dx[kItd] = wb / p.L_f * (vtd - vod - p.R_f * itd + omega_inv * p.L_f * itq);
  dx[kItq] = wb / p.L_f * (vtq - voq - p.R_f * itq - omega_inv * p.L_f * itd);
  dx[kVcd] = wb / p.C_f * (itd - iod + omega_inv * p.C_f * vcq);
  dx[kVcq] = wb / p.C_f * (itq - ioq - omega_inv * p.C_f * vcd);
  dx[kIod] = wb / p.L_g * (vod - v_bd - p.R_g * iod + omega_inv * p.L_g * ioq);
  dx[kIoq] = wb / p.L_g * (voq - v_bq - p.R_g * ioq - omega_inv * p.L_g * iod);

  if (alg) {
    alg->omega_inv = omega_inv;
    alg->V = V;
    alg->v_od = vod;
    alg->v_oq = voq;
    alg->i_td_ref = itd_ref;
    alg->i_tq_ref = itq_ref;
    alg->v_td_ref = vtd;
    alg->v_tq_ref = vtq;
  }
  return dx;
}

StateVector gfm_derivative(const StateVector& x, double u, const GfmParams& p) {
  const double delta = x[kDelta];
  StateVector dx = gfm_rhs(x, u * std::cos(delta), -u * std::sin(delta), p.omega_0, p);
  if (!dx.allFinite()) {
    std::ostringstream os;
    os << "gfm_derivative: non-finite result at u=" << u << ", x=[";
    for (int i = 0; i < kStateDim; ++i) {
      os << (i ? ", " : "") << kStateNames[i] << "=" << x[i];
    }
    os << "]";
    throw NumericalError(os.str());
  }
  return dx;
}

GfmParams saturation_variant(GfmParams p) {
  p.saturation = true;
  return p;
}

StateVector flat_start(const GfmParams& p) {
  StateVector x = StateVector::Zero();
  x[kVcd] = p.V_0;
  return x;
}

namespace {

constexpr double kEquilibriumTol = 1e-10;

StateMatrix central_jacobian(const StateVector& x, double u, const GfmParams& p) {
  StateMatrix J;
  for (int j = 0; j < kStateDim; ++j) {
    const double h = 1e-7 * std::max(1.0, std::abs(x[j]));
    StateVector xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    J.col(j) = (gfm_rhs(xp, u * std::cos(xp[kDelta]), -u * std::sin(xp[kDelta]), p.omega_0, p) -
                gfm_rhs(xm, u * std::cos(xm[kDelta]), -u * std::sin(xm[kDelta]), p.omega_0, p)) /
               (2.0 * h);
  }
  return J;
}

StateVector stiff_rhs(const StateVector& x, double u, const GfmParams& p) {
  return gfm_rhs(x, u * std::cos(x[kDelta]), -u * std::sin(x[kDelta]), p.omega_0, p);
}

bool newton(StateVector& x, double u, const GfmParams& p, int max_iter) {
  StateVector f = stiff_rhs(x, u, p);
  double norm = f.cwiseAbs().maxCoeff();
  for (int it = 0; it < max_iter && std::isfinite(norm); ++it) {
    if (norm <= kEquilibriumTol) return true;
    const StateMatrix J = central_jacobian(x, u, p);
    const StateVector step = J.completeOrthogonalDecomposition().solve(-f);
    if (!step.allFinite()) return false;
    double lambda = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const StateVector trial = x + lambda * step;
      const StateVector ft = stiff_rhs(trial, u, p);
      const double nt = ft.cwiseAbs().maxCoeff();
      if (std::isfinite(nt) && nt < norm) {
        x = trial;
        f = ft;
        norm = nt;
        improved = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!improved) break;
  }
  return norm <= kEquilibriumTol;
}

}  // namespace

StateVector find_equilibrium(const GfmParams& p, double u) {
  p.validate();
  if (!(u > 0.1 && u < 1.5)) {
    throw ValidationError("find_equilibrium: u must lie in (0.1, 1.5)");
  }
  StateVector x = flat_start(p);
  if (newton(x, u, p, 100)) return x;

  // Fallback: let the system settle, then polish.
  IntegratorConfig cfg;
  cfg.dt = 1e-5;
  cfg.sample_dt = 0.1;
  const VectorField field = [&](const Eigen::VectorXd& xs, double uu, double,
                                Eigen::VectorXd& dx) {
    dx = stiff_rhs(StateVector(xs), uu, p);
  };
  try {
    const Trajectory settle = integrate(field, Eigen::VectorXd(flat_start(p)),
                                        InputSignal(u), 2.0, cfg, grid_phase_jump);
    x = settle.states.row(settle.size() - 1).transpose();
  } catch (const NumericalError&) {
    throw NoEquilibriumError("find_equilibrium: settling simulation diverged");
  }
  if (newton(x, u, p, 100)) return x;
  std::ostringstream os;
  os << "find_equilibrium: no convergence at u=" << u;
  throw NoEquilibriumError(os.str());
}

}  // namespace pisml::sim
