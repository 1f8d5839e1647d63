#pragma once

#include <nlohmann/json_fwd.hpp>

#include "pisml/common.hpp"
#include "pisml/state.hpp"

namespace pisml::sim {

/// Grid-forming inverter parameters in per-unit, defaults from the
/// reference test system. Angular speeds omega_0 / omega_inv are per-unit
/// (1.0 = nominal); omega_c is in rad/s.
struct GfmParams {
  double S_base = 500.0;  // kVA
  double V_base = 480.0;  // V, line-line
  double f_nom = 60.0;    // Hz

  double L_f = 0.10;
  double R_f = 0.02;
  double C_f = 0.05;
  double R_d = 0.05;
  double L_g = 0.05;
  double R_g = 0.01;

  double m_p = 0.05;
  double m_q = 0.05;
  double omega_c = 10.0 * kPi;
  double K_pV = 0.8;
  double K_iV = 3.0;
  double K_pC = 0.2;
  double K_iC = 4.0;

  double P_0 = 0.5;
  double Q_0 = 0.0;
  double V_0 = 1.0;
  double omega_0 = 1.0;

  bool saturation = false;
  double i_limit = 1.2;
  double v_limit = 1.5;

  double omega_b() const noexcept { return 2.0 * kPi * f_nom; }
  void validate() const;
};

void to_json(nlohmann::json& j, const GfmParams& p);
void from_json(const nlohmann::json& j, GfmParams& p);

/// Stable hash of the parameter set (hex).
std::string params_hash(const GfmParams& p);

/// Algebraic quantities evaluated alongside the derivatives.
struct GfmAlgebraic {
  double omega_inv = 0.0;
  double V = 0.0;
  double v_od = 0.0, v_oq = 0.0;
  double i_td_ref = 0.0, i_tq_ref = 0.0;
  double v_td_ref = 0.0, v_tq_ref = 0.0;
};

/// Right-hand side with an explicit bus voltage (v_bd, v_bq) in the
/// inverter frame and common-frame speed omega_com (pu). Shared by the
/// single-unit model and the microgrid composition. Does not check finiteness.
StateVector gfm_rhs(const StateVector& x, double v_bd, double v_bq,
                    double omega_com, const GfmParams& p,
                    GfmAlgebraic* algebraic = nullptr);

/// Stiff-grid vector field: v_bd = u cos(delta), v_bq = -u sin(delta),
/// omega_com = omega_0. Throws NumericalError with a state dump when the
/// result is not finite.
StateVector gfm_derivative(const StateVector& x, double u, const GfmParams& p);

/// Equilibrium x* with ||f(x*, u)||_inf <= 1e-10. Newton from a flat start,
/// falling back to a 2 s settling simulation followed by Newton polishing.
StateVector find_equilibrium(const GfmParams& p, double u);

/// Saturation variant used by the saturation scenario: limiters enabled at
/// the configured i_limit / v_limit.
GfmParams saturation_variant(GfmParams p);

/// Flat start used to seed the equilibrium search.
StateVector flat_start(const GfmParams& p);

}  // namespace pisml::sim
