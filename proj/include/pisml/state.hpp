#pragma once

#include <Eigen/Core>
#include <array>
#include <string_view>

namespace pisml {

inline constexpr int kStateDim = 13;
inline constexpr int kInputDim = 1;

/// Canonical ordering of the grid-forming inverter states.
enum StateIndex : int {
  kDelta = 0,
  kPinv,
  kQinv,
  kPhiD,
  kPhiQ,
  kGammaD,
  kGammaQ,
  kItd,
  kItq,
  kVcd,
  kVcq,
  kIod,
  kIoq,
};

using StateVector = Eigen::Matrix<double, kStateDim, 1>;
using StateMatrix = Eigen::Matrix<double, kStateDim, kStateDim>;

inline constexpr std::array<std::string_view, kStateDim> kStateNames = {
    "delta", "P_inv", "Q_inv", "phi_d", "phi_q", "gamma_d", "gamma_q",
    "i_td",  "i_tq",  "v_cd",  "v_cq",  "i_od",  "i_oq"};

inline constexpr std::string_view kInputName = "u";

/// Name of state i for generic (non-GFM) dimensions: canonical names when
/// n == 13, "x<i>" otherwise.
std::string state_name(int i, int n_states);

}  // namespace pisml
