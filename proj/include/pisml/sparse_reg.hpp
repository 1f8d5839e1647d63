#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "pisml/integrate.hpp"

namespace pisml::reg {

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Xi (p x n): column i holds the coefficients of dx_i/dt over the library.
struct CoefficientMatrix {
  Eigen::MatrixXd values;
  BoolMatrix mask;
  std::string library_hash;
  // solver diagnostics, not serialized
  bool converged = true;
  std::vector<int> empty_columns;  // columns where every term was eliminated

  CoefficientMatrix() = default;
  CoefficientMatrix(Eigen::MatrixXd v, std::string hash);

  int rows() const noexcept { return static_cast<int>(values.rows()); }
  int cols() const noexcept { return static_cast<int>(values.cols()); }
  int active_count() const { return static_cast<int>(mask.count()); }
  /// Zeroes inactive entries and checks shapes.
  void enforce_mask();
  void validate() const;
};

CoefficientMatrix zero_coefficients(int p, int n, std::string library_hash = {});

void to_json(nlohmann::json& j, const CoefficientMatrix& c);
void from_json(const nlohmann::json& j, CoefficientMatrix& c);

enum class ScalerMode { identity, minmax, standard };

/// Affine map z~ = scale .* (z - shift) over the stacked (x, u) columns.
struct Scaler {
  ScalerMode mode = ScalerMode::identity;
  Eigen::VectorXd shift;
  Eigen::VectorXd scale;

  int dim() const noexcept { return static_cast<int>(shift.size()); }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& Z) const;
  Eigen::MatrixXd invert(const Eigen::MatrixXd& Zs) const;
  void validate() const;
};

Scaler identity_scaler(int dim);
/// Fits on the rows of Z (states then inputs). Constant columns get scale 1
/// with shift equal to the column value (standard) or minimum (minmax).
Scaler fit_scaler(const Eigen::MatrixXd& Z, ScalerMode mode);
Scaler fit_scaler(const std::vector<Trajectory>& trajs, ScalerMode mode);

std::string to_string(ScalerMode m);
ScalerMode scaler_mode_from_string(const std::string& s);
void to_json(nlohmann::json& j, const Scaler& s);
void from_json(const nlohmann::json& j, Scaler& s);

/// Stacks states and inputs of a trajectory into K x (n + 1).
Eigen::MatrixXd stack_state_input(const Trajectory& traj);

struct DerivativeEstimate {
  Eigen::MatrixXd xdot;     // K x n
  std::vector<bool> valid;  // false inside the guard window around events
};

/// Central differences in the interior, second-order one-sided at both
/// ends. Samples within `guard` steps of an input event are flagged invalid.
DerivativeEstimate estimate_derivatives(const Trajectory& traj, int guard = 3);

/// Column-wise ridge: (Theta^T Theta + alpha I) xi = Theta^T xdot.
CoefficientMatrix fit_ridge(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                            double alpha);

/// Sequentially thresholded least squares, independent per column.
CoefficientMatrix fit_stlsq(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                            double threshold, double alpha = 1e-8, int max_iter = 20);

/// Lasso by proximal gradient with backtracking. If `objective` is given,
/// it receives the objective value after every accepted step.
CoefficientMatrix fit_l1(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                         double lambda, int max_iter = 20000, double tol = 1e-14,
                         std::vector<double>* objective = nullptr);

/// Column RMS of Theta and target RMS of Xdot; zero entries replaced by 1.
struct Normalization {
  Eigen::VectorXd column_scale;  // p
  Eigen::VectorXd target_scale;  // n
};

Normalization normalization_for(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot);

/// Xi in normalized units: xi~_ji = xi_ji * c_j / d_i, and back.
Eigen::MatrixXd to_normalized(const Eigen::MatrixXd& Xi, const Normalization& nz);
Eigen::MatrixXd from_normalized(const Eigen::MatrixXd& Xi, const Normalization& nz);

enum class Solver { ridge, stlsq, l1 };

struct FitConfig {
  Solver solver = Solver::ridge;
  double alpha = 0.0;
  double threshold = 0.0;
  double lambda = 0.0;
  int max_iter = 20;
  bool normalize = true;
};

/// Runs the configured solver on the normalized problem (when enabled) so
/// thresholds and penalties are dimensionless; returns physical Xi.
CoefficientMatrix fit(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                      const FitConfig& cfg, const std::string& library_hash = {});

}  // namespace pisml::reg
