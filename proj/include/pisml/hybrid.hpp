#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "pisml/featlib.hpp"
#include "pisml/integrate.hpp"
#include "pisml/mlp.hpp"
#include "pisml/sparse_reg.hpp"

namespace pisml {

enum class ModelMode { std_sindy, mod_sindy, pure_node, pisml, pisml_phy, distilled };

std::string to_string(ModelMode m);
ModelMode model_mode_from_string(const std::string& s);

/// Vector field f(x, u) = Xi^T Theta(x, u) + diag(out_scale) N(z~), with
/// z~ = scaler(x, u). Xi acts on the library evaluated in physical units;
/// the network sees scaled inputs and its outputs are mapped back to
/// physical derivative units by out_scale.
struct HybridModel {
  ModelMode mode = ModelMode::mod_sindy;
  feat::FunctionLibrary library;
  reg::CoefficientMatrix xi;
  std::optional<nn::Mlp> mlp;
  reg::Scaler scaler;
  Eigen::VectorXd out_scale;
  // distilled models keep the two stages that were merged into `xi`
  std::optional<feat::FunctionLibrary> residual_library;
  std::optional<reg::CoefficientMatrix> residual_xi;
  std::optional<reg::CoefficientMatrix> backbone_xi;
  nlohmann::json provenance = nlohmann::json::object();

  int n_states() const { return library.n_states(); }
  int n_inputs() const { return library.n_inputs(); }
  void validate() const;

  Eigen::VectorXd derivative(const Eigen::VectorXd& x, double u) const;
  /// d f / d x in physical units.
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& x, double u) const;
  /// Network contribution alone, in physical derivative units.
  Eigen::VectorXd residual(const Eigen::VectorXd& x, double u) const;

  /// Network input z~ for a physical point.
  Eigen::VectorXd scaled_input(const Eigen::VectorXd& x, double u) const;
};

/// Equivalent model with an identity scaler: the affine input map is folded
/// into the first network layer.
HybridModel absorb_scaler(const HybridModel& m);

struct RolloutOptions {
  double sample_dt = 1e-4;
  int substeps = 2;  // rk4 steps per sample interval
  bool phase_jumps = true;
};

/// Integrates the model with fixed-step rk4; throws DivergenceError with the
/// time of blow-up.
Trajectory rollout(const HybridModel& m, const Eigen::VectorXd& x0, const InputSignal& u,
                   double t_end, const RolloutOptions& opt = {});

/// Newton iteration on the model's own field seeded at `guess`.
Eigen::VectorXd model_equilibrium(const HybridModel& m, double u, const Eigen::VectorXd& guess,
                                  double tol = 1e-10, int max_iter = 100);

void to_json(nlohmann::json& j, const HybridModel& m);
void from_json(const nlohmann::json& j, HybridModel& m);

HybridModel load_model(const std::string& path);

}  // namespace pisml
