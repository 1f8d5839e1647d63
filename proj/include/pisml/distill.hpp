#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "pisml/hybrid.hpp"

namespace pisml::distill {

/// Axis-aligned sampling box over (x, u).
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

/// Range of every state and the input over the trajectories, each side
/// widened by `inflate` times the range.
Box training_envelope(const std::vector<Trajectory>& trajs, double inflate = 0.2);

struct SyntheticData {
  Eigen::MatrixXd X;  // n x n_states
  Eigen::VectorXd U;  // n
  Eigen::MatrixXd Y;  // n x n_states, network residual in physical units
};

/// Queries the network residual: half of the points from a Halton sequence
/// over the box, half are trajectory samples with Gaussian jitter (2% of the
/// box width per coordinate).
SyntheticData sample_synthetic(const HybridModel& m, const std::vector<Trajectory>& trajs,
                               const Box& box, int n, std::uint64_t seed);

struct DistillConfig {
  int n_samples = 20000;
  double threshold = 0.01;  // STLSQ threshold on normalized coefficients
  double alpha = 1e-8;
  int max_iter = 20;
  double inflate = 0.2;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

/// STLSQ of the synthetic residual on the library.
reg::CoefficientMatrix distill_residual(const SyntheticData& data, const feat::FunctionLibrary& lib,
                                        const DistillConfig& cfg);

/// Symbolic model on the union of both libraries (backbone terms first);
/// terms with equal descriptors are summed.
HybridModel merge(const HybridModel& hybrid, const feat::FunctionLibrary& residual_lib,
                  const reg::CoefficientMatrix& residual_xi);

/// Full pipeline: envelope, sampling, residual fit on the extended library
/// and merge with the backbone.
HybridModel distill_model(const HybridModel& hybrid, const std::vector<Trajectory>& trajs,
                          const DistillConfig& cfg);

/// One line per state derivative, terms sorted by |coefficient|
/// descending, e.g. "d P_inv/dt = -31.4159*P_inv + 31.4159*(v_cd*i_od + v_cq*i_oq)".
std::string render_equations(const HybridModel& m, int precision = 12);

/// Inverse of render_equations against a known library.
reg::CoefficientMatrix parse_equations(const std::string& text, const feat::FunctionLibrary& lib);

}  // namespace pisml::distill
