#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

namespace pisml::feat {

enum class TermKind {
  constant,
  state,       // x_i
  input,       // u_i
  poly2,       // z_i * z_j over the stacked vector z = (x, u)
  power_P,     // v_cd*i_od + v_cq*i_oq
  power_Q,     // v_cq*i_od - v_cd*i_oq
  trig_cos,    // u*cos(delta)
  trig_sin,    // u*sin(delta)
  bilinear_P,  // x_i * (P_inv - P_0)
  bilinear_Q,  // x_i * (Q_inv - Q_0)
};

struct TermDescriptor {
  TermKind kind = TermKind::constant;
  int i = -1;
  int j = -1;
  std::string display;

  bool operator==(const TermDescriptor& o) const {
    return kind == o.kind && i == o.i && j == o.j && display == o.display;
  }
};

/// Ordered candidate-function library Theta(x, u).
class FunctionLibrary {
 public:
  FunctionLibrary() = default;
  FunctionLibrary(int n_states, int n_inputs, std::vector<TermDescriptor> terms,
                  double P_0 = 0.0, double Q_0 = 0.0);

  int n_states() const noexcept { return n_states_; }
  int n_inputs() const noexcept { return n_inputs_; }
  int size() const noexcept { return static_cast<int>(terms_.size()); }
  const std::vector<TermDescriptor>& terms() const noexcept { return terms_; }
  const TermDescriptor& term(int k) const { return terms_.at(k); }
  double P_0() const noexcept { return P_0_; }
  double Q_0() const noexcept { return Q_0_; }

  /// Index of a term with the same descriptor, or -1.
  int find(const TermDescriptor& t) const;

  /// Content hash over dimensions, offsets and the descriptor list.
  std::string hash() const;

  /// Theta row at a single point.
  Eigen::VectorXd evaluate(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

  /// Row-wise evaluation; X is K x n_states, U is K x n_inputs.
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& X, const Eigen::MatrixXd& U) const;

  /// d Theta / d x at a point (size() x n_states); u held constant.
  Eigen::MatrixXd gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

  /// d Theta / d u at a point (size() x n_inputs).
  Eigen::MatrixXd input_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

  bool operator==(const FunctionLibrary& o) const {
    return n_states_ == o.n_states_ && n_inputs_ == o.n_inputs_ && P_0_ == o.P_0_ &&
           Q_0_ == o.Q_0_ && terms_ == o.terms_;
  }

 private:
  void check_point(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;

  int n_states_ = 0;
  int n_inputs_ = 0;
  double P_0_ = 0.0;
  double Q_0_ = 0.0;
  std::vector<TermDescriptor> terms_;
};

/// Constant, all states and inputs, and all unordered degree-2 products.
FunctionLibrary build_polynomial_library(int n_states, int n_inputs, int degree = 2);

/// [1, x, u, P, Q] for the 13-state inverter (17 terms).
FunctionLibrary build_physics_library(int n_states = 13);

/// Physics library plus u*cos(delta), u*sin(delta) and x_k*dP, x_k*dQ for
/// every state, with dP = P_inv - P_0 and dQ = Q_inv - Q_0 (45 terms).
FunctionLibrary build_extended_library(int n_states = 13, double P_0 = 0.0, double Q_0 = 0.0);

std::string to_string(TermKind k);
TermKind term_kind_from_string(const std::string& s);

void to_json(nlohmann::json& j, const TermDescriptor& t);
void from_json(const nlohmann::json& j, TermDescriptor& t);
void to_json(nlohmann::json& j, const FunctionLibrary& lib);
void from_json(const nlohmann::json& j, FunctionLibrary& lib);

}  // namespace pisml::feat
