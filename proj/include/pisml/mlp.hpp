#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "pisml/rng.hpp"

namespace pisml::nn {

enum class Activation { tanh, identity };

/// Fully connected network: tanh (or identity) on hidden layers, affine
/// output. Hidden layers may carry a layer normalization applied to the
/// pre-activation.
struct Mlp {
  std::vector<int> sizes;
  std::vector<Eigen::MatrixXd> W;  // W[l] is sizes[l+1] x sizes[l]
  std::vector<Eigen::VectorXd> b;
  std::vector<bool> norm;          // per hidden layer
  std::vector<Eigen::VectorXd> gain;  // layer-norm affine, per hidden layer
  std::vector<Eigen::VectorXd> bias;
  Activation activation = Activation::tanh;

  int n_in() const { return sizes.front(); }
  int n_out() const { return sizes.back(); }
  int n_layers() const { return static_cast<int>(W.size()); }
  bool has_norm() const;
  /// Weights and biases (plus layer-norm affine parameters when enabled).
  int parameter_count() const;
  void validate() const;

  Eigen::VectorXd forward(const Eigen::VectorXd& z) const;
  /// d out / d z (n_out x n_in).
  Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& z) const;
};

/// Default initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
/// biases; the output layer is zeroed when `zero_last` is set.
Mlp make_mlp(const std::vector<int>& sizes, Rng& rng, bool zero_last = true,
             bool layer_norm = false);

/// Same-shaped container with every parameter set to zero.
Mlp zeros_like(const Mlp& m);

Eigen::VectorXd flatten(const Mlp& m);
void unflatten(Mlp& m, const Eigen::VectorXd& v);

/// Forward pass over a batch (columns of Z) keeping what backprop needs.
struct BatchCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;    // affine pre-activation per hidden layer
  std::vector<Eigen::MatrixXd> nhat;   // normalized pre-activation (layer norm only)
  std::vector<Eigen::RowVectorXd> inv_std;
  std::vector<Eigen::MatrixXd> act;    // activation output before dropout
  std::vector<Eigen::MatrixXd> out;    // hidden outputs after dropout
};

/// `dropout`, if given, holds one multiplicative mask per hidden layer
/// (same shape as that layer's batch output).
Eigen::MatrixXd forward_batch(const Mlp& m, const Eigen::MatrixXd& Z, BatchCache* cache = nullptr,
                              const std::vector<Eigen::MatrixXd>* dropout = nullptr);

/// Accumulates parameter gradients of <G_out, out> into `grad` and returns
/// the gradient with respect to the batch input when `G_in` is non-null.
void backward_batch(const Mlp& m, const BatchCache& cache, const Eigen::MatrixXd& G_out,
                    Mlp& grad, Eigen::MatrixXd* G_in = nullptr,
                    const std::vector<Eigen::MatrixXd>* dropout = nullptr);

/// Jacobian-vector products J_N(z_b) t_b for each column b.
Eigen::MatrixXd jvp_batch(const Mlp& m, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& T);

/// Parameter gradient of sum_b <G_b, J_N(z_b) t_b>. Not available with
/// layer normalization.
void jvp_backward(const Mlp& m, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& T,
                  const Eigen::MatrixXd& G, Mlp& grad);

void to_json(nlohmann::json& j, const Mlp& m);
void from_json(const nlohmann::json& j, Mlp& m);

}  // namespace pisml::nn
