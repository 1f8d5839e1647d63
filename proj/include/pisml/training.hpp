#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "pisml/dataset.hpp"
#include "pisml/hybrid.hpp"

namespace pisml::train {

struct TrainConfig {
  int epochs = 50;
  double lr_max = 0.005;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  double dropout = 0.05;
  double grad_clip = 10.0;  // global norm; 0 disables
  double lambda_pert = 1.0;
  double lambda_sparse = 1e-3;
  bool proximal_l1 = false;
  bool normalize_pert = true;  // weight L_pert channels by 1/rms(dx_dot_i)^2
  int window = 40;
  int stride = 10;
  int batch = 16;
  int substeps = 2;
  double threshold = 1e-4;  // post-training, on normalized coefficients
  double loss_clip = 1e6;
  double ridge_alpha = 0.1;  // backbone warm start
  std::vector<int> hidden = {128, 128};
  bool layer_norm = false;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double traj = 0.0;
  double pert = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  double validation = 0.0;
  int diverged_batches = 0;
  bool aborted = false;
};

struct TrainReport {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_validation = 0.0;
  double wall_time_s = 0.0;
  int active_coefficients = 0;
  int parameter_count = 0;
};

void to_json(nlohmann::json& j, const TrainReport& r);
void from_json(const nlohmann::json& j, TrainReport& r);

/// Training window: `length` rk4 sample steps starting at sample `start`.
struct Window {
  int traj = 0;
  int start = 0;
  int length = 0;
};

std::vector<Window> make_windows(const std::vector<Trajectory>& trajs, int length, int stride);

/// Gradient with respect to the physical coefficients and the network.
struct ModelGradient {
  Eigen::MatrixXd xi;
  std::optional<nn::Mlp> mlp;
};

struct LossValue {
  double value = 0.0;
  bool diverged = false;
  std::optional<ModelGradient> grad;
};

struct TrajLossOptions {
  int substeps = 2;
  double loss_clip = 1e6;
  double blowup = 1e6;
  /// one mask per hidden layer per window (n_hidden x 1 each); empty = none
  std::vector<std::vector<Eigen::VectorXd>> dropout;
};

/// Mean squared scaled error of batched rollouts over the windows.
LossValue loss_traj(const HybridModel& m, const std::vector<Trajectory>& trajs,
                    const std::vector<Window>& windows, const TrajLossOptions& opt,
                    bool with_grad);

/// Mean weighted squared mismatch between measured small-signal slopes and
/// the model Jacobian applied to the measured perturbations. `weights` is
/// per state channel (empty = all ones).
LossValue loss_pert(const HybridModel& m, const std::vector<sim::PerturbationRecord>& records,
                    const Eigen::VectorXd& weights, bool with_grad);

/// Per-channel L_pert weights 1 / rms(dx_dot_i)^2.
Eigen::VectorXd pert_weights(const std::vector<sim::PerturbationRecord>& records);

/// Maps trainable model parameters to a flat vector. Backbone coefficients
/// are exposed in normalized units so every parameter is O(1).
class Parameterization {
 public:
  Parameterization(const HybridModel& m, reg::Normalization nz);
  int size() const { return n_xi_ + n_mlp_; }
  int xi_size() const { return n_xi_; }
  Eigen::VectorXd pack(const HybridModel& m) const;
  void unpack(const Eigen::VectorXd& theta, HybridModel& m) const;
  Eigen::VectorXd pack_gradient(const ModelGradient& g) const;
  /// L1 norm of the trainable backbone in normalized units and its
  /// subgradient in flat coordinates (sign(0) = 0).
  double l1(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd l1_subgradient(const Eigen::VectorXd& theta) const;
  const reg::Normalization& normalization() const { return nz_; }
  const std::vector<std::pair<int, int>>& xi_entries() const { return entries_; }

 private:
  reg::Normalization nz_;
  std::vector<std::pair<int, int>> entries_;  // (term, state) of each trainable coefficient
  int n_xi_ = 0;
  int n_mlp_ = 0;
};

struct TotalLoss {
  double traj = 0.0;
  double pert = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  bool diverged = false;
  Eigen::VectorXd grad;  // flat, empty when not requested
};

/// L_traj + lambda_pert L_pert + lambda_sparse ||Xi~||_1 and its flat gradient.
TotalLoss total_loss(const HybridModel& m, const Parameterization& param,
                     const std::vector<Trajectory>& trajs, const std::vector<Window>& windows,
                     const std::vector<sim::PerturbationRecord>& records,
                     const Eigen::VectorXd& pert_w, const TrainConfig& cfg,
                     const TrajLossOptions& opt, bool with_grad);

/// One-cycle learning rate (cosine warm-up then cosine annealing).
double one_cycle_lr(const TrainConfig& cfg, long step, long total_steps);

/// Full-length rollout error of every trajectory in scaled coordinates;
/// +inf when any rollout diverges.
double validation_loss(const HybridModel& m, const std::vector<Trajectory>& trajs, int substeps);

/// Joint optimization of backbone and network. Returns the best-validation
/// model after hard-thresholding the backbone.
HybridModel train(const HybridModel& initial, const sim::Dataset& data, const TrainConfig& cfg,
                  TrainReport* report = nullptr);

// ------------------------------------------------------------ presets

enum class LibraryKind { polynomial, physics };

struct MethodPreset {
  std::string name;
  ModelMode mode = ModelMode::mod_sindy;
  LibraryKind library = LibraryKind::physics;
  reg::FitConfig fit;
  reg::ScalerMode scaler = reg::ScalerMode::minmax;
  bool has_mlp = false;
  bool trained = false;
  TrainConfig train;
};

/// std-sindy | mod-sindy | node | pisml | pisml-phy
MethodPreset method_preset(const std::string& name);
std::vector<std::string> method_names();

/// Regression design over every valid sample of the dataset.
struct Design {
  Eigen::MatrixXd Theta;
  Eigen::MatrixXd Xdot;
  Eigen::MatrixXd Z;  // stacked states and input
};
Design build_design(const feat::FunctionLibrary& lib, const std::vector<Trajectory>& trajs);

/// Builds the untrained model (library, scaler, warm-start backbone and a
/// seeded network with a zero output layer).
HybridModel initial_model(const MethodPreset& preset, const sim::Dataset& data);

/// Fits a method end to end (regression only, or regression plus training).
HybridModel fit_method(const MethodPreset& preset, const sim::Dataset& data,
                       TrainReport* report = nullptr);

}  // namespace pisml::train
