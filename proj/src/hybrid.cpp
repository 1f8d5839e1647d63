#include "pisml/hybrid.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>

#include "pisml/common.hpp"

namespace pisml {

namespace {
const std::vector<std::pair<ModelMode, std::string>>& mode_names() {
  static const std::vector<std::pair<ModelMode, std::string>> names = {
      {ModelMode::std_sindy, "std_sindy"}, {ModelMode::mod_sindy, "mod_sindy"},
      {ModelMode::pure_node, "pure_node"}, {ModelMode::pisml, "pisml"},
      {ModelMode::pisml_phy, "pisml_phy"}, {ModelMode::distilled, "distilled"}};
  return names;
}
}  // namespace

std::string to_string(ModelMode m) {
  for (const auto& [mode, name] : mode_names()) {
    if (mode == m) return name;
  }
  return "unknown";
}

ModelMode model_mode_from_string(const std::string& s) {
  for (const auto& [mode, name] : mode_names()) {
    if (name == s) return mode;
  }
  throw ValidationError("unknown model mode '" + s + "'");
}

void HybridModel::validate() const {
  const int n = n_states();
  xi.validate();
  if (xi.rows() != library.size() || xi.cols() != n) {
    throw ValidationError("model: coefficient matrix does not match the library");
  }
  if (!xi.library_hash.empty() && xi.library_hash != library.hash()) {
    throw ValidationError("model: coefficient matrix was fitted on a different library");
  }
  if (scaler.dim() != n + n_inputs()) throw ValidationError("model: scaler dimension mismatch");
  scaler.validate();
  if (mode == ModelMode::pure_node && xi.active_count() != 0) {
    throw ValidationError("model: pure_node models must have an empty backbone");
  }
  if (mode == ModelMode::distilled && mlp) {
    throw ValidationError("model: distilled models carry no network");
  }
  if (mlp) {
    mlp->validate();
    if (mlp->n_in() != n + n_inputs() || mlp->n_out() != n) {
      throw ValidationError("model: network dimensions do not match the state layout");
    }
    if (out_scale.size() != n || !(out_scale.array() > 0.0).all()) {
      throw ValidationError("model: output scale must be positive per state");
    }
  }
}

Eigen::VectorXd HybridModel::scaled_input(const Eigen::VectorXd& x, double u) const {
  Eigen::VectorXd z(x.size() + 1);
  z << x, u;
  return scaler.scale.cwiseProduct(z - scaler.shift);
}

Eigen::VectorXd HybridModel::residual(const Eigen::VectorXd& x, double u) const {
  if (!mlp) return Eigen::VectorXd::Zero(n_states());
  return out_scale.cwiseProduct(mlp->forward(scaled_input(x, u)));
}

Eigen::VectorXd HybridModel::derivative(const Eigen::VectorXd& x, double u) const {
  if (x.size() != n_states()) throw ValidationError("model: state has wrong dimension");
  Eigen::VectorXd uv(1);
  uv << u;
  Eigen::VectorXd f = xi.values.transpose() * library.evaluate(x, uv);
  if (mlp) f += residual(x, u);
  return f;
}

Eigen::MatrixXd HybridModel::jacobian(const Eigen::VectorXd& x, double u) const {
  if (x.size() != n_states()) throw ValidationError("model: state has wrong dimension");
  Eigen::VectorXd uv(1);
  uv << u;
  Eigen::MatrixXd J = xi.values.transpose() * library.gradient(x, uv);
  if (mlp) {
    const Eigen::MatrixXd JN = mlp->input_jacobian(scaled_input(x, u));
    J += out_scale.asDiagonal() * JN.leftCols(n_states()) *
         scaler.scale.head(n_states()).asDiagonal();
  }
  return J;
}

HybridModel absorb_scaler(const HybridModel& m) {
  HybridModel out = m;
  out.scaler = reg::identity_scaler(m.scaler.dim());
  if (m.mlp) {
    auto& W0 = out.mlp->W[0];
    out.mlp->b[0] = m.mlp->b[0] - m.mlp->W[0] * m.scaler.scale.cwiseProduct(m.scaler.shift);
    W0 = m.mlp->W[0] * m.scaler.scale.asDiagonal();
  }
  return out;
}

Trajectory rollout(const HybridModel& m, const Eigen::VectorXd& x0, const InputSignal& u,
                   double t_end, const RolloutOptions& opt) {
  if (opt.substeps < 1 || !(opt.sample_dt > 0.0)) throw ValidationError("rollout: bad options");
  IntegratorConfig cfg;
  cfg.method = Method::rk4;
  cfg.sample_dt = opt.sample_dt;
  cfg.dt = opt.sample_dt / opt.substeps;
  const VectorField f = [&m](const Eigen::VectorXd& x, double uu, double, Eigen::VectorXd& dx) {
    dx = m.derivative(x, uu);
  };
  JumpMap jump;
  if (opt.phase_jumps && m.n_states() == 13) jump = grid_phase_jump;
  Trajectory tr = integrate(f, x0, u, t_end, cfg, jump);
  tr.meta.scenario = "rollout";
  return tr;
}

Eigen::VectorXd model_equilibrium(const HybridModel& m, double u, const Eigen::VectorXd& guess,
                                  double tol, int max_iter) {
  Eigen::VectorXd x = guess;
  Eigen::VectorXd f = m.derivative(x, u);
  for (int it = 0; it < max_iter; ++it) {
    const double res = f.cwiseAbs().maxCoeff();
    if (res <= tol) return x;
    const Eigen::VectorXd step = m.jacobian(x, u).completeOrthogonalDecomposition().solve(-f);
    double lambda = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < 30; ++bt) {
      const Eigen::VectorXd xn = x + lambda * step;
      const Eigen::VectorXd fn = m.derivative(xn, u);
      if (fn.allFinite() && fn.norm() < f.norm()) {
        x = xn;
        f = fn;
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) break;
  }
  if (f.cwiseAbs().maxCoeff() <= tol) return x;
  throw NoEquilibriumError("model equilibrium: Newton stalled at residual " +
                           std::to_string(f.cwiseAbs().maxCoeff()) + " (u=" + std::to_string(u) + ")");
}

void to_json(nlohmann::json& j, const HybridModel& m) {
  j = nlohmann::json::object();
  j["mode"] = to_string(m.mode);
  j["library"] = m.library;
  j["xi"] = m.xi;
  j["scaler"] = m.scaler;
  j["out_scale"] = std::vector<double>(m.out_scale.data(), m.out_scale.data() + m.out_scale.size());
  j["mlp"] = m.mlp ? nlohmann::json(*m.mlp) : nlohmann::json(nullptr);
  if (m.residual_library) j["residual_library"] = *m.residual_library;
  if (m.residual_xi) j["residual_xi"] = *m.residual_xi;
  if (m.backbone_xi) j["backbone_xi"] = *m.backbone_xi;
  j["provenance"] = m.provenance;
}

void from_json(const nlohmann::json& j, HybridModel& m) {
  m = HybridModel{};
  m.mode = model_mode_from_string(j.at("mode").get<std::string>());
  m.library = j.at("library").get<feat::FunctionLibrary>();
  m.xi = j.at("xi").get<reg::CoefficientMatrix>();
  m.scaler = j.at("scaler").get<reg::Scaler>();
  const auto os = j.at("out_scale").get<std::vector<double>>();
  m.out_scale = Eigen::Map<const Eigen::VectorXd>(os.data(), os.size());
  if (!j.at("mlp").is_null()) m.mlp = j.at("mlp").get<nn::Mlp>();
  if (j.contains("residual_library")) m.residual_library = j["residual_library"].get<feat::FunctionLibrary>();
  if (j.contains("residual_xi")) m.residual_xi = j["residual_xi"].get<reg::CoefficientMatrix>();
  if (j.contains("backbone_xi")) m.backbone_xi = j["backbone_xi"].get<reg::CoefficientMatrix>();
  m.provenance = j.value("provenance", nlohmann::json::object());
  m.validate();
}

HybridModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("missing file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model file " + path + ": " + e.what());
  }
  return j.get<HybridModel>();
}

}  // namespace pisml
