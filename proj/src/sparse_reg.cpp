#include "pisml/sparse_reg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "pisml/common.hpp"

namespace pisml::reg {

CoefficientMatrix::CoefficientMatrix(Eigen::MatrixXd v, std::string hash)
    : values(std::move(v)), library_hash(std::move(hash)) {
  mask = values.array() != 0.0;
}

void CoefficientMatrix::enforce_mask() {
  validate();
  values = mask.select(values, 0.0);
}

void CoefficientMatrix::validate() const {
  if (mask.rows() != values.rows() || mask.cols() != values.cols()) {
    throw ValidationError("coefficient matrix: mask shape does not match values");
  }
  if (!values.allFinite()) throw ValidationError("coefficient matrix: non-finite values");
}

CoefficientMatrix zero_coefficients(int p, int n, std::string library_hash) {
  CoefficientMatrix c;
  c.values = Eigen::MatrixXd::Zero(p, n);
  c.mask = BoolMatrix::Constant(p, n, false);
  c.library_hash = std::move(library_hash);
  return c;
}

void to_json(nlohmann::json& j, const CoefficientMatrix& c) {
  nlohmann::json vals = nlohmann::json::array();
  nlohmann::json mask = nlohmann::json::array();
  for (int r = 0; r < c.rows(); ++r) {
    std::vector<double> vr(c.cols());
    std::vector<int> mr(c.cols());
    for (int k = 0; k < c.cols(); ++k) {
      vr[k] = c.values(r, k);
      mr[k] = c.mask(r, k) ? 1 : 0;
    }
    vals.push_back(vr);
    mask.push_back(mr);
  }
  j = {{"library_hash", c.library_hash}, {"rows", c.rows()}, {"cols", c.cols()},
       {"values", vals}, {"mask", mask}};
}

void from_json(const nlohmann::json& j, CoefficientMatrix& c) {
  const int rows = j.at("rows").get<int>();
  const int cols = j.at("cols").get<int>();
  const auto& vals = j.at("values");
  const auto& mask = j.at("mask");
  if (static_cast<int>(vals.size()) != rows || static_cast<int>(mask.size()) != rows) {
    throw ValidationError("coefficient matrix: row count mismatch");
  }
  c = zero_coefficients(rows, cols, j.at("library_hash").get<std::string>());
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(vals[r].size()) != cols || static_cast<int>(mask[r].size()) != cols) {
      throw ValidationError("coefficient matrix: column count mismatch");
    }
    for (int k = 0; k < cols; ++k) {
      c.values(r, k) = vals[r][k].get<double>();
      c.mask(r, k) = mask[r][k].get<int>() != 0;
    }
  }
  c.validate();
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < cols; ++k) {
      if (!c.mask(r, k) && c.values(r, k) != 0.0) {
        throw ValidationError("coefficient matrix: nonzero value outside mask");
      }
    }
  }
}

// ---------------------------------------------------------------- scaler

Eigen::MatrixXd Scaler::apply(const Eigen::MatrixXd& Z) const {
  if (Z.cols() != dim()) throw ValidationError("scaler: column count mismatch");
  return (Z.rowwise() - shift.transpose()).array().rowwise() * scale.transpose().array();
}

Eigen::MatrixXd Scaler::invert(const Eigen::MatrixXd& Zs) const {
  if (Zs.cols() != dim()) throw ValidationError("scaler: column count mismatch");
  Eigen::MatrixXd Z = Zs.array().rowwise() / scale.transpose().array();
  return Z.rowwise() + shift.transpose();
}

void Scaler::validate() const {
  if (shift.size() != scale.size()) throw ValidationError("scaler: shift/scale size mismatch");
  if (!shift.allFinite() || !scale.allFinite() || (scale.array() <= 0.0).any()) {
    throw ValidationError("scaler: scales must be finite and positive");
  }
}

Scaler identity_scaler(int dim) {
  return Scaler{ScalerMode::identity, Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
}

Scaler fit_scaler(const Eigen::MatrixXd& Z, ScalerMode mode) {
  const int d = static_cast<int>(Z.cols());
  if (mode == ScalerMode::identity) return identity_scaler(d);
  if (Z.rows() < 1) throw ValidationError("fit_scaler: no rows");
  Scaler s{mode, Eigen::VectorXd(d), Eigen::VectorXd(d)};
  for (int c = 0; c < d; ++c) {
    const auto col = Z.col(c);
    if (mode == ScalerMode::minmax) {
      const double lo = col.minCoeff();
      const double range = col.maxCoeff() - lo;
      s.shift[c] = lo;
      s.scale[c] = range > 0.0 ? 1.0 / range : 1.0;
    } else {
      const double mean = col.mean();
      const double var = (col.array() - mean).square().mean();
      s.shift[c] = mean;
      // rounding in the mean leaves a tiny variance on constant columns
      const double floor = 1e-12 * std::max(1.0, std::abs(mean));
      s.scale[c] = std::sqrt(var) > floor ? 1.0 / std::sqrt(var) : 1.0;
    }
  }
  return s;
}

Eigen::MatrixXd stack_state_input(const Trajectory& traj) {
  Eigen::MatrixXd Z(traj.size(), traj.n_states() + 1);
  Z.leftCols(traj.n_states()) = traj.states;
  for (int k = 0; k < traj.size(); ++k) Z(k, traj.n_states()) = traj.inputs[k];
  return Z;
}

Scaler fit_scaler(const std::vector<Trajectory>& trajs, ScalerMode mode) {
  if (trajs.empty()) throw ValidationError("fit_scaler: no trajectories");
  Eigen::Index rows = 0;
  for (const auto& t : trajs) rows += t.size();
  Eigen::MatrixXd Z(rows, trajs.front().n_states() + 1);
  Eigen::Index r = 0;
  for (const auto& t : trajs) {
    Z.middleRows(r, t.size()) = stack_state_input(t);
    r += t.size();
  }
  return fit_scaler(Z, mode);
}

std::string to_string(ScalerMode m) {
  switch (m) {
    case ScalerMode::identity: return "identity";
    case ScalerMode::minmax: return "minmax";
    case ScalerMode::standard: return "standard";
  }
  return "identity";
}

ScalerMode scaler_mode_from_string(const std::string& s) {
  if (s == "identity") return ScalerMode::identity;
  if (s == "minmax") return ScalerMode::minmax;
  if (s == "standard") return ScalerMode::standard;
  throw ValidationError("unknown scaler mode '" + s + "'");
}

void to_json(nlohmann::json& j, const Scaler& s) {
  j = {{"mode", to_string(s.mode)},
       {"shift", std::vector<double>(s.shift.data(), s.shift.data() + s.shift.size())},
       {"scale", std::vector<double>(s.scale.data(), s.scale.data() + s.scale.size())}};
}

void from_json(const nlohmann::json& j, Scaler& s) {
  s.mode = scaler_mode_from_string(j.at("mode").get<std::string>());
  const auto shift = j.at("shift").get<std::vector<double>>();
  const auto scale = j.at("scale").get<std::vector<double>>();
  s.shift = Eigen::Map<const Eigen::VectorXd>(shift.data(), shift.size());
  s.scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), scale.size());
  s.validate();
}

// ----------------------------------------------------------- derivatives

DerivativeEstimate estimate_derivatives(const Trajectory& traj, int guard) {
  const int K = traj.size();
  if (K < 3) throw ValidationError("estimate_derivatives: need at least 3 samples");
  const double h = traj.times[1] - traj.times[0];
  if (!(h > 0.0)) throw ValidationError("estimate_derivatives: non-increasing time grid");
  const auto& X = traj.states;
  DerivativeEstimate out;
  out.xdot.resize(K, X.cols());
  out.xdot.row(0) = (-3.0 * X.row(0) + 4.0 * X.row(1) - X.row(2)) / (2.0 * h);
  for (int k = 1; k + 1 < K; ++k) out.xdot.row(k) = (X.row(k + 1) - X.row(k - 1)) / (2.0 * h);
  out.xdot.row(K - 1) = (3.0 * X.row(K - 1) - 4.0 * X.row(K - 2) + X.row(K - 3)) / (2.0 * h);

  out.valid.assign(K, true);
  for (const auto& ev : traj.input.events()) {
    const long ke = std::lround((ev.time - traj.times[0]) / h);
    for (long k = ke - guard; k <= ke + guard; ++k) {
      if (k >= 0 && k < K) out.valid[k] = false;
    }
  }
  return out;
}

// ----------------------------------------------------------------- fits

namespace {

void check_design(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot) {
  if (Theta.rows() != Xdot.rows()) {
    throw ValidationError("regression: Theta has " + std::to_string(Theta.rows()) +
                          " rows but Xdot has " + std::to_string(Xdot.rows()));
  }
  if (Theta.cols() < 1 || Xdot.cols() < 1) throw ValidationError("regression: empty design");
  if (!Theta.allFinite() || !Xdot.allFinite()) {
    throw ValidationError("regression: non-finite data");
  }
}

Eigen::VectorXd solve_normal(const Eigen::MatrixXd& G, const Eigen::VectorXd& b, double alpha) {
  Eigen::MatrixXd A = G;
  A.diagonal().array() += alpha;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-15) {
    throw NumericalError("regression: singular normal matrix (increase alpha)");
  }
  return llt.solve(b);
}

}  // namespace

CoefficientMatrix fit_ridge(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                            double alpha) {
  check_design(Theta, Xdot);
  if (alpha < 0.0) throw ValidationError("fit_ridge: alpha must be >= 0");
  const Eigen::MatrixXd G = Theta.transpose() * Theta;
  const Eigen::MatrixXd B = Theta.transpose() * Xdot;
  CoefficientMatrix c = zero_coefficients(static_cast<int>(Theta.cols()), static_cast<int>(Xdot.cols()));
  for (int i = 0; i < Xdot.cols(); ++i) c.values.col(i) = solve_normal(G, B.col(i), alpha);
  c.mask.setConstant(true);
  return c;
}

CoefficientMatrix fit_stlsq(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                            double threshold, double alpha, int max_iter) {
  check_design(Theta, Xdot);
  if (!(threshold >= 0.0)) throw ValidationError("fit_stlsq: threshold must be >= 0");
  if (alpha < 0.0 || max_iter < 1) throw ValidationError("fit_stlsq: bad alpha or max_iter");
  const int p = static_cast<int>(Theta.cols());
  const Eigen::MatrixXd G = Theta.transpose() * Theta;
  const Eigen::MatrixXd B = Theta.transpose() * Xdot;
  CoefficientMatrix c = zero_coefficients(p, static_cast<int>(Xdot.cols()));

  for (int i = 0; i < Xdot.cols(); ++i) {
    std::vector<int> active(p);
    for (int j = 0; j < p; ++j) active[j] = j;
    Eigen::VectorXd xi;
    bool fixed = false;
    for (int it = 0; it < max_iter && !active.empty(); ++it) {
      const int a = static_cast<int>(active.size());
      Eigen::MatrixXd Ga(a, a);
      Eigen::VectorXd ba(a);
      for (int r = 0; r < a; ++r) {
        ba[r] = B(active[r], i);
        for (int s = 0; s < a; ++s) Ga(r, s) = G(active[r], active[s]);
      }
      xi = solve_normal(Ga, ba, alpha);
      std::vector<int> kept;
      for (int r = 0; r < a; ++r) {
        if (std::abs(xi[r]) >= threshold) kept.push_back(active[r]);
      }
      if (kept.size() == active.size()) {
        fixed = true;
        break;
      }
      active = std::move(kept);
    }
    if (active.empty()) {
      c.empty_columns.push_back(i);
      continue;
    }
    if (!fixed) {
      // iteration budget ran out: refit on the last mask so values and mask agree
      c.converged = false;
      const int a = static_cast<int>(active.size());
      Eigen::MatrixXd Ga(a, a);
      Eigen::VectorXd ba(a);
      for (int r = 0; r < a; ++r) {
        ba[r] = B(active[r], i);
        for (int s = 0; s < a; ++s) Ga(r, s) = G(active[r], active[s]);
      }
      xi = solve_normal(Ga, ba, alpha);
    }
    for (std::size_t r = 0; r < active.size(); ++r) {
      c.values(active[r], i) = xi[r];
      c.mask(active[r], i) = true;
    }
  }
  return c;
}

CoefficientMatrix fit_l1(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                         double lambda, int max_iter, double tol,
                         std::vector<double>* objective) {
  check_design(Theta, Xdot);
  if (!(lambda >= 0.0)) throw ValidationError("fit_l1: lambda must be >= 0");
  const Eigen::MatrixXd G = Theta.transpose() * Theta;
  const Eigen::MatrixXd B = Theta.transpose() * Xdot;
  const double yy = Xdot.squaredNorm();
  auto smooth = [&](const Eigen::MatrixXd& Xi) {
    return 0.5 * (Xi.transpose() * G * Xi).trace() - (Xi.cwiseProduct(B)).sum() + 0.5 * yy;
  };
  auto total = [&](const Eigen::MatrixXd& Xi) { return smooth(Xi) + lambda * Xi.cwiseAbs().sum(); };
  auto prox = [&](const Eigen::MatrixXd& V, double t) {
    const double k = lambda * t;
    return Eigen::MatrixXd(V.unaryExpr([k](double v) {
      return v > k ? v - k : (v < -k ? v + k : 0.0);
    }));
  };

  const double L = std::max(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G, Eigen::EigenvaluesOnly)
                                .eigenvalues()
                                .maxCoeff(),
                            std::numeric_limits<double>::min());
  double t = 1.0 / L;
  Eigen::MatrixXd Xi = Eigen::MatrixXd::Zero(Theta.cols(), Xdot.cols());
  double f_smooth = smooth(Xi);
  double F = total(Xi);
  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd grad = G * Xi - B;
    t = std::min(2.0 * t, 64.0 / L);
    Eigen::MatrixXd next;
    double f_next = 0.0;
    for (int bt = 0; bt < 60; ++bt) {
      next = prox(Xi - t * grad, t);
      const Eigen::MatrixXd step = next - Xi;
      f_next = smooth(next);
      if (f_next <= f_smooth + (grad.cwiseProduct(step)).sum() + step.squaredNorm() / (2.0 * t) +
                        1e-15 * std::abs(f_smooth)) {
        break;
      }
      t *= 0.5;
    }
    const double F_next = f_next + lambda * next.cwiseAbs().sum();
    if (F_next > F + 1e-12 * std::max(1.0, std::abs(F))) {
      throw NumericalError("fit_l1: objective increased");
    }
    const double decrease = F - F_next;
    Xi = std::move(next);
    f_smooth = f_next;
    F = F_next;
    if (objective) objective->push_back(F);
    if (decrease <= tol * std::max(1.0, std::abs(F))) {
      converged = true;
      break;
    }
  }
  CoefficientMatrix c(Xi, {});
  c.converged = converged;
  return c;
}

Normalization normalization_for(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot) {
  Normalization nz;
  const double K = std::max<double>(1.0, static_cast<double>(Theta.rows()));
  nz.column_scale = (Theta.colwise().squaredNorm() / K).cwiseSqrt().transpose();
  nz.target_scale = (Xdot.colwise().squaredNorm() / K).cwiseSqrt().transpose();
  for (auto& v : nz.column_scale) {
    if (!(v > 0.0)) v = 1.0;
  }
  for (auto& v : nz.target_scale) {
    if (!(v > 0.0)) v = 1.0;
  }
  return nz;
}

Eigen::MatrixXd to_normalized(const Eigen::MatrixXd& Xi, const Normalization& nz) {
  return nz.column_scale.asDiagonal() * Xi * nz.target_scale.cwiseInverse().asDiagonal();
}

Eigen::MatrixXd from_normalized(const Eigen::MatrixXd& Xi, const Normalization& nz) {
  return nz.column_scale.cwiseInverse().asDiagonal() * Xi * nz.target_scale.asDiagonal();
}

CoefficientMatrix fit(const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Xdot,
                      const FitConfig& cfg, const std::string& library_hash) {
  check_design(Theta, Xdot);
  Normalization nz;
  if (cfg.normalize) {
    nz = normalization_for(Theta, Xdot);
  } else {
    nz.column_scale = Eigen::VectorXd::Ones(Theta.cols());
    nz.target_scale = Eigen::VectorXd::Ones(Xdot.cols());
  }
  const Eigen::MatrixXd Ts = Theta * nz.column_scale.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd Ys = Xdot * nz.target_scale.cwiseInverse().asDiagonal();
  CoefficientMatrix c;
  switch (cfg.solver) {
    case Solver::ridge: c = fit_ridge(Ts, Ys, cfg.alpha); break;
    case Solver::stlsq: c = fit_stlsq(Ts, Ys, cfg.threshold, cfg.alpha, cfg.max_iter); break;
    case Solver::l1: c = fit_l1(Ts, Ys, cfg.lambda, std::max(cfg.max_iter, 1000)); break;
  }
  c.values = from_normalized(c.values, nz);
  c.enforce_mask();
  c.library_hash = library_hash;
  return c;
}

}  // namespace pisml::reg
