#include "pisml/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "pisml/common.hpp"
#include "pisml/rng.hpp"

namespace pisml::train {

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train config: epochs must be positive");
  if (!(lr_max > 0.0)) throw ValidationError("train config: lr_max must be positive");
  if (!(pct_start > 0.0 && pct_start < 1.0)) throw ValidationError("train config: pct_start in (0,1)");
  if (!(div_factor >= 1.0 && final_div_factor >= 1.0)) throw ValidationError("train config: bad lr divisors");
  if (weight_decay < 0.0 || lambda_pert < 0.0 || lambda_sparse < 0.0) {
    throw ValidationError("train config: penalties must be >= 0");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("train config: dropout in [0,1)");
  if (window < 1 || stride < 1 || batch < 1 || substeps < 1) {
    throw ValidationError("train config: window, stride, batch and substeps must be >= 1");
  }
  if (hidden.empty()) throw ValidationError("train config: need at least one hidden layer");
}

#define PISML_TRAIN_FIELDS(X)                                                              \
  X(epochs) X(lr_max) X(pct_start) X(div_factor) X(final_div_factor) X(beta1) X(beta2)      \
  X(adam_eps) X(weight_decay) X(dropout) X(grad_clip) X(lambda_pert) X(lambda_sparse)       \
  X(proximal_l1) X(normalize_pert) X(window) X(stride) X(batch) X(substeps) X(threshold)    \
  X(loss_clip) X(ridge_alpha) X(hidden) X(layer_norm) X(seed)

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
#define X(name) j[#name] = c.name;
  PISML_TRAIN_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
#define X(name)                          \
  if (key == #name) {                    \
    value.get_to(c.name);                \
    known = true;                        \
  }
    PISML_TRAIN_FIELDS(X)
#undef X
    if (!known) throw ValidationError("train config: unknown key '" + key + "'");
  }
  c.validate();
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    ep.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"traj", e.traj}, {"pert", e.pert},
                  {"l1", e.l1}, {"total", e.total},
                  {"validation", std::isfinite(e.validation) ? nlohmann::json(e.validation)
                                                             : nlohmann::json(nullptr)},
                  {"diverged_batches", e.diverged_batches}, {"aborted", e.aborted}});
  }
  j = {{"method", r.method},
       {"seed", r.seed},
       {"epochs", ep},
       {"best_epoch", r.best_epoch},
       {"best_validation", r.best_validation},
       {"wall_time_s", r.wall_time_s},
       {"active_coefficients", r.active_coefficients},
       {"parameter_count", r.parameter_count}};
}

void from_json(const nlohmann::json& j, TrainReport& r) {
  r = TrainReport{};
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("epochs")) {
    EpochRecord rec;
    rec.epoch = e.at("epoch").get<int>();
    rec.lr = e.at("lr").get<double>();
    rec.traj = e.at("traj").get<double>();
    rec.pert = e.at("pert").get<double>();
    rec.l1 = e.at("l1").get<double>();
    rec.total = e.at("total").get<double>();
    rec.validation = e.at("validation").is_null() ? std::numeric_limits<double>::infinity()
                                                  : e.at("validation").get<double>();
    rec.diverged_batches = e.at("diverged_batches").get<int>();
    rec.aborted = e.at("aborted").get<bool>();
    r.epochs.push_back(rec);
  }
  r.best_epoch = j.at("best_epoch").get<int>();
  r.best_validation = j.at("best_validation").get<double>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.active_coefficients = j.at("active_coefficients").get<int>();
  r.parameter_count = j.at("parameter_count").get<int>();
}

std::vector<Window> make_windows(const std::vector<Trajectory>& trajs, int length, int stride) {
  if (length < 1 || stride < 1) throw ValidationError("make_windows: bad length or stride");
  std::vector<Window> out;
  for (int t = 0; t < static_cast<int>(trajs.size()); ++t) {
    const int K = trajs[t].size();
    for (int s = 0; s + length <= K - 1; s += stride) out.push_back({t, s, length});
  }
  return out;
}

// ------------------------------------------------------ batched vector field

namespace {

struct StageCache {
  Eigen::MatrixXd X;
  Eigen::VectorXd U;
  Eigen::MatrixXd Theta;
  nn::BatchCache net;
};

class BatchField {
 public:
  BatchField(const HybridModel& m, const std::vector<Eigen::MatrixXd>* dropout)
      : m_(m), dropout_(dropout) {}

  Eigen::MatrixXd eval(const Eigen::MatrixXd& X, const Eigen::VectorXd& U, StageCache* c) const {
    const int n = m_.n_states();
    const Eigen::Index B = X.cols();
    Eigen::MatrixXd Theta(m_.library.size(), B);
    Eigen::VectorXd uv(1);
    for (Eigen::Index b = 0; b < B; ++b) {
      uv[0] = U[b];
      Theta.col(b) = m_.library.evaluate(X.col(b), uv);
    }
    Eigen::MatrixXd F = m_.xi.values.transpose() * Theta;
    if (m_.mlp) {
      Eigen::MatrixXd Z(n + 1, B);
      Z.topRows(n) = X;
      Z.row(n) = U.transpose();
      Z = (Z.colwise() - m_.scaler.shift).array().colwise() * m_.scaler.scale.array();
      const Eigen::MatrixXd N = nn::forward_batch(*m_.mlp, Z, c ? &c->net : nullptr, dropout_);
      F += m_.out_scale.asDiagonal() * N;
    }
    if (c) {
      c->X = X;
      c->U = U;
      c->Theta = std::move(Theta);
    }
    return F;
  }

  Eigen::MatrixXd vjp(const StageCache& c, const Eigen::MatrixXd& G, ModelGradient& acc) const {
    const int n = m_.n_states();
    acc.xi.noalias() += c.Theta * G.transpose();
    const Eigen::MatrixXd Wt = m_.xi.values * G;
    Eigen::MatrixXd gX(n, G.cols());
    Eigen::VectorXd uv(1);
    for (Eigen::Index b = 0; b < G.cols(); ++b) {
      uv[0] = c.U[b];
      gX.col(b) = m_.library.gradient(c.X.col(b), uv).transpose() * Wt.col(b);
    }
    if (m_.mlp) {
      Eigen::MatrixXd Gin;
      nn::backward_batch(*m_.mlp, c.net, m_.out_scale.asDiagonal() * G, *acc.mlp, &Gin, dropout_);
      gX += m_.scaler.scale.head(n).asDiagonal() * Gin.topRows(n);
    }
    return gX;
  }

 private:
  const HybridModel& m_;
  const std::vector<Eigen::MatrixXd>* dropout_;
};

ModelGradient zero_gradient(const HybridModel& m) {
  ModelGradient g;
  g.xi = Eigen::MatrixXd::Zero(m.library.size(), m.n_states());
  if (m.mlp) g.mlp = nn::zeros_like(*m.mlp);
  return g;
}

bool event_at(const InputSignal& in, double t, double dt, double* jump) {
  for (const auto& ev : in.events()) {
    if (std::abs(ev.time - t) <= 1e-9 * dt) {
      *jump = ev.phase_jump;
      return true;
    }
  }
  return false;
}

}  // namespace

LossValue loss_traj(const HybridModel& m, const std::vector<Trajectory>& trajs,
                    const std::vector<Window>& windows, const TrajLossOptions& opt,
                    bool with_grad) {
  if (windows.empty()) throw ValidationError("loss_traj: empty batch");
  const int n = m.n_states();
  const int B = static_cast<int>(windows.size());
  const int W = windows.front().length;
  for (const auto& w : windows) {
    if (w.length != W) throw ValidationError("loss_traj: windows must share one length");
    if (w.traj < 0 || w.traj >= static_cast<int>(trajs.size()) || w.start < 0 ||
        w.start + W > trajs[w.traj].size() - 1) {
      throw ValidationError("loss_traj: window outside its trajectory");
    }
  }
  const double dt = trajs[windows.front().traj].times[1] - trajs[windows.front().traj].times[0];
  const int S = opt.substeps;
  const double h = dt / S;
  const Eigen::VectorXd a = m.scaler.scale.head(n);

  // per-step inputs and phase jumps
  // samples at an event time are recorded after the event, so the jump of
  // sample k is applied as soon as the rollout reaches it
  Eigen::MatrixXd U(W, B), J = Eigen::MatrixXd::Zero(W + 1, B);
  Eigen::MatrixXd X(n, B);
  for (int b = 0; b < B; ++b) {
    const auto& tr = trajs[windows[b].traj];
    X.col(b) = tr.states.row(windows[b].start).transpose();
    for (int k = 0; k <= W; ++k) {
      const int idx = windows[b].start + k;
      if (k < W) U(k, b) = tr.inputs[idx];
      double jump = 0.0;
      if (k > 0 && m.n_states() == kStateDim && event_at(tr.input, tr.times[idx], dt, &jump)) J(k, b) = jump;
    }
  }

  std::vector<Eigen::MatrixXd> masks;
  std::vector<Eigen::MatrixXd>* mask_ptr = nullptr;
  if (m.mlp && !opt.dropout.empty()) {
    if (static_cast<int>(opt.dropout.size()) != B) throw ValidationError("loss_traj: dropout mask count");
    const int hidden = m.mlp->n_layers() - 1;
    for (int l = 0; l < hidden; ++l) {
      Eigen::MatrixXd M(m.mlp->sizes[l + 1], B);
      for (int b = 0; b < B; ++b) M.col(b) = opt.dropout[b][l];
      masks.push_back(std::move(M));
    }
    mask_ptr = &masks;
  }
  BatchField field(m, mask_ptr);

  std::vector<StageCache> caches;
  if (with_grad) caches.resize(static_cast<std::size_t>(W) * S * 4);
  std::vector<Eigen::MatrixXd> gsample;
  if (with_grad) gsample.resize(W);

  const double norm = 1.0 / (static_cast<double>(B) * W);
  double loss = 0.0;
  LossValue out;
  for (int k = 0; k < W; ++k) {
    const Eigen::VectorXd Uk = U.row(k).transpose();
    for (int s = 0; s < S; ++s) {
      StageCache* c = with_grad ? &caches[(static_cast<std::size_t>(k) * S + s) * 4] : nullptr;
      const Eigen::MatrixXd K1 = field.eval(X, Uk, c);
      const Eigen::MatrixXd K2 = field.eval(X + 0.5 * h * K1, Uk, c ? c + 1 : nullptr);
      const Eigen::MatrixXd K3 = field.eval(X + 0.5 * h * K2, Uk, c ? c + 2 : nullptr);
      const Eigen::MatrixXd K4 = field.eval(X + h * K3, Uk, c ? c + 3 : nullptr);
      X += (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4);
    }
    X.row(0) -= J.row(k + 1);
    if (!X.allFinite() || X.cwiseAbs().maxCoeff() > opt.blowup) {
      out.value = opt.loss_clip;
      out.diverged = true;
      return out;
    }
    Eigen::MatrixXd D(n, B);
    for (int b = 0; b < B; ++b) {
      const auto& tr = trajs[windows[b].traj];
      D.col(b) = a.cwiseProduct(X.col(b) - tr.states.row(windows[b].start + k + 1).transpose());
    }
    loss += D.squaredNorm();
    if (with_grad) gsample[k] = (2.0 * norm) * (a.asDiagonal() * D);
  }
  out.value = std::min(loss * norm, opt.loss_clip);
  if (!with_grad) return out;

  ModelGradient g = zero_gradient(m);
  Eigen::MatrixXd lam = Eigen::MatrixXd::Zero(n, B);
  for (int k = W - 1; k >= 0; --k) {
    lam += gsample[k];
    for (int s = S - 1; s >= 0; --s) {
      const StageCache* c = &caches[(static_cast<std::size_t>(k) * S + s) * 4];
      Eigen::MatrixXd gK1 = (h / 6.0) * lam;
      Eigen::MatrixXd gK2 = (h / 3.0) * lam;
      Eigen::MatrixXd gK3 = (h / 3.0) * lam;
      const Eigen::MatrixXd gK4 = (h / 6.0) * lam;
      Eigen::MatrixXd gx = field.vjp(c[3], gK4, g);
      lam += gx;
      gK3 += h * gx;
      gx = field.vjp(c[2], gK3, g);
      lam += gx;
      gK2 += (0.5 * h) * gx;
      gx = field.vjp(c[1], gK2, g);
      lam += gx;
      gK1 += (0.5 * h) * gx;
      lam += field.vjp(c[0], gK1, g);
    }
    // phase jumps shift the state by a constant, so the adjoint passes through
  }
  out.grad = std::move(g);
  return out;
}

Eigen::VectorXd pert_weights(const std::vector<sim::PerturbationRecord>& records) {
  Eigen::VectorXd ms = Eigen::VectorXd::Zero(kStateDim);
  for (const auto& r : records) ms += r.delta_xdot.cwiseAbs2();
  Eigen::VectorXd w(kStateDim);
  for (int i = 0; i < kStateDim; ++i) {
    const double v = records.empty() ? 0.0 : ms[i] / static_cast<double>(records.size());
    w[i] = v > 0.0 ? 1.0 / v : 1.0;
  }
  return w;
}

LossValue loss_pert(const HybridModel& m, const std::vector<sim::PerturbationRecord>& records,
                    const Eigen::VectorXd& weights, bool with_grad) {
  LossValue out;
  const int n = m.n_states();
  const int R = static_cast<int>(records.size());
  if (R == 0) {
    if (with_grad) out.grad = zero_gradient(m);
    return out;
  }
  const Eigen::VectorXd w = weights.size() == 0 ? Eigen::VectorXd::Ones(n) : weights;
  if (w.size() != n) throw ValidationError("loss_pert: weight vector has wrong size");

  Eigen::MatrixXd GDx(m.library.size(), R);  // dTheta/dx * dx per record
  Eigen::MatrixXd Z(n + 1, R), T = Eigen::MatrixXd::Zero(n + 1, R), E(n, R);
  Eigen::VectorXd uv(1);
  for (int r = 0; r < R; ++r) {
    const auto& rec = records[r];
    uv[0] = rec.anchor_u;
    const Eigen::VectorXd x = rec.anchor_state;
    GDx.col(r) = m.library.gradient(x, uv) * Eigen::VectorXd(rec.delta_x);
    Z.col(r) = m.scaled_input(x, rec.anchor_u);
    T.col(r).head(n) = m.scaler.scale.head(n).cwiseProduct(rec.delta_x);
    E.col(r) = rec.delta_xdot;
  }
  Eigen::MatrixXd JDx = m.xi.values.transpose() * GDx;
  if (m.mlp) JDx += m.out_scale.asDiagonal() * nn::jvp_batch(*m.mlp, Z, T);
  E -= JDx;
  out.value = (w.asDiagonal() * E.cwiseAbs2()).sum() / R;
  if (!with_grad) return out;

  // d value / d (J dx) = -2 w E / R
  const Eigen::MatrixXd G = (-2.0 / R) * (w.asDiagonal() * E);
  ModelGradient g = zero_gradient(m);
  g.xi = GDx * G.transpose();
  if (m.mlp) nn::jvp_backward(*m.mlp, Z, T, m.out_scale.asDiagonal() * G, *g.mlp);
  out.grad = std::move(g);
  return out;
}

// ---------------------------------------------------------- parameterization

Parameterization::Parameterization(const HybridModel& m, reg::Normalization nz) : nz_(std::move(nz)) {
  if (nz_.column_scale.size() != m.library.size() || nz_.target_scale.size() != m.n_states()) {
    throw ValidationError("parameterization: normalization does not match the model");
  }
  for (int i = 0; i < m.xi.cols(); ++i) {
    for (int j = 0; j < m.xi.rows(); ++j) {
      if (m.xi.mask(j, i)) entries_.emplace_back(j, i);
    }
  }
  n_xi_ = static_cast<int>(entries_.size());
  n_mlp_ = m.mlp ? m.mlp->parameter_count() : 0;
}

Eigen::VectorXd Parameterization::pack(const HybridModel& m) const {
  Eigen::VectorXd th(size());
  for (int e = 0; e < n_xi_; ++e) {
    const auto [j, i] = entries_[e];
    th[e] = m.xi.values(j, i) * nz_.column_scale[j] / nz_.target_scale[i];
  }
  if (n_mlp_ > 0) th.tail(n_mlp_) = nn::flatten(*m.mlp);
  return th;
}

void Parameterization::unpack(const Eigen::VectorXd& th, HybridModel& m) const {
  if (th.size() != size()) throw ValidationError("parameterization: size mismatch");
  for (int e = 0; e < n_xi_; ++e) {
    const auto [j, i] = entries_[e];
    m.xi.values(j, i) = th[e] * nz_.target_scale[i] / nz_.column_scale[j];
  }
  if (n_mlp_ > 0) nn::unflatten(*m.mlp, th.tail(n_mlp_));
}

Eigen::VectorXd Parameterization::pack_gradient(const ModelGradient& g) const {
  Eigen::VectorXd out(size());
  for (int e = 0; e < n_xi_; ++e) {
    const auto [j, i] = entries_[e];
    out[e] = g.xi(j, i) * nz_.target_scale[i] / nz_.column_scale[j];
  }
  if (n_mlp_ > 0) out.tail(n_mlp_) = nn::flatten(*g.mlp);
  return out;
}

double Parameterization::l1(const Eigen::VectorXd& th) const {
  return th.head(n_xi_).cwiseAbs().sum();
}

Eigen::VectorXd Parameterization::l1_subgradient(const Eigen::VectorXd& th) const {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(size());
  for (int e = 0; e < n_xi_; ++e) g[e] = th[e] > 0.0 ? 1.0 : (th[e] < 0.0 ? -1.0 : 0.0);
  return g;
}

TotalLoss total_loss(const HybridModel& m, const Parameterization& param,
                     const std::vector<Trajectory>& trajs, const std::vector<Window>& windows,
                     const std::vector<sim::PerturbationRecord>& records,
                     const Eigen::VectorXd& pert_w, const TrainConfig& cfg,
                     const TrajLossOptions& opt, bool with_grad) {
  TotalLoss out;
  const Eigen::VectorXd theta = param.pack(m);
  const LossValue lt = loss_traj(m, trajs, windows, opt, with_grad);
  out.traj = lt.value;
  out.diverged = lt.diverged;
  if (cfg.lambda_pert > 0.0 && records.empty()) {
    throw ValidationError("total_loss: lambda_pert > 0 needs perturbation records");
  }
  LossValue lp;
  if (cfg.lambda_pert > 0.0) lp = loss_pert(m, records, pert_w, with_grad && !lt.diverged);
  out.pert = lp.value;
  out.l1 = param.l1(theta);
  out.total = out.traj + cfg.lambda_pert * out.pert + cfg.lambda_sparse * out.l1;
  if (with_grad && !lt.diverged) {
    out.grad = param.pack_gradient(*lt.grad);
    if (cfg.lambda_pert > 0.0) out.grad += cfg.lambda_pert * param.pack_gradient(*lp.grad);
    if (!cfg.proximal_l1 && cfg.lambda_sparse > 0.0) {
      out.grad += cfg.lambda_sparse * param.l1_subgradient(theta);
    }
  }
  return out;
}

double one_cycle_lr(const TrainConfig& cfg, long step, long total_steps) {
  const double initial = cfg.lr_max / cfg.div_factor;
  const double final_lr = initial / cfg.final_div_factor;
  const double up = std::max(1.0, cfg.pct_start * static_cast<double>(total_steps) - 1.0);
  const double down = std::max(1.0, static_cast<double>(total_steps) - 1.0 - up);
  auto cosine = [](double from, double to, double frac) {
    return to + 0.5 * (from - to) * (1.0 + std::cos(kPi * std::clamp(frac, 0.0, 1.0)));
  };
  const double s = static_cast<double>(step);
  if (s <= up) return cosine(initial, cfg.lr_max, s / up);
  return cosine(cfg.lr_max, final_lr, (s - up) / down);
}

double validation_loss(const HybridModel& m, const std::vector<Trajectory>& trajs, int substeps) {
  const int n = m.n_states();
  const Eigen::VectorXd a = m.scaler.scale.head(n);
  double sum = 0.0;
  long count = 0;
  for (const auto& tr : trajs) {
    RolloutOptions opt;
    opt.sample_dt = tr.times[1] - tr.times[0];
    opt.substeps = substeps;
    try {
      const Trajectory pr = rollout(m, tr.states.row(0).transpose(), tr.input, tr.times.back(), opt);
      if (pr.size() != tr.size()) return std::numeric_limits<double>::infinity();
      sum += ((pr.states - tr.states) * a.asDiagonal()).squaredNorm();
      count += static_cast<long>(tr.size() - 1);
    } catch (const NumericalError&) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

// ------------------------------------------------------------------ train

Design build_design(const feat::FunctionLibrary& lib, const std::vector<Trajectory>& trajs) {
  long rows = 0;
  std::vector<reg::DerivativeEstimate> est;
  for (const auto& tr : trajs) {
    est.push_back(reg::estimate_derivatives(tr));
    rows += std::count(est.back().valid.begin(), est.back().valid.end(), true);
  }
  const int n = lib.n_states();
  Design d;
  d.Theta.resize(rows, lib.size());
  d.Xdot.resize(rows, n);
  d.Z.resize(rows, n + 1);
  long r = 0;
  Eigen::VectorXd uv(1);
  for (std::size_t t = 0; t < trajs.size(); ++t) {
    const auto& tr = trajs[t];
    for (int k = 0; k < tr.size(); ++k) {
      if (!est[t].valid[k]) continue;
      uv[0] = tr.inputs[k];
      const Eigen::VectorXd x = tr.states.row(k).transpose();
      d.Theta.row(r) = lib.evaluate(x, uv).transpose();
      d.Xdot.row(r) = est[t].xdot.row(k);
      d.Z.row(r).head(n) = x.transpose();
      d.Z(r, n) = tr.inputs[k];
      ++r;
    }
  }
  return d;
}

namespace {

std::vector<std::vector<Eigen::VectorXd>> draw_dropout(const nn::Mlp& net, int count, double p,
                                                       Rng& rng) {
  std::vector<std::vector<Eigen::VectorXd>> masks(count);
  const double keep = 1.0 / (1.0 - p);
  for (int b = 0; b < count; ++b) {
    for (int l = 0; l + 1 < net.n_layers(); ++l) {
      Eigen::VectorXd mk(net.sizes[l + 1]);
      for (int i = 0; i < mk.size(); ++i) mk[i] = uniform(rng) < p ? 0.0 : keep;
      masks[b].push_back(std::move(mk));
    }
  }
  return masks;
}

void hard_threshold(HybridModel& m, const reg::Normalization& nz, double threshold) {
  for (int i = 0; i < m.xi.cols(); ++i) {
    for (int j = 0; j < m.xi.rows(); ++j) {
      const double scaled = m.xi.values(j, i) * nz.column_scale[j] / nz.target_scale[i];
      if (m.xi.mask(j, i) && std::abs(scaled) < threshold) {
        m.xi.mask(j, i) = false;
        m.xi.values(j, i) = 0.0;
      }
    }
  }
}

}  // namespace

HybridModel train(const HybridModel& initial, const sim::Dataset& data, const TrainConfig& cfg,
                  TrainReport* report) {
  cfg.validate();
  initial.validate();
  const auto t_begin = std::chrono::steady_clock::now();
  const auto& trajs = data.trajectories;
  if (trajs.empty()) throw ValidationError("train: empty dataset");

  HybridModel model = initial;
  const Design design = build_design(model.library, trajs);
  const reg::Normalization nz = reg::normalization_for(design.Theta, design.Xdot);
  const Parameterization param(model, nz);
  Eigen::VectorXd theta = param.pack(model);

  const std::vector<Window> windows = make_windows(trajs, cfg.window, cfg.stride);
  if (windows.empty()) throw ValidationError("train: trajectories shorter than one window");
  const Eigen::VectorXd pert_w =
      cfg.normalize_pert ? pert_weights(data.records) : Eigen::VectorXd::Ones(model.n_states());

  const long steps_per_epoch = (static_cast<long>(windows.size()) + cfg.batch - 1) / cfg.batch;
  const long total_steps = steps_per_epoch * cfg.epochs;
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(theta.size());
  Rng shuffle_rng = make_rng(cfg.seed, "shuffle");
  Rng dropout_rng = make_rng(cfg.seed, "dropout");

  TrainReport rep;
  rep.seed = cfg.seed;
  rep.method = to_string(model.mode);
  HybridModel best = model;
  double best_val = validation_loss(model, trajs, cfg.substeps);
  rep.best_epoch = 0;
  int aborted_epochs = 0;
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Eigen::VectorXd theta0 = theta, m10 = m1, m20 = m2;
    const long step0 = step;
    std::vector<int> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform(shuffle_rng) * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    int batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      std::vector<Window> batch;
      for (std::size_t i = first; i < std::min(order.size(), first + cfg.batch); ++i) {
        batch.push_back(windows[order[i]]);
      }
      TrajLossOptions opt;
      opt.substeps = cfg.substeps;
      opt.loss_clip = cfg.loss_clip;
      if (model.mlp && cfg.dropout > 0.0) {
        opt.dropout = draw_dropout(*model.mlp, static_cast<int>(batch.size()), cfg.dropout, dropout_rng);
      }
      param.unpack(theta, model);
      const TotalLoss tl = total_loss(model, param, trajs, batch, data.records, pert_w, cfg, opt, true);
      const double lr = one_cycle_lr(cfg, step, total_steps);
      ++step;
      rec.lr = lr;
      rec.traj += tl.traj;
      rec.pert += tl.pert;
      rec.l1 += tl.l1;
      ++batches;
      if (tl.diverged) {
        ++rec.diverged_batches;
        continue;
      }
      Eigen::VectorXd g = tl.grad;
      if (!g.allFinite()) {
        rec.aborted = true;
        break;
      }
      const double gn = g.norm();
      if (cfg.grad_clip > 0.0 && gn > cfg.grad_clip) g *= cfg.grad_clip / gn;
      const double t = static_cast<double>(step);
      theta *= 1.0 - lr * cfg.weight_decay;
      m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g;
      m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(cfg.beta1, t);
      const double c2 = 1.0 - std::pow(cfg.beta2, t);
      theta.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.adam_eps);
      if (cfg.proximal_l1 && cfg.lambda_sparse > 0.0) {
        const double k = lr * cfg.lambda_sparse;
        for (int e = 0; e < param.xi_size(); ++e) {
          const double v = theta[e];
          theta[e] = v > k ? v - k : (v < -k ? v + k : 0.0);
        }
      }
    }
    if (rec.aborted) {
      theta = theta0;
      m1 = m10;
      m2 = m20;
      step = step0 + steps_per_epoch;
      ++aborted_epochs;
      rec.validation = std::numeric_limits<double>::infinity();
      rep.epochs.push_back(rec);
      if (aborted_epochs > 3) {
        rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
        if (report) *report = rep;
        throw TrainingFailedError("training failed: non-finite gradients in " +
                                  std::to_string(aborted_epochs) + " epochs");
      }
      continue;
    }
    if (batches > 0) {
      rec.traj /= batches;
      rec.pert /= batches;
      rec.l1 /= batches;
    }
    rec.total = rec.traj + cfg.lambda_pert * rec.pert + cfg.lambda_sparse * rec.l1;
    param.unpack(theta, model);
    rec.validation = validation_loss(model, trajs, cfg.substeps);
    if (rec.validation < best_val) {
      best_val = rec.validation;
      best = model;
      rep.best_epoch = epoch;
    }
    rep.epochs.push_back(rec);
  }

  hard_threshold(best, nz, cfg.threshold);
  best.provenance["train_config"] = cfg;
  rep.best_validation = best_val;
  rep.active_coefficients = best.xi.active_count();
  rep.parameter_count = best.mlp ? best.mlp->parameter_count() : 0;
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  if (report) *report = rep;
  return best;
}

// ---------------------------------------------------------------- presets

std::vector<std::string> method_names() {
  return {"std-sindy", "mod-sindy", "node", "pisml", "pisml-phy"};
}

MethodPreset method_preset(const std::string& name) {
  MethodPreset p;
  p.name = name;
  if (name == "std-sindy") {
    p.mode = ModelMode::std_sindy;
    p.library = LibraryKind::polynomial;
    p.fit.solver = reg::Solver::stlsq;
    p.fit.threshold = 0.005;
    p.fit.alpha = 1e-8;
    p.scaler = reg::ScalerMode::minmax;
  } else if (name == "mod-sindy") {
    p.mode = ModelMode::mod_sindy;
    p.fit.solver = reg::Solver::ridge;
    p.fit.alpha = 1e-6;
    p.scaler = reg::ScalerMode::minmax;
  } else if (name == "node") {
    p.mode = ModelMode::pure_node;
    p.scaler = reg::ScalerMode::standard;
    p.has_mlp = true;
    p.trained = true;
    p.train.lambda_pert = 0.0;
    p.train.lambda_sparse = 0.0;
    p.train.dropout = 0.0;
  } else if (name == "pisml" || name == "pisml-phy") {
    p.mode = name == "pisml" ? ModelMode::pisml : ModelMode::pisml_phy;
    p.fit.solver = reg::Solver::ridge;
    p.fit.alpha = 0.1;
    p.scaler = reg::ScalerMode::standard;
    p.has_mlp = true;
    p.trained = true;
    p.train.lambda_pert = name == "pisml" ? 0.0 : 1.0;
  } else {
    throw ValidationError("unknown method '" + name + "'");
  }
  return p;
}

HybridModel initial_model(const MethodPreset& preset, const sim::Dataset& data) {
  if (data.trajectories.empty()) throw ValidationError("initial_model: empty dataset");
  const int n = data.trajectories.front().n_states();
  HybridModel m;
  m.mode = preset.mode;
  m.library = preset.library == LibraryKind::polynomial ? feat::build_polynomial_library(n, 1, 2)
                                                         : feat::build_physics_library(n);
  m.scaler = reg::fit_scaler(data.trajectories, preset.scaler);
  const Design d = build_design(m.library, data.trajectories);
  if (preset.mode == ModelMode::pure_node) {
    m.xi = reg::zero_coefficients(m.library.size(), n, m.library.hash());
  } else {
    reg::FitConfig fc = preset.fit;
    if (preset.trained) fc.alpha = preset.train.ridge_alpha;
    m.xi = reg::fit(d.Theta, d.Xdot, fc, m.library.hash());
  }
  m.out_scale = Eigen::VectorXd::Ones(n);
  if (preset.has_mlp) {
    m.out_scale = (d.Xdot.colwise().squaredNorm() / static_cast<double>(d.Xdot.rows())).cwiseSqrt().transpose();
    for (auto& v : m.out_scale) {
      if (!(v > 0.0)) v = 1.0;
    }
    std::vector<int> sizes = {n + 1};
    sizes.insert(sizes.end(), preset.train.hidden.begin(), preset.train.hidden.end());
    sizes.push_back(n);
    Rng rng = make_rng(preset.train.seed, "init");
    m.mlp = nn::make_mlp(sizes, rng, true, preset.train.layer_norm);
  }
  m.provenance = {{"method", preset.name}, {"seed", preset.train.seed}};
  m.validate();
  return m;
}

HybridModel fit_method(const MethodPreset& preset, const sim::Dataset& data, TrainReport* report) {
  HybridModel m = initial_model(preset, data);
  if (!preset.trained) {
    if (report) {
      *report = TrainReport{};
      report->method = preset.name;
      report->seed = preset.train.seed;
      report->active_coefficients = m.xi.active_count();
    }
    return m;
  }
  HybridModel out = train(m, data, preset.train, report);
  if (report) report->method = preset.name;
  out.provenance["method"] = preset.name;
  return out;
}

}  // namespace pisml::train
