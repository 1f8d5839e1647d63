#include "pisml/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pisml/parallel.hpp"

namespace pisml::analysis {

Eigen::MatrixXd numerical_jacobian(const Field& f, const Eigen::VectorXd& x, double u, double h) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd J;
  for (Eigen::Index c = 0; c < n; ++c) {
    const double step = h * std::max(1.0, std::abs(x[c]));
    Eigen::VectorXd xp = x, xm = x;
    xp[c] += step;
    xm[c] -= step;
    const Eigen::VectorXd d = (f(xp, u) - f(xm, u)) / (2.0 * step);
    if (c == 0) J.resize(d.size(), n);
    J.col(c) = d;
  }
  return J;
}

std::vector<Complex> eigenvalues(const Eigen::MatrixXd& A) {
  if (A.rows() != A.cols()) throw ValidationError("eigenvalues: matrix must be square");
  if (!A.allFinite()) throw ValidationError("eigenvalues: matrix has non-finite entries");
  const Eigen::Index n = A.rows();
  if (n == 0) return {};
  Eigen::EigenSolver<Eigen::MatrixXd> es(A, true);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalues: QR iteration did not converge");
  const Eigen::MatrixXcd V = es.eigenvectors();
  const Eigen::VectorXcd L = es.eigenvalues();
  const double normA = std::max(A.norm(), std::numeric_limits<double>::min());
  const Eigen::MatrixXcd Ac = A.cast<Complex>();
  for (Eigen::Index k = 0; k < n; ++k) {
    const double res = (Ac * V.col(k) - L[k] * V.col(k)).norm() / std::max(V.col(k).norm(), 1e-300);
    if (res > 1e-8 * normA) {
      std::ostringstream os;
      os << "eigenvalues: eigenpair residual " << res << " exceeds 1e-8 ||A|| = " << 1e-8 * normA;
      throw NumericalError(os.str());
    }
  }
  std::vector<Complex> out(L.data(), L.data() + n);
  std::sort(out.begin(), out.end(), [](const Complex& a, const Complex& b) {
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
  });
  return out;
}

EigenSpectrum truth_spectrum(const sim::GfmParams& p, double u) {
  const StateVector xs = sim::find_equilibrium(p, u);
  const Field f = [&p](const Eigen::VectorXd& x, double uu) {
    return Eigen::VectorXd(sim::gfm_derivative(StateVector(x), uu, p));
  };
  EigenSpectrum s;
  s.values = eigenvalues(numerical_jacobian(f, xs, u));
  s.x = xs;
  s.u = u;
  s.model_id = "truth";
  return s;
}

EigenSpectrum model_spectrum(const HybridModel& m, double u, const Eigen::VectorXd& seed,
                             const std::string& model_id) {
  EigenSpectrum s;
  s.x = model_equilibrium(m, u, seed);
  s.values = eigenvalues(m.jacobian(s.x, u));
  s.u = u;
  s.model_id = model_id;
  return s;
}

std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  // shortest augmenting path with potentials, O(n^3)
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw ValidationError("hungarian: cost matrix must be square");
  if (!cost.allFinite()) throw ValidationError("hungarian: non-finite cost");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col(n);
  for (int j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

double wasserstein_distance(const std::vector<Complex>& a, const std::vector<Complex>& b) {
  if (a.size() != b.size()) {
    throw ValidationError("wasserstein_distance: spectra have different sizes (" +
                          std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  const int n = static_cast<int>(a.size());
  if (n == 0) return 0.0;
  Eigen::MatrixXd C(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) C(i, j) = std::abs(a[i] - b[j]);
  }
  const std::vector<int> col = hungarian(C);
  // summing the matched costs in sorted order makes d(a, b) == d(b, a) exactly
  std::vector<double> matched(n);
  for (int i = 0; i < n; ++i) matched[i] = C(i, col[i]);
  std::sort(matched.begin(), matched.end());
  double total = 0.0;
  for (double c : matched) total += c;
  return total / n;
}

bool Window::contains(double t) const {
  const double eps = 1e-9;
  if (t < t0 - eps) return false;
  return closed ? t <= t1 + eps : t < t1 - eps;
}

Window iod_window() { return {"IOD", 0.0, 0.02, false}; }
Window ood_window() { return {"OOD", 0.02, 0.04, true}; }

std::vector<int> default_channels() { return {kIod, kIoq, kVcd, kVcq}; }

ErrorReport relative_l2(const Trajectory& pred, const Trajectory& truth, const Window& w,
                        const std::vector<int>& channels) {
  if (pred.size() != truth.size() || pred.n_states() != truth.n_states()) {
    throw ValidationError("relative_l2: prediction and truth grids differ in size");
  }
  for (int k = 0; k < truth.size(); ++k) {
    if (std::abs(pred.times[k] - truth.times[k]) > 1e-9) {
      throw ValidationError("relative_l2: prediction and truth sample times differ");
    }
  }
  ErrorReport r;
  r.channels = channels;
  for (int c : channels) {
    if (c < 0 || c >= truth.n_states()) throw ValidationError("relative_l2: channel out of range");
    double num = 0.0, den = 0.0;
    for (int k = 0; k < truth.size(); ++k) {
      if (!w.contains(truth.times[k])) continue;
      const double d = pred.states(k, c) - truth.states(k, c);
      num += d * d;
      den += truth.states(k, c) * truth.states(k, c);
    }
    if (!(den > 0.0)) {
      throw NumericalError("relative_l2: truth channel " + state_name(c, truth.n_states()) +
                           " has zero norm in window " + w.name);
    }
    r.per_channel.push_back(100.0 * std::sqrt(num / den));
  }
  double s = 0.0;
  for (double v : r.per_channel) s += v;
  r.mean = r.per_channel.empty() ? 0.0 : s / static_cast<double>(r.per_channel.size());
  return r;
}

Complexity complexity(const HybridModel& m) {
  Complexity c;
  c.parameter_count = m.mlp ? m.mlp->parameter_count() : 0;
  c.active_coefficients = m.xi.active_count();
  return c;
}

sim::UnitField unit_field(const HybridModel& m) {
  if (m.n_states() != kStateDim || m.n_inputs() != 1) {
    throw ValidationError("unit_field: model must have 13 states and one input");
  }
  return [m](const Eigen::VectorXd& x, double u) { return m.derivative(x, u); };
}

double& unit_parameter(sim::GfmParams& p, const std::string& name) {
  if (name == "m_p") return p.m_p;
  if (name == "m_q") return p.m_q;
  if (name == "K_pV") return p.K_pV;
  if (name == "K_iV") return p.K_iV;
  if (name == "K_pC") return p.K_pC;
  if (name == "K_iC") return p.K_iC;
  throw ValidationError("unknown sweep parameter '" + name + "'");
}

std::vector<SweepPoint> root_locus(const sim::MicrogridParams& mp, const SweepSpec& sweep,
                                   const sim::UnitField& unit1) {
  if (sweep.unit < 0 || sweep.unit > 2) throw ValidationError("root_locus: unit must be 0, 1 or 2");
  if (sweep.steps < 1) throw ValidationError("root_locus: steps must be >= 1");
  {
    sim::GfmParams probe = mp.units[sweep.unit];
    unit_parameter(probe, sweep.name);
  }
  std::vector<SweepPoint> out(sweep.steps);
  parallel_for(sweep.steps, [&](int k) {
    SweepPoint& pt = out[k];
    pt.value = sweep.steps == 1 ? sweep.lo
                                : sweep.lo + (sweep.hi - sweep.lo) * k / static_cast<double>(sweep.steps - 1);
    sim::MicrogridParams p = mp;
    unit_parameter(p.units[sweep.unit], sweep.name) = pt.value;
    try {
      const sim::Microgrid mg(p, {}, unit1);
      const Eigen::VectorXd X = mg.equilibrium(false);
      pt.spectrum.values = eigenvalues(mg.reduced_jacobian(X, false));
      pt.spectrum.x = X;
      pt.spectrum.u = 1.0;
      pt.spectrum.model_id = unit1 ? "hybrid" : "analytical";
      pt.ok = true;
    } catch (const NumericalError& e) {
      pt.ok = false;
      pt.message = e.what();
    }
  });
  return out;
}

}  // namespace pisml::analysis
