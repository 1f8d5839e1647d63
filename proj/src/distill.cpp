#include "pisml/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pisml/parallel.hpp"
#include "pisml/rng.hpp"
#include "pisml/state.hpp"

namespace pisml::distill {

Box training_envelope(const std::vector<Trajectory>& trajs, double inflate) {
  if (trajs.empty()) throw ValidationError("training_envelope: no trajectories");
  if (inflate < 0.0) throw ValidationError("training_envelope: inflate must be >= 0");
  const int n = trajs.front().n_states();
  Box b;
  b.lo = Eigen::VectorXd::Constant(n + 1, std::numeric_limits<double>::infinity());
  b.hi = -b.lo;
  for (const auto& tr : trajs) {
    const Eigen::MatrixXd Z = reg::stack_state_input(tr);
    b.lo = b.lo.cwiseMin(Z.colwise().minCoeff().transpose());
    b.hi = b.hi.cwiseMax(Z.colwise().maxCoeff().transpose());
  }
  const Eigen::VectorXd w = b.hi - b.lo;
  b.lo -= inflate * w;
  b.hi += inflate * w;
  return b;
}

namespace {

double radical_inverse(long index, int base) {
  double f = 1.0, r = 0.0;
  while (index > 0) {
    f /= base;
    r += f * static_cast<double>(index % base);
    index /= base;
  }
  return r;
}

constexpr int kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71};

}  // namespace

SyntheticData sample_synthetic(const HybridModel& m, const std::vector<Trajectory>& trajs,
                               const Box& box, int n, std::uint64_t seed) {
  const int ns = m.n_states();
  if (n < 0) throw ValidationError("sample_synthetic: n must be >= 0");
  if (box.lo.size() != ns + 1 || box.hi.size() != ns + 1) {
    throw ValidationError("sample_synthetic: box dimension does not match the model");
  }
  if (ns + 1 > static_cast<int>(std::size(kPrimes))) {
    throw ValidationError("sample_synthetic: too many dimensions for the Halton sequence");
  }
  SyntheticData d;
  d.X.resize(n, ns);
  d.U.resize(n);
  d.Y = Eigen::MatrixXd::Zero(n, ns);
  if (n == 0) return d;

  const int n_box = n / 2;
  // Halton points (skipping the origin-heavy prefix)
  for (int k = 0; k < n_box; ++k) {
    for (int c = 0; c <= ns; ++c) {
      const double v = box.lo[c] + (box.hi[c] - box.lo[c]) * radical_inverse(k + 20, kPrimes[c]);
      if (c < ns) d.X(k, c) = v; else d.U[k] = v;
    }
  }
  // jittered trajectory samples
  if (trajs.empty() && n > n_box) throw ValidationError("sample_synthetic: trajectories required");
  Rng rng = make_rng(seed, "distill");
  const Eigen::VectorXd width = box.hi - box.lo;
  for (int k = n_box; k < n; ++k) {
    const auto& tr = trajs[static_cast<std::size_t>(uniform(rng) * trajs.size()) % trajs.size()];
    const int s = static_cast<int>(uniform(rng) * tr.size()) % tr.size();
    for (int c = 0; c < ns; ++c) d.X(k, c) = tr.states(s, c) + 0.02 * width[c] * normal(rng);
    d.U[k] = tr.inputs[s] + 0.02 * width[ns] * normal(rng);
  }
  if (m.mlp) {
    parallel_for(n, [&](int k) { d.Y.row(k) = m.residual(d.X.row(k).transpose(), d.U[k]).transpose(); });
  }
  return d;
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"n_samples", c.n_samples}, {"threshold", c.threshold}, {"alpha", c.alpha},
       {"max_iter", c.max_iter},   {"inflate", c.inflate},     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  c = DistillConfig{};
  for (const auto& [key, value] : j.items()) {
    if (key == "n_samples") c.n_samples = value.get<int>();
    else if (key == "threshold") c.threshold = value.get<double>();
    else if (key == "alpha") c.alpha = value.get<double>();
    else if (key == "max_iter") c.max_iter = value.get<int>();
    else if (key == "inflate") c.inflate = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw ValidationError("distill config: unknown key '" + key + "'");
  }
}

reg::CoefficientMatrix distill_residual(const SyntheticData& data, const feat::FunctionLibrary& lib,
                                        const DistillConfig& cfg) {
  const long n = data.X.rows();
  if (n < 10L * lib.size()) {
    throw ValidationError("distill_residual: need at least 10 samples per library term (" +
                          std::to_string(10L * lib.size()) + "), got " + std::to_string(n));
  }
  const Eigen::MatrixXd Theta = lib.evaluate(data.X, Eigen::MatrixXd(data.U));
  reg::FitConfig fc;
  fc.solver = reg::Solver::stlsq;
  fc.threshold = cfg.threshold;
  fc.alpha = cfg.alpha;
  fc.max_iter = cfg.max_iter;
  fc.normalize = true;
  reg::CoefficientMatrix c = reg::fit(Theta, data.Y, fc, lib.hash());
  // an all-zero target must give exactly zero coefficients
  for (int i = 0; i < data.Y.cols(); ++i) {
    if (data.Y.col(i).cwiseAbs().maxCoeff() == 0.0) {
      c.values.col(i).setZero();
      c.mask.col(i).setConstant(false);
    }
  }
  return c;
}

HybridModel merge(const HybridModel& hybrid, const feat::FunctionLibrary& residual_lib,
                  const reg::CoefficientMatrix& residual_xi) {
  const int n = hybrid.n_states();
  if (residual_lib.n_states() != n || residual_lib.n_inputs() != hybrid.n_inputs()) {
    throw ValidationError("merge: residual library has a different state layout");
  }
  if (residual_xi.rows() != residual_lib.size() || residual_xi.cols() != n) {
    throw ValidationError("merge: residual coefficients do not match their library");
  }
  std::vector<feat::TermDescriptor> terms = hybrid.library.terms();
  for (const auto& t : residual_lib.terms()) {
    if (hybrid.library.find(t) < 0) terms.push_back(t);
  }
  const feat::FunctionLibrary lib(n, hybrid.n_inputs(), terms, residual_lib.P_0(), residual_lib.Q_0());
  reg::CoefficientMatrix xi = reg::zero_coefficients(lib.size(), n, lib.hash());
  auto add = [&](const feat::FunctionLibrary& src, const reg::CoefficientMatrix& c) {
    for (int j = 0; j < src.size(); ++j) {
      const int row = lib.find(src.terms()[j]);
      for (int i = 0; i < n; ++i) {
        if (!c.mask(j, i)) continue;
        xi.values(row, i) += c.values(j, i);
        xi.mask(row, i) = true;
      }
    }
  };
  add(hybrid.library, hybrid.xi);
  add(residual_lib, residual_xi);
  for (int j = 0; j < lib.size(); ++j) {
    for (int i = 0; i < n; ++i) {
      if (xi.mask(j, i) && xi.values(j, i) == 0.0) xi.mask(j, i) = false;
    }
  }

  HybridModel out;
  out.mode = ModelMode::distilled;
  out.library = lib;
  out.xi = std::move(xi);
  out.scaler = hybrid.scaler;
  out.out_scale = Eigen::VectorXd::Ones(n);
  out.residual_library = residual_lib;
  out.residual_xi = residual_xi;
  out.backbone_xi = hybrid.xi;
  out.provenance = hybrid.provenance;
  out.provenance["distilled_from"] = to_string(hybrid.mode);
  out.validate();
  return out;
}

HybridModel distill_model(const HybridModel& hybrid, const std::vector<Trajectory>& trajs,
                          const DistillConfig& cfg) {
  if (!hybrid.mlp) throw ValidationError("distill: model has no neural residual");
  const Box box = training_envelope(trajs, cfg.inflate);
  const SyntheticData data = sample_synthetic(hybrid, trajs, box, cfg.n_samples, cfg.seed);
  const feat::FunctionLibrary ext =
      feat::build_extended_library(hybrid.n_states(), hybrid.library.P_0(), hybrid.library.Q_0());
  const reg::CoefficientMatrix resid = distill_residual(data, ext, cfg);
  HybridModel out = merge(hybrid, ext, resid);
  out.provenance["distill_config"] = cfg;
  return out;
}

std::string render_equations(const HybridModel& m, int precision) {
  if (precision < 1 || precision > 17) throw ValidationError("render: precision must be 1..17");
  std::ostringstream os;
  const int n = m.n_states();
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> terms;
    for (int j = 0; j < m.library.size(); ++j) {
      if (m.xi.mask(j, i) && m.xi.values(j, i) != 0.0) terms.emplace_back(m.xi.values(j, i), j);
    }
    std::stable_sort(terms.begin(), terms.end(),
                     [](const auto& a, const auto& b) { return std::abs(a.first) > std::abs(b.first); });
    os << "d " << state_name(i, n) << "/dt = ";
    if (terms.empty()) os << "0";
    for (std::size_t k = 0; k < terms.size(); ++k) {
      char buf[64];
      const double c = terms[k].first;
      std::snprintf(buf, sizeof buf, "%.*g", precision, k == 0 ? c : std::abs(c));
      if (k > 0) os << (c < 0.0 ? " - " : " + ");
      os << buf << "*" << m.library.terms()[terms[k].second].display;
    }
    os << "\n";
  }
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

reg::CoefficientMatrix parse_equations(const std::string& text, const feat::FunctionLibrary& lib) {
  const int n = lib.n_states();
  reg::CoefficientMatrix c = reg::zero_coefficients(lib.size(), n, lib.hash());
  c.mask.setConstant(false);
  std::map<std::string, int> state_index;
  for (int i = 0; i < n; ++i) state_index[state_name(i, n)] = i;
  std::map<std::string, int> by_display;
  for (int j = 0; j < lib.size(); ++j) by_display[lib.term(j).display] = j;

  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<bool> seen(n, false);
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ValidationError("equations line " + std::to_string(line_no) + ": " + why);
    };
    if (line.rfind("d ", 0) != 0) fail("expected 'd <state>/dt = ...'");
    const auto eq = line.find("/dt =");
    if (eq == std::string::npos) fail("missing '/dt ='");
    const std::string name = trim(line.substr(2, eq - 2));
    const auto it = state_index.find(name);
    if (it == state_index.end()) fail("unknown state '" + name + "'");
    const int i = it->second;
    if (seen[i]) fail("state '" + name + "' defined twice");
    seen[i] = true;
    std::string rhs = trim(line.substr(eq + 5));
    if (rhs == "0") continue;

    // split on top-level " + " / " - " separators
    std::vector<std::pair<double, std::string>> pieces;
    int depth = 0;
    double sign = 1.0;
    std::size_t start = 0;
    for (std::size_t k = 0; k <= rhs.size(); ++k) {
      if (k < rhs.size()) {
        if (rhs[k] == '(') ++depth;
        if (rhs[k] == ')') --depth;
      }
      const bool sep = k + 2 < rhs.size() && depth == 0 && rhs[k] == ' ' &&
                       (rhs[k + 1] == '+' || rhs[k + 1] == '-') && rhs[k + 2] == ' ';
      if (k == rhs.size() || sep) {
        pieces.emplace_back(sign, rhs.substr(start, k - start));
        if (sep) {
          sign = rhs[k + 1] == '-' ? -1.0 : 1.0;
          start = k + 3;
          k += 2;
        }
      }
    }
    for (const auto& [sg, piece] : pieces) {
      const auto star = piece.find('*');
      if (star == std::string::npos) fail("term '" + piece + "' has no coefficient");
      double value = 0.0;
      try {
        std::size_t used = 0;
        value = std::stod(piece.substr(0, star), &used);
        if (used != star) fail("bad coefficient in '" + piece + "'");
      } catch (const std::logic_error&) {
        fail("bad coefficient in '" + piece + "'");
      }
      const std::string display = piece.substr(star + 1);
      const auto j = by_display.find(display);
      if (j == by_display.end()) fail("unknown term '" + display + "'");
      c.values(j->second, i) += sg * value;
      c.mask(j->second, i) = true;
    }
  }
  return c;
}

}  // namespace pisml::distill
