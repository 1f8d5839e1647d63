#include "pisml/featlib.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

#include "pisml/common.hpp"
#include "pisml/state.hpp"

namespace pisml::feat {

namespace {

constexpr int kGfmStates = 13;

std::string var_name(int v, int n_states, int n_inputs) {
  if (v < n_states) return state_name(v, n_states);
  if (n_inputs == 1) return std::string(kInputName);
  return "u" + std::to_string(v - n_states);
}

bool needs_gfm_layout(TermKind k) {
  return k == TermKind::power_P || k == TermKind::power_Q || k == TermKind::trig_cos ||
         k == TermKind::trig_sin || k == TermKind::bilinear_P || k == TermKind::bilinear_Q;
}

TermDescriptor make(TermKind kind, int i, int j, std::string display) {
  return TermDescriptor{kind, i, j, std::move(display)};
}

void append_physics_terms(std::vector<TermDescriptor>& terms, int n) {
  terms.push_back(make(TermKind::constant, -1, -1, "1"));
  for (int i = 0; i < n; ++i) terms.push_back(make(TermKind::state, i, -1, state_name(i, n)));
  terms.push_back(make(TermKind::input, 0, -1, std::string(kInputName)));
  terms.push_back(make(TermKind::power_P, -1, -1, "(v_cd*i_od + v_cq*i_oq)"));
  terms.push_back(make(TermKind::power_Q, -1, -1, "(v_cq*i_od - v_cd*i_oq)"));
}

}  // namespace

FunctionLibrary::FunctionLibrary(int n_states, int n_inputs, std::vector<TermDescriptor> terms,
                                 double P_0, double Q_0)
    : n_states_(n_states), n_inputs_(n_inputs), P_0_(P_0), Q_0_(Q_0), terms_(std::move(terms)) {
  if (n_states < 1 || n_inputs < 0) throw ValidationError("library: bad dimensions");
  const int nz = n_states + n_inputs;
  std::set<std::string> seen;
  for (std::size_t k = 0; k < terms_.size(); ++k) {
    const auto& t = terms_[k];
    bool ok = true;
    switch (t.kind) {
      case TermKind::constant: ok = (k == 0); break;
      case TermKind::state: ok = t.i >= 0 && t.i < n_states; break;
      case TermKind::input: ok = t.i >= 0 && t.i < n_inputs; break;
      case TermKind::poly2: ok = t.i >= 0 && t.j >= t.i && t.j < nz; break;
      case TermKind::bilinear_P:
      case TermKind::bilinear_Q: ok = t.i >= 0 && t.i < n_states; break;
      default: break;
    }
    if (needs_gfm_layout(t.kind) && (n_states != kGfmStates || n_inputs < 1)) ok = false;
    if (!ok) throw ValidationError("library: invalid term '" + t.display + "'");
    if (!seen.insert(t.display).second) {
      throw ValidationError("library: duplicate term '" + t.display + "'");
    }
  }
}

int FunctionLibrary::find(const TermDescriptor& t) const {
  for (int k = 0; k < size(); ++k) {
    if (terms_[k].kind == t.kind && terms_[k].i == t.i && terms_[k].j == t.j) return k;
  }
  return -1;
}

std::string FunctionLibrary::hash() const {
  nlohmann::json j = *this;
  return hex64(fnv1a64(j.dump()));
}

void FunctionLibrary::check_point(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
  if (x.size() != n_states_ || u.size() != n_inputs_) {
    throw ValidationError("library: point has dimension (" + std::to_string(x.size()) + ", " +
                          std::to_string(u.size()) + "), expected (" +
                          std::to_string(n_states_) + ", " + std::to_string(n_inputs_) + ")");
  }
}

Eigen::VectorXd FunctionLibrary::evaluate(const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& u) const {
  check_point(x, u);
  auto z = [&](int v) { return v < n_states_ ? x[v] : u[v - n_states_]; };
  Eigen::VectorXd row(size());
  for (int k = 0; k < size(); ++k) {
    const auto& t = terms_[k];
    double val = 0.0;
    switch (t.kind) {
      case TermKind::constant: val = 1.0; break;
      case TermKind::state: val = x[t.i]; break;
      case TermKind::input: val = u[t.i]; break;
      case TermKind::poly2: val = z(t.i) * z(t.j); break;
      case TermKind::power_P: val = x[kVcd] * x[kIod] + x[kVcq] * x[kIoq]; break;
      case TermKind::power_Q: val = x[kVcq] * x[kIod] - x[kVcd] * x[kIoq]; break;
      case TermKind::trig_cos: val = u[0] * std::cos(x[kDelta]); break;
      case TermKind::trig_sin: val = u[0] * std::sin(x[kDelta]); break;
      case TermKind::bilinear_P: val = x[t.i] * (x[kPinv] - P_0_); break;
      case TermKind::bilinear_Q: val = x[t.i] * (x[kQinv] - Q_0_); break;
    }
    row[k] = val;
  }
  return row;
}

Eigen::MatrixXd FunctionLibrary::evaluate(const Eigen::MatrixXd& X,
                                          const Eigen::MatrixXd& U) const {
  if (X.cols() != n_states_ || U.cols() != n_inputs_ || X.rows() != U.rows()) {
    throw ValidationError("library: evaluate got X " + std::to_string(X.rows()) + "x" +
                          std::to_string(X.cols()) + ", U " + std::to_string(U.rows()) + "x" +
                          std::to_string(U.cols()));
  }
  Eigen::MatrixXd out(X.rows(), size());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    out.row(r) = evaluate(Eigen::VectorXd(X.row(r).transpose()),
                          Eigen::VectorXd(U.row(r).transpose()))
                     .transpose();
  }
  return out;
}

Eigen::MatrixXd FunctionLibrary::gradient(const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& u) const {
  check_point(x, u);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(size(), n_states_);
  auto z = [&](int v) { return v < n_states_ ? x[v] : u[v - n_states_]; };
  for (int k = 0; k < size(); ++k) {
    const auto& t = terms_[k];
    switch (t.kind) {
      case TermKind::constant:
      case TermKind::input: break;
      case TermKind::state: G(k, t.i) = 1.0; break;
      case TermKind::poly2:
        if (t.i < n_states_) G(k, t.i) += z(t.j);
        if (t.j < n_states_) G(k, t.j) += z(t.i);
        break;
      case TermKind::power_P:
        G(k, kVcd) = x[kIod];
        G(k, kIod) = x[kVcd];
        G(k, kVcq) = x[kIoq];
        G(k, kIoq) = x[kVcq];
        break;
      case TermKind::power_Q:
        G(k, kVcq) = x[kIod];
        G(k, kIod) = x[kVcq];
        G(k, kVcd) = -x[kIoq];
        G(k, kIoq) = -x[kVcd];
        break;
      case TermKind::trig_cos: G(k, kDelta) = -u[0] * std::sin(x[kDelta]); break;
      case TermKind::trig_sin: G(k, kDelta) = u[0] * std::cos(x[kDelta]); break;
      case TermKind::bilinear_P:
        G(k, t.i) += x[kPinv] - P_0_;
        G(k, kPinv) += x[t.i];
        break;
      case TermKind::bilinear_Q:
        G(k, t.i) += x[kQinv] - Q_0_;
        G(k, kQinv) += x[t.i];
        break;
    }
  }
  return G;
}

Eigen::MatrixXd FunctionLibrary::input_gradient(const Eigen::VectorXd& x,
                                                const Eigen::VectorXd& u) const {
  check_point(x, u);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(size(), n_inputs_);
  auto z = [&](int v) { return v < n_states_ ? x[v] : u[v - n_states_]; };
  for (int k = 0; k < size(); ++k) {
    const auto& t = terms_[k];
    switch (t.kind) {
      case TermKind::input: G(k, t.i) = 1.0; break;
      case TermKind::poly2:
        if (t.i >= n_states_) G(k, t.i - n_states_) += z(t.j);
        if (t.j >= n_states_) G(k, t.j - n_states_) += z(t.i);
        break;
      case TermKind::trig_cos: G(k, 0) = std::cos(x[kDelta]); break;
      case TermKind::trig_sin: G(k, 0) = std::sin(x[kDelta]); break;
      default: break;
    }
  }
  return G;
}

FunctionLibrary build_polynomial_library(int n_states, int n_inputs, int degree) {
  if (degree != 1 && degree != 2) throw ValidationError("polynomial library: degree must be 1 or 2");
  if (n_states < 1 || n_inputs < 0) throw ValidationError("polynomial library: bad dimensions");
  std::vector<TermDescriptor> terms;
  terms.push_back(make(TermKind::constant, -1, -1, "1"));
  for (int i = 0; i < n_states; ++i) {
    terms.push_back(make(TermKind::state, i, -1, var_name(i, n_states, n_inputs)));
  }
  for (int i = 0; i < n_inputs; ++i) {
    terms.push_back(make(TermKind::input, i, -1, var_name(n_states + i, n_states, n_inputs)));
  }
  if (degree == 2) {
    const int nz = n_states + n_inputs;
    for (int i = 0; i < nz; ++i) {
      for (int j = i; j < nz; ++j) {
        const std::string a = var_name(i, n_states, n_inputs);
        const std::string b = var_name(j, n_states, n_inputs);
        terms.push_back(make(TermKind::poly2, i, j, i == j ? a + "^2" : a + "*" + b));
      }
    }
  }
  return FunctionLibrary(n_states, n_inputs, std::move(terms));
}

FunctionLibrary build_physics_library(int n_states) {
  if (n_states != kGfmStates) throw ValidationError("physics library needs the 13-state layout");
  std::vector<TermDescriptor> terms;
  append_physics_terms(terms, n_states);
  return FunctionLibrary(n_states, 1, std::move(terms));
}

FunctionLibrary build_extended_library(int n_states, double P_0, double Q_0) {
  if (n_states != kGfmStates) throw ValidationError("extended library needs the 13-state layout");
  std::vector<TermDescriptor> terms;
  append_physics_terms(terms, n_states);
  terms.push_back(make(TermKind::trig_cos, -1, -1, "u*cos(delta)"));
  terms.push_back(make(TermKind::trig_sin, -1, -1, "u*sin(delta)"));
  for (int i = 0; i < n_states; ++i) {
    terms.push_back(make(TermKind::bilinear_P, i, -1, state_name(i, n_states) + "*dP"));
  }
  for (int i = 0; i < n_states; ++i) {
    terms.push_back(make(TermKind::bilinear_Q, i, -1, state_name(i, n_states) + "*dQ"));
  }
  return FunctionLibrary(n_states, 1, std::move(terms), P_0, Q_0);
}

namespace {
const std::vector<std::pair<TermKind, std::string>>& kind_names() {
  static const std::vector<std::pair<TermKind, std::string>> names = {
      {TermKind::constant, "constant"},     {TermKind::state, "state"},
      {TermKind::input, "input"},           {TermKind::poly2, "poly2"},
      {TermKind::power_P, "power_P"},       {TermKind::power_Q, "power_Q"},
      {TermKind::trig_cos, "trig_cos"},     {TermKind::trig_sin, "trig_sin"},
      {TermKind::bilinear_P, "bilinear_P"}, {TermKind::bilinear_Q, "bilinear_Q"}};
  return names;
}
}  // namespace

std::string to_string(TermKind k) {
  for (const auto& [kind, name] : kind_names()) {
    if (kind == k) return name;
  }
  return "unknown";
}

TermKind term_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kind_names()) {
    if (name == s) return kind;
  }
  throw ValidationError("unknown term kind '" + s + "'");
}

void to_json(nlohmann::json& j, const TermDescriptor& t) {
  nlohmann::json idx = nlohmann::json::array();
  if (t.i >= 0) idx.push_back(t.i);
  if (t.j >= 0) idx.push_back(t.j);
  j = {{"kind", to_string(t.kind)}, {"indices", idx}, {"display", t.display}};
}

void from_json(const nlohmann::json& j, TermDescriptor& t) {
  t.kind = term_kind_from_string(j.at("kind").get<std::string>());
  const auto& idx = j.at("indices");
  if (idx.size() > 2) throw ValidationError("term descriptor: too many indices");
  t.i = idx.size() > 0 ? idx[0].get<int>() : -1;
  t.j = idx.size() > 1 ? idx[1].get<int>() : -1;
  t.display = j.at("display").get<std::string>();
}

void to_json(nlohmann::json& j, const FunctionLibrary& lib) {
  j = {{"n_states", lib.n_states()},
       {"n_inputs", lib.n_inputs()},
       {"P_0", lib.P_0()},
       {"Q_0", lib.Q_0()},
       {"terms", lib.terms()}};
}

void from_json(const nlohmann::json& j, FunctionLibrary& lib) {
  lib = FunctionLibrary(j.at("n_states").get<int>(), j.at("n_inputs").get<int>(),
                        j.at("terms").get<std::vector<TermDescriptor>>(),
                        j.value("P_0", 0.0), j.value("Q_0", 0.0));
}

}  // namespace pisml::feat
