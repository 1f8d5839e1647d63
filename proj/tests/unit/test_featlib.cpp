#include <doctest.h>

#include <algorithm>
#include <nlohmann/json.hpp>
#include <random>
#include <set>

#include "pisml/common.hpp"
#include "pisml/featlib.hpp"
#include "pisml/state.hpp"

using namespace pisml;
using namespace pisml::feat;

namespace {

Eigen::MatrixXd fd_gradient(const FunctionLibrary& lib, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& u, double h = 1e-6) {
  Eigen::MatrixXd G(lib.size(), x.size());
  for (int j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    G.col(j) = (lib.evaluate(xp, u) - lib.evaluate(xm, u)) / (2 * h);
  }
  return G;
}

Eigen::VectorXd random_vec(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Eigen::VectorXd v(n);
  for (auto& e : v) e = d(rng);
  return v;
}

// brute-force count of the distinct monomials of degree <= 2 in k variables
int count_monomials(int k) {
  std::set<std::pair<int, int>> seen;
  for (int a = -1; a < k; ++a) {
    for (int b = -1; b < k; ++b) seen.insert({std::min(a, b), std::max(a, b)});
  }
  return static_cast<int>(seen.size());
}

}  // namespace

TEST_CASE("library sizes") {
  CHECK(build_polynomial_library(13, 1, 2).size() == 120);
  CHECK(build_polynomial_library(1, 0, 2).size() == 3);
  CHECK(build_polynomial_library(2, 1, 2).size() == 10);
  CHECK(build_polynomial_library(2, 1, 2).size() == count_monomials(3));
  CHECK(build_polynomial_library(4, 2, 2).size() == count_monomials(6));
  CHECK(build_polynomial_library(3, 1, 1).size() == 5);
  CHECK(build_physics_library().size() == 17);
  CHECK(build_extended_library().size() == 45);
  CHECK_THROWS_AS(build_polynomial_library(3, 1, 3), ValidationError);
}

TEST_CASE("one-variable polynomial terms are 1, x0, x0^2") {
  const auto lib = build_polynomial_library(1, 0, 2);
  Eigen::VectorXd x(1);
  x << 3.0;
  const Eigen::VectorXd row = lib.evaluate(x, Eigen::VectorXd(0));
  CHECK(row[0] == 1.0);
  CHECK(row[1] == 3.0);
  CHECK(row[2] == 9.0);
}

TEST_CASE("power and trigonometric columns") {
  const auto lib = build_extended_library(13, 0.5, 0.0);
  auto col = [&](const std::string& name) {
    for (int k = 0; k < lib.size(); ++k) {
      if (lib.term(k).display == name) return k;
    }
    FAIL("missing term " << name);
    return -1;
  };
  Eigen::VectorXd x = Eigen::VectorXd::Zero(13), u = Eigen::VectorXd::Ones(1);
  x[kVcd] = 1.0;
  x[kIod] = 1.0;
  Eigen::VectorXd row = lib.evaluate(x, u);
  CHECK(row[col("(v_cd*i_od + v_cq*i_oq)")] == 1.0);
  CHECK(row[col("(v_cq*i_od - v_cd*i_oq)")] == 0.0);
  CHECK(row[col("u*cos(delta)")] == 1.0);
  CHECK(row[col("u*sin(delta)")] == 0.0);

  x.setZero();
  x[kVcq] = 1.0;
  x[kIod] = 1.0;
  row = lib.evaluate(x, u);
  CHECK(row[col("(v_cq*i_od - v_cd*i_oq)")] == 1.0);

  // at P_inv = P_0 every x_k*dP column vanishes
  x.setRandom();
  x[kPinv] = 0.5;
  row = lib.evaluate(x, u);
  for (int k = 0; k < lib.size(); ++k) {
    if (lib.term(k).kind == TermKind::bilinear_P) CHECK(row[k] == 0.0);
  }
}

TEST_CASE("zero input gives only the constant column") {
  for (const auto& lib : {build_polynomial_library(13, 1, 2), build_physics_library(),
                          build_extended_library()}) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4, 13), U = Eigen::MatrixXd::Zero(4, 1);
    const Eigen::MatrixXd T = lib.evaluate(X, U);
    CHECK(T.col(0).isOnes());
    CHECK(T.rightCols(lib.size() - 1).isZero());
  }
}

TEST_CASE("hand-computed row on a fixed point") {
  const auto lib = build_physics_library();
  Eigen::VectorXd x(13), u(1);
  x << 0.1, 0.5, -0.05, 0.2, 0.03, 0.25, 0.001, 0.5, 0.1, 1.0, -0.002, 0.49, 0.047;
  u << 0.9;
  const Eigen::VectorXd row = lib.evaluate(x, u);
  CHECK(row[0] == 1.0);
  for (int i = 0; i < 13; ++i) CHECK(row[1 + i] == x[i]);
  CHECK(row[14] == 0.9);
  CHECK(row[15] == doctest::Approx(1.0 * 0.49 + (-0.002) * 0.047).epsilon(1e-15));
  CHECK(row[16] == doctest::Approx(-0.002 * 0.49 - 1.0 * 0.047).epsilon(1e-15));
}

TEST_CASE("evaluation is row-local") {
  std::mt19937_64 rng(3);
  const auto lib = build_extended_library(13, 0.5, 0.1);
  Eigen::MatrixXd X(20, 13), U(20, 1);
  for (int k = 0; k < 20; ++k) {
    X.row(k) = random_vec(rng, 13).transpose();
    U(k, 0) = 1.0 + 0.2 * random_vec(rng, 1)[0];
  }
  const Eigen::MatrixXd T = lib.evaluate(X, U);
  std::vector<int> perm(20);
  for (int k = 0; k < 20; ++k) perm[k] = k;
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd Xp(20, 13), Up(20, 1);
  for (int k = 0; k < 20; ++k) {
    Xp.row(k) = X.row(perm[k]);
    Up.row(k) = U.row(perm[k]);
  }
  const Eigen::MatrixXd Tp = lib.evaluate(Xp, Up);
  for (int k = 0; k < 20; ++k) {
    CHECK(Tp.row(k) == T.row(perm[k]));
    CHECK(lib.evaluate(Eigen::VectorXd(X.row(k).transpose()), Eigen::VectorXd(U.row(k).transpose())).transpose() ==
          T.row(k));
  }
}

TEST_CASE("analytic gradients match central differences at 100 random points") {
  std::mt19937_64 rng(11);
  for (const auto& lib : {build_polynomial_library(13, 1, 2), build_physics_library(),
                          build_extended_library(13, 0.5, 0.05)}) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Eigen::VectorXd x = random_vec(rng, 13);
      Eigen::VectorXd u(1);
      u << 1.0 + 0.3 * random_vec(rng, 1)[0];
      const Eigen::MatrixXd G = lib.gradient(x, u);
      const Eigen::MatrixXd F = fd_gradient(lib, x, u);
      worst = std::max(worst, (G - F).cwiseAbs().maxCoeff() / std::max(1.0, F.cwiseAbs().maxCoeff()));
    }
    CHECK(worst <= 1e-6);
  }
  const auto lib = build_physics_library();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(13), u = Eigen::VectorXd::Ones(1);
  x[kVcd] = 0.7;
  x[kIod] = 0.3;
  const Eigen::MatrixXd G = lib.gradient(x, u);
  CHECK(G.row(0).isZero());
  CHECK(G(15, kVcd) == 0.3);
  CHECK(G(15, kIod) == 0.7);
}

TEST_CASE("input gradient matches central differences") {
  std::mt19937_64 rng(5);
  const auto lib = build_extended_library(13, 0.5, 0.0);
  const Eigen::VectorXd x = random_vec(rng, 13);
  Eigen::VectorXd u(1), up(1), um(1);
  u << 0.9;
  up << 0.9 + 1e-6;
  um << 0.9 - 1e-6;
  const Eigen::VectorXd fd = (lib.evaluate(x, up) - lib.evaluate(x, um)) / 2e-6;
  CHECK((lib.input_gradient(x, u).col(0) - fd).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("descriptor list survives json and rejects duplicates") {
  const auto lib = build_extended_library(13, 0.5, 0.1);
  const FunctionLibrary back = nlohmann::json(lib).get<FunctionLibrary>();
  CHECK(back == lib);
  CHECK(back.hash() == lib.hash());
  CHECK(build_extended_library(13, 0.5, 0.1).hash() == lib.hash());
  CHECK(build_extended_library(13, 0.4, 0.1).hash() != lib.hash());

  auto terms = lib.terms();
  terms.push_back(terms[3]);
  CHECK_THROWS_AS(FunctionLibrary(13, 1, terms), ValidationError);
  std::vector<TermDescriptor> bad = {{TermKind::state, 0, -1, "x0"}, {TermKind::constant, -1, -1, "1"}};
  CHECK_THROWS_AS(FunctionLibrary(13, 1, bad), ValidationError);
  std::vector<TermDescriptor> out_of_range = {{TermKind::state, 13, -1, "x13"}};
  CHECK_THROWS_AS(FunctionLibrary(13, 1, out_of_range), ValidationError);
}

TEST_CASE("evaluate rejects mismatched dimensions") {
  const auto lib = build_physics_library();
  CHECK_THROWS_AS(lib.evaluate(Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 12)), Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 1))), ValidationError);
  CHECK_THROWS_AS(lib.evaluate(Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 13)), Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 1))), ValidationError);
}
