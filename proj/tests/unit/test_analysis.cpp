#include <doctest.h>

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "pisml/analysis.hpp"
#include "pisml/rng.hpp"

using namespace pisml;
using namespace pisml::analysis;

namespace {

Eigen::MatrixXd random_matrix(int n, Rng& rng) {
  Eigen::MatrixXd A(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) A(i, j) = normal(rng);
  }
  return A;
}

std::vector<Complex> random_points(int n, Rng& rng) {
  std::vector<Complex> p(n);
  for (auto& z : p) z = Complex(normal(rng), normal(rng));
  return p;
}

// roots of the characteristic polynomial (Faddeev-LeVerrier coefficients,
// Durand-Kerner iteration)
std::vector<Complex> charpoly_roots(const Eigen::MatrixXd& A) {
  const int n = static_cast<int>(A.rows());
  std::vector<double> c(n + 1);
  c[n] = 1.0;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k <= n; ++k) {
    M = A * M + c[n - k + 1] * Eigen::MatrixXd::Identity(n, n);
    c[n - k] = -(A * M).trace() / k;
  }
  std::vector<Complex> z(n);
  for (int i = 0; i < n; ++i) z[i] = std::pow(Complex(0.4, 0.9), i);
  for (int it = 0; it < 2000; ++it) {
    for (int i = 0; i < n; ++i) {
      Complex p = 1.0;
      for (int k = n - 1; k >= 0; --k) p = p * z[i] + c[k];
      Complex q = 1.0;
      for (int j = 0; j < n; ++j) {
        if (j != i) q *= z[i] - z[j];
      }
      z[i] -= p / q;
    }
  }
  return z;
}

Trajectory ramp(int K, int n) {
  Trajectory t;
  t.states.resize(K, n);
  for (int k = 0; k < K; ++k) {
    t.times.push_back(k * 1e-4);
    t.inputs.push_back(1.0);
    for (int c = 0; c < n; ++c) t.states(k, c) = std::sin(0.01 * k * (c + 1)) + 0.1 * c + 0.05;
  }
  return t;
}

}  // namespace

TEST_CASE("numerical jacobian of a linear field returns the matrix") {
  Rng rng = make_rng(1, "lin");
  const Eigen::MatrixXd A = random_matrix(13, rng);
  const Field f = [&](const Eigen::VectorXd& x, double) { return Eigen::VectorXd(A * x); };
  const Eigen::MatrixXd J = numerical_jacobian(f, Eigen::VectorXd::Random(13), 1.0);
  CHECK((J - A).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("eigenvalues of simple matrices") {
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(13, 13);
  for (int i = 0; i < 13; ++i) D(i, i) = -(i + 1.0);
  const auto ev = eigenvalues(D);
  for (int i = 0; i < 13; ++i) {
    CHECK(ev[i].real() == -(i + 1.0));
    CHECK(ev[i].imag() == 0.0);
  }
  Eigen::Matrix2d R;
  R << 0.0, 3.0, -3.0, 0.0;
  const auto er = eigenvalues(R);
  CHECK(std::abs(er[0] - Complex(0.0, 3.0)) <= 1e-12);
  CHECK(std::abs(er[1] - Complex(0.0, -3.0)) <= 1e-12);
}

TEST_CASE("eigenvalues satisfy trace, determinant and conjugate symmetry") {
  Rng rng = make_rng(2, "eig");
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd B = random_matrix(13, rng);
    for (const Eigen::MatrixXd& A : {Eigen::MatrixXd(B + B.transpose()), B}) {
      const auto ev = eigenvalues(A);
      Complex sum = 0.0, prod = 1.0;
      for (const auto& l : ev) {
        sum += l;
        prod *= l;
      }
      CHECK(std::abs(sum.real() - A.trace()) <= 1e-8 * std::max(1.0, std::abs(A.trace())) + 1e-8 * A.norm());
      const double det = A.determinant();
      CHECK(std::abs(prod.real() - det) <= 1e-8 * std::max(1.0, std::abs(det)));
      // every complex eigenvalue has its conjugate in the list
      for (const auto& l : ev) {
        const bool paired = std::any_of(ev.begin(), ev.end(),
                                        [&](const Complex& m) { return std::abs(m - std::conj(l)) <= 1e-9; });
        CHECK(paired);
      }
      for (std::size_t k = 1; k < ev.size(); ++k) CHECK(ev[k - 1].real() >= ev[k].real());
    }
  }
}

TEST_CASE("4x4 eigenvalues agree with characteristic polynomial roots") {
  Rng rng = make_rng(3, "cp");
  const Eigen::MatrixXd A = random_matrix(4, rng);
  auto ev = eigenvalues(A);
  auto roots = charpoly_roots(A);
  for (const auto& l : ev) {
    double best = 1e300;
    for (const auto& r : roots) best = std::min(best, std::abs(l - r));
    CHECK(best <= 1e-8);
  }
}

TEST_CASE("hungarian assignment matches brute force") {
  Rng rng = make_rng(4, "hung");
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd C(6, 6);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) C(i, j) = uniform(rng);
    }
    const auto col = hungarian(C);
    double got = 0.0;
    for (int i = 0; i < 6; ++i) got += C(i, col[i]);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double s = 0.0;
      for (int i = 0; i < 6; ++i) s += C(i, perm[i]);
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(got == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("wasserstein distance basic identities") {
  Rng rng = make_rng(5, "w");
  const auto a = random_points(13, rng);
  CHECK(wasserstein_distance(a, a) == 0.0);
  auto b = a;
  for (auto& z : b) z += 0.75;
  CHECK(wasserstein_distance(a, b) == doctest::Approx(0.75).epsilon(1e-12));
  auto shuffled = a;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(wasserstein_distance(a, shuffled) == doctest::Approx(0.0));
  CHECK_THROWS_AS(wasserstein_distance(a, std::vector<Complex>(a.begin(), a.end() - 1)), ValidationError);
}

TEST_CASE("wasserstein distance is a metric on random sets") {
  Rng rng = make_rng(6, "metric");
  for (int t = 0; t < 50; ++t) {
    const auto a = random_points(7, rng), b = random_points(7, rng), c = random_points(7, rng);
    const double ab = wasserstein_distance(a, b), ba = wasserstein_distance(b, a);
    CHECK(ab == ba);
    CHECK(wasserstein_distance(a, c) <= ab + wasserstein_distance(b, c) + 1e-12);
  }
}

TEST_CASE("relative l2 definitions") {
  const Trajectory truth = ramp(401, 13);
  const auto w = ood_window();
  CHECK(relative_l2(truth, truth, w).mean == 0.0);
  Trajectory scaled = truth;
  scaled.states *= 1.01;
  const auto r = relative_l2(scaled, truth, w);
  for (double v : r.per_channel) CHECK(v == doctest::Approx(1.0).epsilon(1e-10));

  // scale covariance
  Trajectory pred = truth;
  for (int k = 0; k < pred.size(); ++k) pred.states(k, kIod) += 0.01 * std::cos(0.03 * k);
  Trajectory pred2 = pred, truth2 = truth;
  pred2.states *= -3.0;
  truth2.states *= -3.0;
  CHECK(relative_l2(pred2, truth2, w).mean == doctest::Approx(relative_l2(pred, truth, w).mean).epsilon(1e-12));

  // second route: extract the window block first, then take norms
  const auto e = relative_l2(pred, truth, iod_window());
  std::vector<int> rows;
  for (int k = 0; k < truth.size(); ++k) {
    if (truth.times[k] < 0.02 - 1e-9) rows.push_back(k);
  }
  const auto ch = default_channels();
  double mean = 0.0;
  for (int c : ch) {
    Eigen::VectorXd d(rows.size()), y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      d[i] = pred.states(rows[i], c) - truth.states(rows[i], c);
      y[i] = truth.states(rows[i], c);
    }
    mean += 100.0 * d.norm() / y.norm() / ch.size();
  }
  CHECK(std::abs(e.mean - mean) <= 1e-12);

  Trajectory zero = truth;
  zero.states.col(kVcq).setZero();
  CHECK_THROWS_AS(relative_l2(zero, zero, w), NumericalError);
}

TEST_CASE("windows split the test horizon without overlap") {
  const auto a = iod_window(), b = ood_window();
  int both = 0, none = 0;
  for (int k = 0; k <= 400; ++k) {
    const double t = k * 1e-4;
    both += a.contains(t) && b.contains(t);
    none += !a.contains(t) && !b.contains(t);
  }
  CHECK(both == 0);
  CHECK(none == 0);
}

TEST_CASE("ground-truth spectrum at u = 0.8 is strictly stable") {
  sim::GfmParams p;
  const auto s = truth_spectrum(p, 0.8);
  REQUIRE(s.values.size() == 13);
  CHECK(s.values.front().real() < 0.0);
  // filtered power row: -omega_c on the diagonal
  const Field f = [&p](const Eigen::VectorXd& x, double u) {
    return Eigen::VectorXd(sim::gfm_derivative(StateVector(x), u, p));
  };
  const Eigen::MatrixXd J = numerical_jacobian(f, s.x, 0.8);
  CHECK(J(kPinv, kPinv) == doctest::Approx(-10.0 * kPi).epsilon(1e-6));
}

TEST_CASE("complexity counts network parameters") {
  Rng rng = make_rng(0, "c");
  HybridModel m;
  m.library = feat::build_physics_library(13);
  m.xi = reg::zero_coefficients(m.library.size(), 13, m.library.hash());
  m.xi.mask.setConstant(false);
  m.scaler = reg::identity_scaler(14);
  m.out_scale = Eigen::VectorXd::Ones(13);
  CHECK(complexity(m).parameter_count == 0);
  CHECK(complexity(m).active_coefficients == 0);
  m.mlp = nn::make_mlp({14, 128, 128, 13}, rng);
  // 14*128 + 128 + 128*128 + 128 + 128*13 + 13
  CHECK(complexity(m).parameter_count == 20109);
  m.mlp = nn::make_mlp({14, 128, 128, 13}, rng, true, true);
  CHECK(complexity(m).parameter_count == 20109 + 4 * 128);
}
