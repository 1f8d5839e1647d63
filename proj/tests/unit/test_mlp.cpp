#include <doctest.h>

#include <nlohmann/json.hpp>

#include "pisml/common.hpp"
#include "pisml/mlp.hpp"

using namespace pisml;
using namespace pisml::nn;

namespace {

Mlp random_net(const std::vector<int>& sizes, std::uint64_t seed, bool layer_norm = false) {
  Rng rng = make_rng(seed, "test");
  Mlp m = make_mlp(sizes, rng, false, layer_norm);
  if (layer_norm) {
    for (std::size_t l = 0; l < m.gain.size(); ++l) {
      for (auto& g : m.gain[l]) g = uniform(rng, 0.5, 1.5);
      for (auto& v : m.bias[l]) v = uniform(rng, -0.2, 0.2);
    }
  }
  return m;
}

Eigen::MatrixXd random_matrix(Rng& rng, int r, int c) {
  Eigen::MatrixXd M(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) M(i, j) = normal(rng);
  }
  return M;
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-12, b.cwiseAbs().maxCoeff());
}

// central-difference gradient of a scalar function of the flat parameters
template <class F>
Eigen::VectorXd fd_flat(const Mlp& m, F&& loss, double h = 1e-6) {
  Eigen::VectorXd theta = flatten(m);
  Eigen::VectorXd g(theta.size());
  Mlp tmp = m;
  for (int k = 0; k < theta.size(); ++k) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    unflatten(tmp, tp);
    const double fp = loss(tmp);
    unflatten(tmp, tm);
    const double fm = loss(tmp);
    g[k] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("parameter counts") {
  Rng rng = make_rng(0, "init");
  CHECK(make_mlp({14, 128, 128, 13}, rng).parameter_count() == 20109);
  CHECK(make_mlp({14, 128, 128, 13}, rng, true, true).parameter_count() == 20109 + 512);
  CHECK(make_mlp({3, 4, 2}, rng).parameter_count() == 3 * 4 + 4 + 4 * 2 + 2);
}

TEST_CASE("zeroed output layer gives a zero network") {
  Rng rng = make_rng(0, "init");
  const Mlp m = make_mlp({5, 8, 3}, rng, true);
  CHECK(m.forward(Eigen::VectorXd::Random(5)).isZero());
  CHECK(m.input_jacobian(Eigen::VectorXd::Random(5)).isZero());
}

TEST_CASE("input jacobian matches central differences") {
  for (bool ln : {false, true}) {
    const Mlp m = random_net({6, 9, 7, 4}, 3, ln);
    Rng rng = make_rng(1, "pts");
    for (int trial = 0; trial < 10; ++trial) {
      const Eigen::VectorXd z = random_matrix(rng, 6, 1);
      const Eigen::MatrixXd J = m.input_jacobian(z);
      for (int j = 0; j < 6; ++j) {
        Eigen::VectorXd zp = z, zm = z;
        zp[j] += 1e-6;
        zm[j] -= 1e-6;
        const Eigen::VectorXd fd = (m.forward(zp) - m.forward(zm)) / 2e-6;
        CHECK(rel_err(J.col(j), fd) <= 1e-6);
      }
    }
  }
}

TEST_CASE("batch forward agrees with the single-point path") {
  const Mlp m = random_net({4, 6, 3}, 5, true);
  Rng rng = make_rng(2, "pts");
  const Eigen::MatrixXd Z = random_matrix(rng, 4, 7);
  const Eigen::MatrixXd Y = forward_batch(m, Z);
  for (int b = 0; b < 7; ++b) CHECK(rel_err(Y.col(b), m.forward(Z.col(b))) <= 1e-14);
}

TEST_CASE("backward pass matches central differences with dropout masks") {
  for (bool ln : {false, true}) {
    const Mlp m = random_net({5, 8, 6, 3}, 7, ln);
    Rng rng = make_rng(4, "pts");
    const Eigen::MatrixXd Z = random_matrix(rng, 5, 4), G = random_matrix(rng, 3, 4);
    std::vector<Eigen::MatrixXd> masks = {Eigen::MatrixXd::Ones(8, 4), Eigen::MatrixXd::Ones(6, 4)};
    masks[0](2, 1) = 0.0;
    masks[1](4, 3) = 0.0;
    masks[1](0, 0) = 1.0 / 0.95;
    BatchCache cache;
    forward_batch(m, Z, &cache, &masks);
    Mlp grad = zeros_like(m);
    Eigen::MatrixXd G_in;
    backward_batch(m, cache, G, grad, &G_in, &masks);
    auto loss = [&](const Mlp& n) { return (G.cwiseProduct(forward_batch(n, Z, nullptr, &masks))).sum(); };
    CHECK(rel_err(flatten(grad), fd_flat(m, loss)) <= 1e-6);
    for (int j = 0; j < 5; ++j) {
      Eigen::MatrixXd Zp = Z, Zm = Z;
      Zp.row(j).array() += 1e-6;
      Zm.row(j).array() -= 1e-6;
      const double fd = ((G.cwiseProduct(forward_batch(m, Zp, nullptr, &masks))).sum() -
                         (G.cwiseProduct(forward_batch(m, Zm, nullptr, &masks))).sum()) / 2e-6;
      CHECK(G_in.row(j).sum() == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("jvp and its parameter gradient") {
  const Mlp m = random_net({5, 7, 6, 4}, 9);
  Rng rng = make_rng(6, "pts");
  const Eigen::MatrixXd Z = random_matrix(rng, 5, 3), T = random_matrix(rng, 5, 3), G = random_matrix(rng, 4, 3);
  const Eigen::MatrixXd JT = jvp_batch(m, Z, T);
  for (int b = 0; b < 3; ++b) CHECK(rel_err(JT.col(b), m.input_jacobian(Z.col(b)) * T.col(b)) <= 1e-12);
  Mlp grad = zeros_like(m);
  jvp_backward(m, Z, T, G, grad);
  auto loss = [&](const Mlp& n) { return G.cwiseProduct(jvp_batch(n, Z, T)).sum(); };
  CHECK(rel_err(flatten(grad), fd_flat(m, loss)) <= 1e-6);

  const Mlp ln = random_net({5, 7, 4}, 9, true);
  Mlp g2 = zeros_like(ln);
  CHECK_THROWS_AS(jvp_backward(ln, Z, T, G.topRows(4), g2), ValidationError);
}

TEST_CASE("flatten, unflatten and json are lossless") {
  const Mlp m = random_net({4, 5, 3}, 11, true);
  Mlp n = zeros_like(m);
  unflatten(n, flatten(m));
  CHECK(flatten(n) == flatten(m));
  const Mlp back = nlohmann::json(m).get<Mlp>();
  CHECK(flatten(back) == flatten(m));
  CHECK(back.norm == m.norm);
  const Eigen::VectorXd z = Eigen::VectorXd::LinSpaced(4, -1.0, 1.0);
  CHECK(back.forward(z) == m.forward(z));
  CHECK_THROWS_AS(unflatten(n, Eigen::VectorXd::Zero(3)), ValidationError);
}
