#include "pisml/mlp.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "pisml/common.hpp"

namespace pisml::nn {

namespace {

constexpr double kNormEps = 1e-5;

Eigen::MatrixXd activate(const Eigen::MatrixXd& y, Activation a) {
  return a == Activation::tanh ? Eigen::MatrixXd(y.array().tanh()) : y;
}

// d act / d y expressed through the activation output
Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& act, Activation a) {
  return a == Activation::tanh ? Eigen::MatrixXd(1.0 - act.array().square())
                               : Eigen::MatrixXd::Ones(act.rows(), act.cols());
}

}  // namespace

bool Mlp::has_norm() const {
  for (bool f : norm) {
    if (f) return true;
  }
  return false;
}

int Mlp::parameter_count() const {
  int count = 0;
  for (int l = 0; l < n_layers(); ++l) count += static_cast<int>(W[l].size() + b[l].size());
  for (std::size_t l = 0; l < norm.size(); ++l) {
    if (norm[l]) count += static_cast<int>(gain[l].size() + bias[l].size());
  }
  return count;
}

void Mlp::validate() const {
  if (sizes.size() < 2) throw ValidationError("mlp: need at least input and output sizes");
  const int L = static_cast<int>(sizes.size()) - 1;
  if (static_cast<int>(W.size()) != L || static_cast<int>(b.size()) != L ||
      static_cast<int>(norm.size()) != L - 1 || static_cast<int>(gain.size()) != L - 1 ||
      static_cast<int>(bias.size()) != L - 1) {
    throw ValidationError("mlp: layer count mismatch");
  }
  for (int l = 0; l < L; ++l) {
    if (W[l].rows() != sizes[l + 1] || W[l].cols() != sizes[l] || b[l].size() != sizes[l + 1]) {
      throw ValidationError("mlp: shape chain broken at layer " + std::to_string(l));
    }
    if (!W[l].allFinite() || !b[l].allFinite()) {
      throw ValidationError("mlp: non-finite parameters in layer " + std::to_string(l));
    }
  }
  for (int l = 0; l + 1 < L; ++l) {
    if (gain[l].size() != sizes[l + 1] || bias[l].size() != sizes[l + 1]) {
      throw ValidationError("mlp: layer-norm shape mismatch at layer " + std::to_string(l));
    }
  }
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& z) const {
  if (z.size() != n_in()) throw ValidationError("mlp: input has wrong dimension");
  return forward_batch(*this, z);
}

Eigen::MatrixXd Mlp::input_jacobian(const Eigen::VectorXd& z) const {
  if (z.size() != n_in()) throw ValidationError("mlp: input has wrong dimension");
  Eigen::VectorXd h = z;
  Eigen::MatrixXd J = Eigen::MatrixXd::Identity(n_in(), n_in());
  for (int l = 0; l + 1 < n_layers(); ++l) {
    Eigen::VectorXd y = W[l] * h + b[l];
    Eigen::MatrixXd dY = W[l] * J;
    if (norm[l]) {
      const double n = static_cast<double>(y.size());
      const double mu = y.mean();
      const double inv = 1.0 / std::sqrt((y.array() - mu).square().mean() + kNormEps);
      const Eigen::VectorXd nhat = (y.array() - mu) * inv;
      Eigen::MatrixXd D = -Eigen::MatrixXd::Constant(y.size(), y.size(), 1.0 / n) -
                          nhat * nhat.transpose() / n;
      D.diagonal().array() += 1.0;
      dY = gain[l].asDiagonal() * (inv * D) * dY;
      y = gain[l].cwiseProduct(nhat) + bias[l];
    }
    const Eigen::VectorXd a = activate(y, activation);
    J = activation_slope(a, activation).asDiagonal() * dY;
    h = a;
  }
  return W.back() * J;
}

Mlp make_mlp(const std::vector<int>& sizes, Rng& rng, bool zero_last, bool layer_norm) {
  Mlp m;
  m.sizes = sizes;
  const int L = static_cast<int>(sizes.size()) - 1;
  if (L < 1) throw ValidationError("make_mlp: need at least two sizes");
  for (int l = 0; l < L; ++l) {
    if (sizes[l] < 1 || sizes[l + 1] < 1) throw ValidationError("make_mlp: sizes must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    Eigen::MatrixXd W(sizes[l + 1], sizes[l]);
    Eigen::VectorXd b(sizes[l + 1]);
    for (int c = 0; c < W.cols(); ++c) {
      for (int r = 0; r < W.rows(); ++r) W(r, c) = uniform(rng, -bound, bound);
    }
    for (int r = 0; r < b.size(); ++r) b[r] = uniform(rng, -bound, bound);
    if (zero_last && l == L - 1) {
      W.setZero();
      b.setZero();
    }
    m.W.push_back(std::move(W));
    m.b.push_back(std::move(b));
  }
  for (int l = 0; l + 1 < L; ++l) {
    m.norm.push_back(layer_norm);
    m.gain.push_back(Eigen::VectorXd::Ones(sizes[l + 1]));
    m.bias.push_back(Eigen::VectorXd::Zero(sizes[l + 1]));
  }
  return m;
}

Mlp zeros_like(const Mlp& m) {
  Mlp z = m;
  for (auto& w : z.W) w.setZero();
  for (auto& v : z.b) v.setZero();
  for (auto& v : z.gain) v.setZero();
  for (auto& v : z.bias) v.setZero();
  return z;
}

Eigen::VectorXd flatten(const Mlp& m) {
  Eigen::VectorXd v(m.parameter_count());
  Eigen::Index o = 0;
  auto put = [&](const auto& a) {
    v.segment(o, a.size()) = Eigen::Map<const Eigen::VectorXd>(a.data(), a.size());
    o += a.size();
  };
  for (int l = 0; l < m.n_layers(); ++l) {
    put(m.W[l]);
    put(m.b[l]);
    if (l + 1 < m.n_layers() && m.norm[l]) {
      put(m.gain[l]);
      put(m.bias[l]);
    }
  }
  return v;
}

void unflatten(Mlp& m, const Eigen::VectorXd& v) {
  if (v.size() != m.parameter_count()) throw ValidationError("unflatten: size mismatch");
  Eigen::Index o = 0;
  auto get = [&](auto& a) {
    Eigen::Map<Eigen::VectorXd>(a.data(), a.size()) = v.segment(o, a.size());
    o += a.size();
  };
  for (int l = 0; l < m.n_layers(); ++l) {
    get(m.W[l]);
    get(m.b[l]);
    if (l + 1 < m.n_layers() && m.norm[l]) {
      get(m.gain[l]);
      get(m.bias[l]);
    }
  }
}

Eigen::MatrixXd forward_batch(const Mlp& m, const Eigen::MatrixXd& Z, BatchCache* cache,
                              const std::vector<Eigen::MatrixXd>* dropout) {
  if (Z.rows() != m.n_in()) throw ValidationError("mlp: batch input has wrong row count");
  const int L = m.n_layers();
  if (cache) {
    cache->input = Z;
    cache->pre.assign(L - 1, {});
    cache->nhat.assign(L - 1, {});
    cache->inv_std.assign(L - 1, {});
    cache->act.assign(L - 1, {});
    cache->out.assign(L - 1, {});
  }
  Eigen::MatrixXd h = Z;
  for (int l = 0; l + 1 < L; ++l) {
    Eigen::MatrixXd y = (m.W[l] * h).colwise() + m.b[l];
    if (cache) cache->pre[l] = y;
    if (m.norm[l]) {
      const Eigen::RowVectorXd mu = y.colwise().mean();
      y.rowwise() -= mu;
      const Eigen::RowVectorXd inv =
          ((y.array().square().colwise().sum() / static_cast<double>(y.rows())) + kNormEps)
              .sqrt()
              .inverse();
      y = y.array().rowwise() * inv.array();
      if (cache) {
        cache->nhat[l] = y;
        cache->inv_std[l] = inv;
      }
      y = (y.array().colwise() * m.gain[l].array()).colwise() + m.bias[l].array();
    }
    Eigen::MatrixXd a = activate(y, m.activation);
    if (cache) cache->act[l] = a;
    if (dropout) a.array() *= (*dropout)[l].array();
    if (cache) cache->out[l] = a;
    h = std::move(a);
  }
  return (m.W.back() * h).colwise() + m.b.back();
}

void backward_batch(const Mlp& m, const BatchCache& cache, const Eigen::MatrixXd& G_out,
                    Mlp& grad, Eigen::MatrixXd* G_in,
                    const std::vector<Eigen::MatrixXd>* dropout) {
  const int L = m.n_layers();
  const Eigen::MatrixXd& last_in = L >= 2 ? cache.out[L - 2] : cache.input;
  grad.W[L - 1].noalias() += G_out * last_in.transpose();
  grad.b[L - 1] += G_out.rowwise().sum();
  Eigen::MatrixXd g = m.W[L - 1].transpose() * G_out;
  for (int l = L - 2; l >= 0; --l) {
    if (dropout) g.array() *= (*dropout)[l].array();
    Eigen::MatrixXd gy = g.cwiseProduct(activation_slope(cache.act[l], m.activation));
    if (m.norm[l]) {
      const Eigen::MatrixXd& nhat = cache.nhat[l];
      grad.gain[l] += gy.cwiseProduct(nhat).rowwise().sum();
      grad.bias[l] += gy.rowwise().sum();
      const Eigen::MatrixXd gn = gy.array().colwise() * m.gain[l].array();
      const double n = static_cast<double>(gn.rows());
      const Eigen::RowVectorXd mean_g = gn.colwise().sum() / n;
      const Eigen::RowVectorXd mean_gn = gn.cwiseProduct(nhat).colwise().sum() / n;
      Eigen::MatrixXd ga = gn.rowwise() - mean_g;
      ga.array() -= nhat.array().rowwise() * mean_gn.array();
      gy = ga.array().rowwise() * cache.inv_std[l].array();
    }
    const Eigen::MatrixXd& h_prev = l > 0 ? cache.out[l - 1] : cache.input;
    grad.W[l].noalias() += gy * h_prev.transpose();
    grad.b[l] += gy.rowwise().sum();
    if (l > 0 || G_in) g = m.W[l].transpose() * gy;
  }
  if (G_in) *G_in = L >= 2 ? g : Eigen::MatrixXd(m.W[0].transpose() * G_out);
}

Eigen::MatrixXd jvp_batch(const Mlp& m, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& T) {
  if (m.has_norm()) {
    Eigen::MatrixXd out(m.n_out(), Z.cols());
    for (Eigen::Index c = 0; c < Z.cols(); ++c) {
      out.col(c) = m.input_jacobian(Z.col(c)) * T.col(c);
    }
    return out;
  }
  Eigen::MatrixXd h = Z;
  Eigen::MatrixXd t = T;
  for (int l = 0; l + 1 < m.n_layers(); ++l) {
    const Eigen::MatrixXd a = activate((m.W[l] * h).colwise() + m.b[l], m.activation);
    t = activation_slope(a, m.activation).cwiseProduct(m.W[l] * t);
    h = a;
  }
  return m.W.back() * t;
}

void jvp_backward(const Mlp& m, const Eigen::MatrixXd& Z, const Eigen::MatrixXd& T,
                  const Eigen::MatrixXd& G, Mlp& grad) {
  if (m.has_norm()) {
    throw ValidationError("Jacobian-consistency gradients are not available with layer normalization");
  }
  const int L = m.n_layers();
  std::vector<Eigen::MatrixXd> h(L), t(L), s(L), pdot(L);
  h[0] = Z;
  t[0] = T;
  for (int l = 0; l + 1 < L; ++l) {
    const Eigen::MatrixXd a = activate((m.W[l] * h[l]).colwise() + m.b[l], m.activation);
    s[l + 1] = activation_slope(a, m.activation);
    pdot[l + 1] = m.W[l] * t[l];
    t[l + 1] = s[l + 1].cwiseProduct(pdot[l + 1]);
    h[l + 1] = a;
  }
  grad.W[L - 1].noalias() += G * t[L - 1].transpose();
  Eigen::MatrixXd gt = m.W[L - 1].transpose() * G;
  Eigen::MatrixXd gh = Eigen::MatrixXd::Zero(gt.rows(), gt.cols());
  for (int l = L - 1; l >= 1; --l) {
    // layer l maps (h[l-1], t[l-1]) to (h[l], t[l]) through weights W[l-1]
    const Eigen::MatrixXd gpdot = s[l].cwiseProduct(gt);
    Eigen::MatrixXd gp = gh.cwiseProduct(s[l]);
    if (m.activation == Activation::tanh) {
      gp.array() += pdot[l].array() * gt.array() * (-2.0 * h[l].array() * s[l].array());
    }
    grad.W[l - 1].noalias() += gpdot * t[l - 1].transpose() + gp * h[l - 1].transpose();
    grad.b[l - 1] += gp.rowwise().sum();
    if (l > 1) {
      gt = m.W[l - 1].transpose() * gpdot;
      gh = m.W[l - 1].transpose() * gp;
    }
  }
}

void to_json(nlohmann::json& j, const Mlp& m) {
  auto mat = [](const Eigen::MatrixXd& A) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      std::vector<double> row(A.cols());
      for (Eigen::Index c = 0; c < A.cols(); ++c) row[c] = A(r, c);
      rows.push_back(row);
    }
    return rows;
  };
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  j = nlohmann::json::object();
  j["sizes"] = m.sizes;
  j["activation"] = m.activation == Activation::tanh ? "tanh" : "identity";
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (int l = 0; l < m.n_layers(); ++l) {
    j["weights"].push_back(mat(m.W[l]));
    j["biases"].push_back(vec(m.b[l]));
  }
  j["norm_flags"] = m.norm;
  j["norm_gain"] = nlohmann::json::array();
  j["norm_bias"] = nlohmann::json::array();
  for (std::size_t l = 0; l < m.norm.size(); ++l) {
    j["norm_gain"].push_back(vec(m.gain[l]));
    j["norm_bias"].push_back(vec(m.bias[l]));
  }
}

void from_json(const nlohmann::json& j, Mlp& m) {
  m = Mlp{};
  m.sizes = j.at("sizes").get<std::vector<int>>();
  const std::string act = j.value("activation", "tanh");
  if (act != "tanh" && act != "identity") throw ValidationError("mlp: unknown activation " + act);
  m.activation = act == "tanh" ? Activation::tanh : Activation::identity;
  for (const auto& w : j.at("weights")) {
    const Eigen::Index rows = static_cast<Eigen::Index>(w.size());
    const Eigen::Index cols = rows ? static_cast<Eigen::Index>(w[0].size()) : 0;
    Eigen::MatrixXd A(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (static_cast<Eigen::Index>(w[r].size()) != cols) throw ValidationError("mlp: ragged weights");
      for (Eigen::Index c = 0; c < cols; ++c) A(r, c) = w[r][c].get<double>();
    }
    m.W.push_back(std::move(A));
  }
  auto vec = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()));
  };
  for (const auto& v : j.at("biases")) m.b.push_back(vec(v));
  m.norm = j.at("norm_flags").get<std::vector<bool>>();
  for (const auto& v : j.at("norm_gain")) m.gain.push_back(vec(v));
  for (const auto& v : j.at("norm_bias")) m.bias.push_back(vec(v));
  m.validate();
}

}  // namespace pisml::nn
