#include <doctest.h>

#include <cmath>

#include "pisml/training.hpp"

using namespace pisml;

namespace {

sim::Dataset small_dataset() {
  sim::DatasetSpec spec;
  spec.n_traj = 2;
  spec.perturbations_per_traj = 4;
  spec.seed = 3;
  return sim::generate_dataset(sim::GfmParams{}, spec);
}

HybridModel random_hybrid(const sim::Dataset& data, bool layer_norm = false) {
  auto preset = train::method_preset("pisml-phy");
  preset.train.hidden = {6, 5};
  preset.train.layer_norm = layer_norm;
  HybridModel m = train::initial_model(preset, data);
  Rng rng = make_rng(11, "test-net");
  m.mlp = nn::make_mlp({14, 6, 5, 13}, rng, false, layer_norm);
  // scale the output layer so the network term is visible next to the backbone
  m.mlp->W.back() *= 0.3;
  return m;
}

}  // namespace

TEST_CASE("one-cycle schedule starts, peaks and ends where configured") {
  train::TrainConfig cfg;
  const long total = 1000;
  CHECK(train::one_cycle_lr(cfg, 0, total) == doctest::Approx(cfg.lr_max / cfg.div_factor));
  double peak = 0.0;
  for (long s = 0; s < total; ++s) peak = std::max(peak, train::one_cycle_lr(cfg, s, total));
  CHECK(peak == doctest::Approx(cfg.lr_max).epsilon(1e-6));
  CHECK(train::one_cycle_lr(cfg, total - 1, total) ==
        doctest::Approx(cfg.lr_max / cfg.div_factor / cfg.final_div_factor).epsilon(1e-6));
}

TEST_CASE("windows stay inside their trajectories") {
  const auto data = small_dataset();
  const auto w = train::make_windows(data.trajectories, 40, 10);
  REQUIRE(!w.empty());
  for (const auto& win : w) {
    CHECK(win.start + win.length <= data.trajectories[win.traj].size() - 1);
  }
}

TEST_CASE("parameterization round trip is exact") {
  const auto data = small_dataset();
  HybridModel m = random_hybrid(data);
  const auto d = train::build_design(m.library, data.trajectories);
  const train::Parameterization param(m, reg::normalization_for(d.Theta, d.Xdot));
  const Eigen::VectorXd th = param.pack(m);
  HybridModel m2 = m;
  param.unpack(th, m2);
  CHECK((m2.xi.values - m.xi.values).cwiseAbs().maxCoeff() <= 1e-12 * m.xi.values.cwiseAbs().maxCoeff());
  CHECK((param.pack(m2) - th).cwiseAbs().maxCoeff() <= 1e-12 * th.cwiseAbs().maxCoeff());
}

TEST_CASE("adjoint gradient of the total loss matches central differences") {
  const auto data = small_dataset();
  HybridModel m = random_hybrid(data);
  const auto d = train::build_design(m.library, data.trajectories);
  const train::Parameterization param(m, reg::normalization_for(d.Theta, d.Xdot));

  // window crossing the phase-jump event at sample 50
  std::vector<train::Window> windows = {{0, 44, 12}, {1, 100, 12}};
  train::TrainConfig cfg;
  cfg.lambda_pert = 0.5;
  cfg.lambda_sparse = 0.0;
  train::TrajLossOptions opt;
  opt.substeps = 2;
  Rng rng = make_rng(5, "masks");
  for (int b = 0; b < 2; ++b) {
    std::vector<Eigen::VectorXd> masks;
    for (int l = 0; l < 2; ++l) {
      Eigen::VectorXd mk(m.mlp->sizes[l + 1]);
      for (auto& v : mk) v = uniform(rng) < 0.2 ? 0.0 : 1.25;
      masks.push_back(mk);
    }
    opt.dropout.push_back(masks);
  }
  const Eigen::VectorXd pw = train::pert_weights(data.records);
  const auto tl = train::total_loss(m, param, data.trajectories, windows, data.records, pw, cfg, opt, true);
  REQUIRE(!tl.diverged);
  REQUIRE(tl.grad.size() == param.size());

  const Eigen::VectorXd th0 = param.pack(m);
  auto eval = [&](const Eigen::VectorXd& th) {
    HybridModel mm = m;
    param.unpack(th, mm);
    return train::total_loss(mm, param, data.trajectories, windows, data.records, pw, cfg, opt, false).total;
  };
  // every backbone coefficient plus a spread of network parameters
  std::vector<int> idx;
  for (int e = 0; e < param.xi_size(); e += 3) idx.push_back(e);
  for (int e = param.xi_size(); e < param.size(); e += 7) idx.push_back(e);
  double worst = 0.0;
  for (int e : idx) {
    const double h = 1e-6 * std::max(1.0, std::abs(th0[e]));
    Eigen::VectorXd tp = th0, tm = th0;
    tp[e] += h;
    tm[e] -= h;
    const double fd = (eval(tp) - eval(tm)) / (2.0 * h);
    const double err = std::abs(fd - tl.grad[e]) / std::max(1e-3 * tl.grad.cwiseAbs().maxCoeff(), std::abs(fd));
    worst = std::max(worst, err);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("regression warm start has a finite trajectory loss") {
  const auto data = small_dataset();
  auto preset = train::method_preset("mod-sindy");
  HybridModel m = train::initial_model(preset, data);
  const auto w = train::make_windows(data.trajectories, 40, 10);
  const auto lv = train::loss_traj(m, data.trajectories, w, {}, false);
  CHECK(std::isfinite(lv.value));
  CHECK(lv.value >= 0.0);
}

TEST_CASE("validation loss is inf for a diverging model") {
  const auto data = small_dataset();
  HybridModel m = random_hybrid(data);
  m.xi.values *= 0.0;
  m.xi.values(0, 0) = 1e12;  // constant drive on delta blows up
  m.mlp->W.back().setZero();
  m.mlp->b.back().setZero();
  const double v = train::validation_loss(m, data.trajectories, 2);
  CHECK(!std::isfinite(v));
}

TEST_CASE("config json rejects unknown keys") {
  train::TrainConfig c;
  nlohmann::json j = c;
  CHECK_NOTHROW(j.get<train::TrainConfig>());
  j["lr"] = 1.0;
  CHECK_THROWS_AS(j.get<train::TrainConfig>(), ValidationError);
}
