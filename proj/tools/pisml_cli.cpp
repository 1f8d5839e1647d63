// pisml: command-line driver for the simulation, training, distillation and
// analysis pipeline. Every subcommand writes into --out with a manifest.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fcntl.h>
#include <filesystem>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <unistd.h>

#include "pisml/analysis.hpp"
#include "pisml/distill.hpp"
#include "pisml/io.hpp"
#include "pisml/microgrid.hpp"
#include "pisml/state.hpp"
#include "pisml/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pisml;

namespace {

struct Options {
  std::string out;
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

/// Exclusive ownership of an output directory for one run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".pisml.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw ValidationError("output directory is locked: " + path_.string());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j = io::read_json(path);
  if (!j.is_object()) throw ValidationError(path + ": config must be a JSON object");
  return j;
}

template <class T>
T section(const json& cfg, const char* key, T value) {
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
  return value;
}

sim::GfmParams params_from(const json& cfg, bool saturation) {
  sim::GfmParams p;
  if (cfg.contains("params")) {
    json merged = p;
    merged.merge_patch(cfg["params"]);
    p = merged.get<sim::GfmParams>();
  }
  if (saturation) p = sim::saturation_variant(p);
  p.validate();
  return p;
}

sim::TestScenario scenario_from(const json& cfg) {
  return section(cfg, "scenario", sim::TestScenario{});
}

/// Runs one subcommand body with locking, manifest and timing.
void run(const std::string& command, const Options& opt, json effective,
         const std::function<void(const fs::path&)>& body) {
  if (opt.out.empty()) throw ValidationError("--out is required");
  const fs::path out(opt.out);
  DirLock lock(out);
  const auto t0 = std::chrono::steady_clock::now();
  body(out);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  effective["command"] = command;
  effective["seed"] = opt.seed;
  const std::string canonical = effective.dump();
  json manifest = {{"command", command},
                   {"config", effective},
                   {"config_hash", hex64(fnv1a64(canonical))},
                   {"git_describe", std::string(git_describe())},
                   {"seed", opt.seed},
                   {"wall_time_s", wall}};
  io::atomic_write(out / ("manifest_" + command + ".json"), manifest.dump(2) + "\n");
}

std::string method_label(const HybridModel& m) {
  if (m.provenance.contains("method")) return m.provenance["method"].get<std::string>();
  return to_string(m.mode);
}

// ------------------------------------------------------------- simulate

void cmd_simulate(const Options& opt, bool saturation, std::optional<double> u_test) {
  json cfg = load_config(opt.config);
  const auto p = params_from(cfg, saturation);
  auto sc = scenario_from(cfg);
  if (u_test) sc.u_test = *u_test;
  json eff = {{"params", p}, {"scenario", sc}, {"saturation", saturation}};
  run("simulate", opt, eff, [&](const fs::path& out) {
    Trajectory t = sim::simulate_scenario(p, sc);
    t.meta.scenario = saturation ? "saturation" : "standard";
    t.meta.seed = opt.seed;
    io::write_trajectory(out / "trajectory", t);
  });
}

// -------------------------------------------------------------- dataset

void cmd_dataset(const Options& opt, std::optional<int> n_traj, std::optional<double> snr,
                 bool saturation) {
  json cfg = load_config(opt.config);
  const auto p = params_from(cfg, saturation);
  auto spec = section(cfg, "dataset", sim::DatasetSpec{});
  if (n_traj) spec.n_traj = *n_traj;
  if (snr) spec.snr_db = *snr;
  if (opt.seed_given || !cfg.contains("dataset")) spec.seed = opt.seed;
  json eff = {{"params", p}, {"dataset", spec}, {"saturation", saturation}};
  run("dataset", opt, eff, [&](const fs::path& out) {
    const auto data = sim::generate_dataset(p, spec);
    io::write_dataset(out, data);
    io::atomic_write(out / "dataset.json", json({{"params", p}, {"dataset", spec}}).dump(2) + "\n");
  });
}

// ---------------------------------------------------------------- train

void cmd_train(const Options& opt, const std::string& method, const std::string& data_dir,
               std::optional<int> epochs) {
  json cfg = load_config(opt.config);
  auto preset = train::method_preset(method);
  if (cfg.contains("train")) {
    json merged = preset.train;
    merged.merge_patch(cfg["train"]);
    preset.train = merged.get<train::TrainConfig>();
  }
  if (epochs) preset.train.epochs = *epochs;
  if (opt.seed_given || !cfg.contains("train") || !cfg["train"].contains("seed")) {
    preset.train.seed = opt.seed;
  }
  preset.train.validate();
  const auto data = io::read_dataset(data_dir);
  json eff = {{"method", method}, {"data", data_dir}, {"train", preset.train}};
  run("train", opt, eff, [&](const fs::path& out) {
    train::TrainReport report;
    HybridModel m = train::fit_method(preset, data, &report);
    io::atomic_write(out / "model.json", json(m).dump() + "\n");
    if (preset.trained) io::atomic_write(out / "train_report.json", json(report).dump(2) + "\n");
  });
}

// -------------------------------------------------------------- distill

void cmd_distill(const Options& opt, const std::string& model_path, const std::string& data_dir) {
  json cfg = load_config(opt.config);
  auto dc = section(cfg, "distill", distill::DistillConfig{});
  if (opt.seed_given || !cfg.contains("distill")) dc.seed = opt.seed;
  const HybridModel hybrid = load_model(model_path);
  const auto data = io::read_dataset(data_dir);
  json eff = {{"model", model_path}, {"data", data_dir}, {"distill", dc}};
  run("distill", opt, eff, [&](const fs::path& out) {
    HybridModel d = distill::distill_model(hybrid, data.trajectories, dc);
    io::atomic_write(out / "model.json", json(d).dump() + "\n");
    io::atomic_write(out / "model.eqn", distill::render_equations(d));
    const auto c = analysis::complexity(d);
    io::atomic_write(out / "distill.json",
                     json({{"active_coefficients", c.active_coefficients},
                           {"parameter_count", c.parameter_count},
                           {"source_parameter_count", analysis::complexity(hybrid).parameter_count}})
                             .dump(2) + "\n");
  });
}

// ----------------------------------------------------------------- eval

void cmd_eval(const Options& opt, const std::vector<std::string>& models, const std::string& truth_path,
              bool saturation, std::optional<double> u_test) {
  json cfg = load_config(opt.config);
  const auto p = params_from(cfg, saturation);
  auto sc = scenario_from(cfg);
  if (u_test) sc.u_test = *u_test;
  const std::string scenario = saturation ? "saturation" : "standard";
  json eff = {{"models", models}, {"truth", truth_path}, {"params", p}, {"scenario", sc},
              {"saturation", saturation}};
  std::vector<HybridModel> loaded;
  for (const auto& path : models) loaded.push_back(load_model(path));
  run("eval", opt, eff, [&](const fs::path& out) {
    Trajectory truth = truth_path.empty() ? sim::simulate_scenario(p, sc) : io::read_trajectory(truth_path);
    const double t_end = truth.times.back();
    std::vector<io::ReportRow> rows;
    json summary = json::array();
    for (const auto& m : loaded) {
      const std::string label = method_label(m);
      json entry = {{"method", label}, {"scenario", scenario}};
      try {
        RolloutOptions ro;
        ro.sample_dt = truth.times.size() > 1 ? truth.times[1] - truth.times[0] : 1e-4;
        Trajectory pred = rollout(m, truth.states.row(0).transpose(), truth.input, t_end, ro);
        pred.meta.scenario = scenario;
        io::write_trajectory(out / ("prediction_" + label), pred);
        for (const auto& w : {analysis::iod_window(), analysis::ood_window()}) {
          const auto r = analysis::relative_l2(pred, truth, w);
          for (std::size_t c = 0; c < r.channels.size(); ++c) {
            rows.push_back({label, scenario, state_name(r.channels[c], kStateDim), w.name,
                            r.per_channel[c]});
          }
          rows.push_back({label, scenario, "mean", w.name, r.mean});
          entry[w.name] = r.mean;
        }
      } catch (const DivergenceError& e) {
        // A diverging baseline is a result, not a failure of the command.
        for (const auto& w : {analysis::iod_window(), analysis::ood_window()}) {
          rows.push_back({label, scenario, "mean", w.name, std::numeric_limits<double>::infinity()});
        }
        entry["diverged_at"] = e.time();
      }
      const auto c = analysis::complexity(m);
      entry["active_coefficients"] = c.active_coefficients;
      entry["parameter_count"] = c.parameter_count;
      summary.push_back(entry);
    }
    io::atomic_write(out / "report.csv", io::report_csv(rows));
    io::atomic_write(out / "eval.json", summary.dump(2) + "\n");
  });
}

// ---------------------------------------------------------------- eigen

void cmd_eigen(const Options& opt, const std::vector<std::string>& models, double u) {
  json cfg = load_config(opt.config);
  const auto p = params_from(cfg, false);
  json eff = {{"models", models}, {"u", u}, {"params", p}};
  std::vector<HybridModel> loaded;
  for (const auto& path : models) loaded.push_back(load_model(path));
  run("eigen", opt, eff, [&](const fs::path& out) {
    const auto truth = analysis::truth_spectrum(p, u);
    io::atomic_write(out / "spectrum_truth.csv", io::spectra_csv({{u, truth.values}}));
    json summary = {{"u", u}, {"truth_max_real", truth.values.front().real()}, {"models", json::array()}};
    for (const auto& m : loaded) {
      const std::string label = method_label(m);
      json entry = {{"method", label}};
      try {
        const auto s = analysis::model_spectrum(m, u, truth.x, label);
        io::atomic_write(out / ("spectrum_" + label + ".csv"), io::spectra_csv({{u, s.values}}));
        entry["wasserstein"] = analysis::wasserstein_distance(truth.values, s.values);
        entry["max_real"] = s.values.front().real();
      } catch (const NumericalError& e) {
        entry["error"] = std::string(e.tag());
      }
      summary["models"].push_back(entry);
    }
    io::atomic_write(out / "eigen.json", summary.dump(2) + "\n");
  });
}

// ------------------------------------------------------------ microgrid

void cmd_microgrid(const Options& opt, const std::string& unit1_model, double t_end, bool simulate,
                   const analysis::SweepSpec& sweep, bool do_sweep) {
  json cfg = load_config(opt.config);
  auto mp = section(cfg, "microgrid", sim::MicrogridParams::reference());
  mp.validate();
  json eff = {{"microgrid", mp}, {"unit1_model", unit1_model}, {"t_end", t_end}, {"simulate", simulate}};
  if (do_sweep) {
    eff["sweep"] = {{"unit", sweep.unit}, {"name", sweep.name}, {"lo", sweep.lo},
                    {"hi", sweep.hi}, {"steps", sweep.steps}};
  }
  std::optional<HybridModel> learned;
  if (!unit1_model.empty()) learned = load_model(unit1_model);
  run("microgrid", opt, eff, [&](const fs::path& out) {
    sim::UnitField field;
    if (learned) field = analysis::unit_field(*learned);
    json summary = json::object();
    const sim::Microgrid grid(mp, {}, field);
    const Eigen::VectorXd x0 = grid.equilibrium(false);
    const auto nominal = analysis::eigenvalues(grid.reduced_jacobian(x0, false));
    summary["nominal_max_real"] = nominal.front().real();
    summary["nominal_stable"] = nominal.front().real() < 0.0;
    io::atomic_write(out / "spectrum_nominal.csv", io::spectra_csv({{0.0, nominal}}));
    if (simulate) {
      const auto units = grid.simulate(t_end);
      for (int j = 0; j < 3; ++j) io::write_trajectory(out / ("unit" + std::to_string(j + 1)), units[j]);
      if (learned) {
        const auto ref = sim::Microgrid(mp).simulate(t_end);
        const analysis::Window all{"all", 0.0, t_end, true};
        json errs = json::array();
        for (int j = 0; j < 3; ++j) {
          errs.push_back(analysis::relative_l2(units[j], ref[j], all, {kIod, kIoq}).mean);
        }
        summary["output_current_rel_l2"] = errs;
      }
    }
    if (do_sweep) {
      const auto pts = analysis::root_locus(mp, sweep, field);
      std::vector<std::pair<double, std::vector<analysis::Complex>>> rows;
      json flags = json::array();
      for (const auto& pt : pts) {
        if (pt.ok) rows.emplace_back(pt.value, pt.spectrum.values);
        else flags.push_back({{"value", pt.value}, {"message", pt.message}});
      }
      io::atomic_write(out / "root_locus.csv", io::spectra_csv(rows));
      summary["sweep_failures"] = flags;
    }
    io::atomic_write(out / "microgrid.json", summary.dump(2) + "\n");
  });
}

// --------------------------------------------------------------- render

void cmd_render(const Options& opt, const std::string& model_path) {
  const HybridModel m = load_model(model_path);
  json eff = {{"model", model_path}};
  run("render", opt, eff, [&](const fs::path& out) {
    io::atomic_write(out / (fs::path(model_path).stem().string() + ".eqn"), distill::render_equations(m));
  });
}

// --------------------------------------------------------------- report

void cmd_report(const Options& opt, const std::vector<std::string>& inputs) {
  json eff = {{"inputs", inputs}};
  run("report", opt, eff, [&](const fs::path& out) {
    // method -> scenario -> window -> value
    std::map<std::string, std::map<std::string, std::map<std::string, double>>> errors;
    std::vector<std::string> order;
    std::vector<io::ReportRow> spectral, complexity_rows;
    for (const auto& in : inputs) {
      const fs::path dir(in);
      if (!fs::is_directory(dir)) throw MissingFileError("missing directory: " + in);
      bool used = false;
      if (fs::exists(dir / "report.csv")) {
        used = true;
        for (const auto& r : io::read_report_csv(dir / "report.csv")) {
          if (r.channel != "mean") continue;
          if (!errors.count(r.method)) order.push_back(r.method);
          errors[r.method][r.scenario][r.window] = r.value;
        }
      }
      if (fs::exists(dir / "eval.json")) {
        for (const auto& e : io::read_json(dir / "eval.json")) {
          complexity_rows.push_back({e.at("method"), e.at("scenario"), "active_coefficients", "all",
                                     e.at("active_coefficients").get<double>()});
          complexity_rows.push_back({e.at("method"), e.at("scenario"), "parameter_count", "all",
                                     e.at("parameter_count").get<double>()});
        }
      }
      if (fs::exists(dir / "eigen.json")) {
        used = true;
        const auto j = io::read_json(dir / "eigen.json");
        for (const auto& e : j.at("models")) {
          if (!e.contains("wasserstein")) continue;
          spectral.push_back({e.at("method"), "u=" + io::format_double(j.at("u").get<double>()),
                              "spectrum", "wasserstein", e.at("wasserstein").get<double>()});
        }
      }
      if (!used) throw ValidationError(in + ": no report.csv or eigen.json");
    }
    std::set<std::string> scenarios;
    for (const auto& [m, s] : errors) {
      for (const auto& [name, w] : s) scenarios.insert(name);
    }
    std::string table = "method";
    for (const auto& s : scenarios) table += "," + s + "_IOD," + s + "_OOD";
    table += "\n";
    for (const auto& m : order) {
      table += m;
      for (const auto& s : scenarios) {
        for (const char* w : {"IOD", "OOD"}) {
          auto it = errors[m].find(s);
          const bool has = it != errors[m].end() && it->second.count(w);
          table += "," + (has ? io::format_double(it->second.at(w)) : std::string());
        }
      }
      table += "\n";
    }
    io::atomic_write(out / "table_errors.csv", table);
    io::atomic_write(out / "table_spectra.csv", io::report_csv(spectral));
    io::atomic_write(out / "table_complexity.csv", io::report_csv(complexity_rows));
  });
}

int fail(int code, std::string_view tag, const std::string& msg) {
  std::string line = msg;
  for (auto& ch : line) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "pisml: error=" << tag << " " << line << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pisml: hybrid sparse/neural models of grid-forming inverters"};
  app.require_subcommand(1);
  Options opt;
  auto common = [&](CLI::App* sc, bool needs_out = true) {
    auto* o = sc->add_option("--out", opt.out, "Output directory");
    if (needs_out) o->required();
    sc->add_option("--config", opt.config, "JSON config file");
    sc->add_option("--seed", opt.seed, "Master seed");
  };

  bool saturation = false;
  std::optional<double> u_test, snr;
  std::optional<int> n_traj, epochs;
  std::string method, data_dir, model_path, truth_path, unit1_model;
  std::vector<std::string> models, inputs;
  double u = 0.8, t_end = 0.04;
  bool no_sim = false;
  analysis::SweepSpec sweep;
  std::string sweep_name;

  auto* s_sim = app.add_subcommand("simulate", "Simulate the stiff-grid test scenario");
  common(s_sim);
  s_sim->add_flag("--saturation", saturation, "Enable current and voltage limiters");
  s_sim->add_option("--u-test", u_test, "Grid voltage after the step");

  auto* s_data = app.add_subcommand("dataset", "Generate a training dataset");
  common(s_data);
  s_data->add_option("--n-traj", n_traj, "Number of trajectories");
  s_data->add_option("--snr", snr, "Measurement SNR in dB (clean when omitted)");
  s_data->add_flag("--saturation", saturation, "Enable current and voltage limiters");

  auto* s_train = app.add_subcommand("train", "Fit one method preset");
  common(s_train);
  s_train->add_option("--method", method, "std-sindy|mod-sindy|node|pisml|pisml-phy")->required();
  s_train->add_option("--data", data_dir, "Dataset directory")->required();
  s_train->add_option("--epochs", epochs, "Override the epoch count");

  auto* s_dist = app.add_subcommand("distill", "Distill the network residual into library terms");
  common(s_dist);
  s_dist->add_option("--model", model_path, "Hybrid model JSON")->required();
  s_dist->add_option("--data", data_dir, "Dataset directory")->required();

  auto* s_eval = app.add_subcommand("eval", "Roll out models on the test scenario");
  common(s_eval);
  s_eval->add_option("--model", models, "Model JSON (repeatable)")->required();
  s_eval->add_option("--truth", truth_path, "Reference trajectory (simulated when omitted)");
  s_eval->add_flag("--saturation", saturation, "Saturation scenario");
  s_eval->add_option("--u-test", u_test, "Grid voltage after the step");

  auto* s_eig = app.add_subcommand("eigen", "Spectra of ground truth and models");
  common(s_eig);
  s_eig->add_option("--model", models, "Model JSON (repeatable)");
  s_eig->add_option("--u", u, "Grid voltage magnitude");

  auto* s_mg = app.add_subcommand("microgrid", "Three-unit microgrid simulation and root locus");
  common(s_mg);
  s_mg->add_option("--unit1-model", unit1_model, "Learned model replacing unit 1");
  s_mg->add_option("--t-end", t_end, "Simulation horizon (s)");
  s_mg->add_flag("--no-sim", no_sim, "Skip the time-domain simulation");
  s_mg->add_option("--sweep-param", sweep_name, "Swept parameter (m_p, m_q, K_pV, K_iV, K_pC, K_iC)");
  s_mg->add_option("--sweep-unit", sweep.unit, "Swept unit, 1-based")->transform([](std::string s) {
    return std::to_string(std::stoi(s) - 1);
  });
  s_mg->add_option("--sweep-lo", sweep.lo);
  s_mg->add_option("--sweep-hi", sweep.hi);
  s_mg->add_option("--sweep-steps", sweep.steps);

  auto* s_render = app.add_subcommand("render", "Write the equations of a model as text");
  common(s_render);
  s_render->add_option("--model", model_path, "Model JSON")->required();

  auto* s_report = app.add_subcommand("report", "Aggregate eval and eigen outputs into tables");
  common(s_report);
  s_report->add_option("--in", inputs, "Eval/eigen output directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(2, "usage", e.what());
  }
  for (auto* sc : app.get_subcommands()) opt.seed_given = sc->count("--seed") > 0;

  try {
    if (*s_sim) cmd_simulate(opt, saturation, u_test);
    else if (*s_data) cmd_dataset(opt, n_traj, snr, saturation);
    else if (*s_train) cmd_train(opt, method, data_dir, epochs);
    else if (*s_dist) cmd_distill(opt, model_path, data_dir);
    else if (*s_eval) cmd_eval(opt, models, truth_path, saturation, u_test);
    else if (*s_eig) cmd_eigen(opt, models, u);
    else if (*s_mg) {
      if (!sweep_name.empty()) sweep.name = sweep_name;
      cmd_microgrid(opt, unit1_model, t_end, !no_sim, sweep, !sweep_name.empty());
    } else if (*s_render) cmd_render(opt, model_path);
    else if (*s_report) cmd_report(opt, inputs);
  } catch (const ValidationError& e) {
    return fail(2, e.tag(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(2, "schema", e.what());
  } catch (const NumericalError& e) {
    return fail(3, e.tag(), e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
  return 0;
}
