#include "pisml/io.hpp"

#include <charconv>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unistd.h>

#include "pisml/common.hpp"

namespace pisml::io {

void atomic_write(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": schema: " + e.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw ValidationError(where + ": bad number '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

fs::path with_ext(fs::path stem, const char* ext) {
  if (stem.extension() == ".csv" || stem.extension() == ".json") stem.replace_extension();
  stem += ext;
  return stem;
}

}  // namespace

std::string trajectory_csv(const Trajectory& traj) {
  std::string out = "t";
  for (int i = 0; i < traj.n_states(); ++i) out += ",x" + std::to_string(i);
  out += ",u\n";
  for (int k = 0; k < traj.size(); ++k) {
    out += format_double(traj.times[k]);
    for (int i = 0; i < traj.n_states(); ++i) out += "," + format_double(traj.states(k, i));
    out += "," + format_double(traj.inputs[k]) + "\n";
  }
  return out;
}

nlohmann::json trajectory_sidecar(const Trajectory& traj) {
  nlohmann::json j = {{"scenario", traj.meta.scenario},
                      {"snr_db", nullptr},
                      {"seed", traj.meta.seed},
                      {"dt", traj.meta.dt},
                      {"params_hash", traj.meta.params_hash},
                      {"input", traj.input}};
  if (traj.meta.snr_db) j["snr_db"] = *traj.meta.snr_db;
  return j;
}

void write_trajectory(const fs::path& stem, const Trajectory& traj) {
  atomic_write(with_ext(stem, ".csv"), trajectory_csv(traj));
  atomic_write(with_ext(stem, ".json"), trajectory_sidecar(traj).dump(2) + "\n");
}

Trajectory read_trajectory(const fs::path& stem) {
  const fs::path csv = with_ext(stem, ".csv");
  std::istringstream in(read_text(csv));
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(csv.string() + ": empty file");
  auto header = split(strip_cr(line));
  const int n = static_cast<int>(header.size()) - 2;
  if (n < 1 || header.front() != "t" || header.back() != "u") {
    throw ValidationError(csv.string() + ": header must be t,x0..,u");
  }
  for (int i = 0; i < n; ++i) {
    if (header[i + 1] != "x" + std::to_string(i)) {
      throw ValidationError(csv.string() + ": unexpected column '" + header[i + 1] + "'");
    }
  }
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto f = split(line);
    const std::string where = csv.string() + ":" + std::to_string(lineno);
    if (f.size() != header.size()) throw ValidationError(where + ": wrong field count");
    std::vector<double> r(f.size());
    for (std::size_t c = 0; c < f.size(); ++c) r[c] = parse_double(f[c], where);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError(csv.string() + ": no samples");
  Trajectory t;
  t.states.resize(static_cast<Eigen::Index>(rows.size()), n);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    t.times.push_back(rows[k][0]);
    for (int i = 0; i < n; ++i) t.states(static_cast<Eigen::Index>(k), i) = rows[k][i + 1];
    t.inputs.push_back(rows[k][n + 1]);
  }
  const fs::path side = with_ext(stem, ".json");
  if (fs::exists(side)) {
    auto j = read_json(side);
    t.meta.scenario = j.value("scenario", std::string("custom"));
    if (j.contains("snr_db") && !j["snr_db"].is_null()) t.meta.snr_db = j["snr_db"].get<double>();
    t.meta.seed = j.value("seed", std::uint64_t{0});
    t.meta.dt = j.value("dt", 1e-4);
    t.meta.params_hash = j.value("params_hash", std::string());
    if (j.contains("input")) t.input = j["input"].get<InputSignal>();
  }
  if (!fs::exists(side) || t.input.events().empty()) {
    std::vector<InputEvent> ev;
    for (std::size_t k = 1; k < t.inputs.size(); ++k) {
      if (t.inputs[k] != t.inputs[k - 1]) ev.push_back({t.times[k], t.inputs[k], 0.0});
    }
    if (!fs::exists(side) || !ev.empty()) t.input = InputSignal(t.inputs.front(), std::move(ev));
  }
  t.validate();
  return t;
}

namespace {
std::string traj_stem(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%03d", k);
  return buf;
}
}  // namespace

void write_dataset(const fs::path& dir, const sim::Dataset& data) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < data.trajectories.size(); ++k) {
    write_trajectory(dir / traj_stem(static_cast<int>(k)), data.trajectories[k]);
  }
  atomic_write(dir / "perturbations.json", nlohmann::json(data.records).dump() + "\n");
}

sim::Dataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError("missing dataset directory: " + dir.string());
  sim::Dataset d;
  for (int k = 0; fs::exists(dir / (traj_stem(k) + ".csv")); ++k) {
    d.trajectories.push_back(read_trajectory(dir / traj_stem(k)));
  }
  if (d.trajectories.empty()) throw ValidationError(dir.string() + ": no traj_000.csv");
  if (fs::exists(dir / "perturbations.json")) {
    d.records = read_json(dir / "perturbations.json").get<std::vector<sim::PerturbationRecord>>();
  }
  return d;
}

std::string spectra_csv(const std::vector<std::pair<double, std::vector<analysis::Complex>>>& rows) {
  std::string out = "re,im,sweep_value\n";
  for (const auto& [s, values] : rows) {
    for (const auto& z : values) {
      out += format_double(z.real()) + "," + format_double(z.imag()) + "," + format_double(s) + "\n";
    }
  }
  return out;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "method,scenario,channel,window,value\n";
  for (const auto& r : rows) {
    out += r.method + "," + r.scenario + "," + r.channel + "," + r.window + "," +
           format_double(r.value) + "\n";
  }
  return out;
}

std::vector<ReportRow> read_report_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != "method,scenario,channel,window,value") {
    throw ValidationError(path.string() + ": header must be method,scenario,channel,window,value");
  }
  std::vector<ReportRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto f = split(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 5) throw ValidationError(where + ": wrong field count");
    rows.push_back({f[0], f[1], f[2], f[3], parse_double(f[4], where)});
  }
  return rows;
}

}  // namespace pisml::io

namespace pisml {

void to_json(nlohmann::json& j, const InputSignal& s) {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : s.events()) {
    ev.push_back({{"time", e.time}, {"magnitude", e.magnitude}, {"phase_jump", e.phase_jump}});
  }
  j = {{"initial", s.initial()}, {"events", ev}};
}

void from_json(const nlohmann::json& j, InputSignal& s) {
  std::vector<InputEvent> ev;
  for (const auto& e : j.at("events")) {
    ev.push_back({e.at("time").get<double>(), e.at("magnitude").get<double>(),
                  e.value("phase_jump", 0.0)});
  }
  s = InputSignal(j.at("initial").get<double>(), std::move(ev));
  s.validate();
}

namespace sim {

void to_json(nlohmann::json& j, const PerturbationRecord& r) {
  auto vec = [](const StateVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  j = {{"anchor_state", vec(r.anchor_state)},
       {"anchor_u", r.anchor_u},
       {"delta_x", vec(r.delta_x)},
       {"delta_xdot", vec(r.delta_xdot)}};
}

void from_json(const nlohmann::json& j, PerturbationRecord& r) {
  auto vec = [](const nlohmann::json& a, const char* name) {
    auto v = a.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != kStateDim) {
      throw ValidationError(std::string("perturbation record: ") + name + " needs 13 entries");
    }
    return StateVector(Eigen::Map<const StateVector>(v.data()));
  };
  r.anchor_state = vec(j.at("anchor_state"), "anchor_state");
  r.anchor_u = j.at("anchor_u").get<double>();
  r.delta_x = vec(j.at("delta_x"), "delta_x");
  r.delta_xdot = vec(j.at("delta_xdot"), "delta_xdot");
}

namespace {
template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}
void check_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ValidationError(std::string(what) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ValidationError(std::string(what) + ": unknown key '" + k + "'");
  }
}
}  // namespace

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  const auto& e = s.excitation;
  j = {{"n_traj", s.n_traj},
       {"seed", s.seed},
       {"snr_db", nullptr},
       {"perturbations_per_traj", s.perturbations_per_traj},
       {"perturbation_norm", s.perturbation_norm},
       {"perturbation_step", s.perturbation_step},
       {"integrator_dt", s.integrator_dt},
       {"excitation",
        {{"u0_min", e.u0_min}, {"u0_max", e.u0_max}, {"sag_min", e.sag_min},
         {"sag_max", e.sag_max}, {"jump_min_deg", e.jump_min_deg},
         {"jump_max_deg", e.jump_max_deg}, {"event_time", e.event_time},
         {"t_end", e.t_end}, {"sample_dt", e.sample_dt}}}};
  if (s.snr_db) j["snr_db"] = *s.snr_db;
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  check_keys(j, {"n_traj", "seed", "snr_db", "perturbations_per_traj", "perturbation_norm",
                 "perturbation_step", "integrator_dt", "excitation"},
             "dataset spec");
  read_opt(j, "n_traj", s.n_traj);
  read_opt(j, "seed", s.seed);
  if (j.contains("snr_db")) {
    if (j["snr_db"].is_null()) s.snr_db.reset();
    else s.snr_db = j["snr_db"].get<double>();
  }
  read_opt(j, "perturbations_per_traj", s.perturbations_per_traj);
  read_opt(j, "perturbation_norm", s.perturbation_norm);
  read_opt(j, "perturbation_step", s.perturbation_step);
  read_opt(j, "integrator_dt", s.integrator_dt);
  if (j.contains("excitation")) {
    const auto& x = j["excitation"];
    check_keys(x, {"u0_min", "u0_max", "sag_min", "sag_max", "jump_min_deg", "jump_max_deg",
                   "event_time", "t_end", "sample_dt"},
               "excitation");
    auto& e = s.excitation;
    read_opt(x, "u0_min", e.u0_min);
    read_opt(x, "u0_max", e.u0_max);
    read_opt(x, "sag_min", e.sag_min);
    read_opt(x, "sag_max", e.sag_max);
    read_opt(x, "jump_min_deg", e.jump_min_deg);
    read_opt(x, "jump_max_deg", e.jump_max_deg);
    read_opt(x, "event_time", e.event_time);
    read_opt(x, "t_end", e.t_end);
    read_opt(x, "sample_dt", e.sample_dt);
  }
}

void to_json(nlohmann::json& j, const TestScenario& s) {
  j = {{"u_start", s.u_start}, {"u_sag", s.u_sag},   {"jump_deg", s.jump_deg},
       {"t_sag", s.t_sag},     {"u_test", s.u_test}, {"t_step", s.t_step},
       {"t_end", s.t_end}};
}

void from_json(const nlohmann::json& j, TestScenario& s) {
  check_keys(j, {"u_start", "u_sag", "jump_deg", "t_sag", "u_test", "t_step", "t_end"},
             "scenario");
  read_opt(j, "u_start", s.u_start);
  read_opt(j, "u_sag", s.u_sag);
  read_opt(j, "jump_deg", s.jump_deg);
  read_opt(j, "t_sag", s.t_sag);
  read_opt(j, "u_test", s.u_test);
  read_opt(j, "t_step", s.t_step);
  read_opt(j, "t_end", s.t_end);
}

}  // namespace sim
}  // namespace pisml
