#pragma once

#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "pisml/analysis.hpp"
#include "pisml/dataset.hpp"

namespace pisml {

void to_json(nlohmann::json& j, const InputSignal& s);
void from_json(const nlohmann::json& j, InputSignal& s);

namespace sim {
void to_json(nlohmann::json& j, const PerturbationRecord& r);
void from_json(const nlohmann::json& j, PerturbationRecord& r);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
void to_json(nlohmann::json& j, const TestScenario& s);
void from_json(const nlohmann::json& j, TestScenario& s);
}  // namespace sim

}  // namespace pisml

namespace pisml::io {

namespace fs = std::filesystem;

/// Writes `content` to a sibling temp file, then renames it over `path`.
void atomic_write(const fs::path& path, const std::string& content);
std::string read_text(const fs::path& path);
nlohmann::json read_json(const fs::path& path);

/// CSV with header `t,x0..x{n-1},u`, 17 significant digits.
std::string trajectory_csv(const Trajectory& traj);
/// Sidecar metadata {scenario, snr_db, seed, dt, params_hash, input}.
nlohmann::json trajectory_sidecar(const Trajectory& traj);
/// Writes `<stem>.csv` and `<stem>.json`.
void write_trajectory(const fs::path& stem, const Trajectory& traj);
/// Reads `<stem>.csv`; the sidecar is optional (without it the input
/// signal is rebuilt from the u column, phase jumps are then unknown).
Trajectory read_trajectory(const fs::path& stem);

/// Directory layout: traj_000.csv/.json ..., perturbations.json.
void write_dataset(const fs::path& dir, const sim::Dataset& data);
sim::Dataset read_dataset(const fs::path& dir);

/// Rows `re,im,sweep_value`.
std::string spectra_csv(const std::vector<std::pair<double, std::vector<analysis::Complex>>>& rows);

struct ReportRow {
  std::string method, scenario, channel, window;
  double value = 0.0;
};
/// Rows `method,scenario,channel,window,value`.
std::string report_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> read_report_csv(const fs::path& path);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace pisml::io
