#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qsi/simulate.hpp"
#include "qsi/types.hpp"

namespace qsi {

// 17 significant digits: enough to round-trip the double exactly.
std::string format_g17(double v);

// Scan grid files: '#'-prefixed "key value" header lines (nx, ny, pitch_nm,
// x0_nm, y0_nm, dwell_s, unit) followed by ny rows of nx values.
struct GridData {
  ScanGrid grid;
  std::string unit;
  std::vector<double> values;  // row-major, like Image
};

void write_grid(const std::string& path, const Image<int64_t>& img, const ScanGrid& grid,
                const std::string& unit);
void write_grid(const std::string& path, const Image<double>& img, const ScanGrid& grid,
                const std::string& unit);
GridData read_grid(const std::string& path);
Image<int64_t> to_counts(const GridData& gd);  // requires integral values
Image<double> to_rates(const GridData& gd);

// Flat "key = value" configuration text. Full-line '#' comments and blank
// lines are skipped; duplicate keys are rejected.
struct ConfigItem {
  std::string key;
  std::string value;
  int line = 0;
};

struct KeyValues {
  std::vector<ConfigItem> items;
  const ConfigItem* find(const std::string& key) const;
};

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::string& path);

struct SweepSpec {
  std::vector<double> angles_deg;
  double dwell_s = 0.0;
  std::vector<std::pair<double, double>> positions_nm;  // one sweep per position
};

struct G2Spec {
  double x_nm = 0.0;
  double y_nm = 0.0;
  double duration_s = 0.0;
  double bin_width_ns = 0.0;
};

// A fully resolved run description: which measurements to take and on what.
struct Scenario {
  Scene scene;
  bool has_grid = false;
  ScanGrid grid{};
  std::vector<int> orders;
  uint64_t seed = 0;
  int n_emitters = 0;
  int resamples = 0;
  bool has_sweep = false;
  SweepSpec sweep;
  bool has_g2 = false;
  G2Spec g2;
};

Scenario scenario_from_config(const KeyValues& kv);

// Writes every resolved field back out in config form, so a run directory
// can be re-read without the original file.
void write_manifest(const std::string& path, const Scenario& sc);

// Report files: "key = value" lines; uncertainties use the ".err" suffix.
using Report = std::vector<std::pair<std::string, std::string>>;
void report_value(Report& rep, const std::string& key, double value);
void report_value_err(Report& rep, const std::string& key, double value, double err);
void write_report(const std::string& path, const Report& rep);

// Sweep tables: header with position, dwell and seed, then one
// "angle_deg d1 d2 c2" row per angle.
void write_sweep(const std::string& path, const SweepTable& table, double x_nm, double y_nm,
                 double dwell_s);
struct SweepData {
  SweepTable table;
  double x_nm = 0.0, y_nm = 0.0, dwell_s = 0.0;
};
SweepData read_sweep(const std::string& path);

// g2 histograms: header with bin width and start count, then
// "tau_ns count" rows.
void write_g2(const std::string& path, const G2Histogram& h);
G2Histogram read_g2(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace qsi
