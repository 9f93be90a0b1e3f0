#include "qsi/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace qsi {

namespace fs = std::filesystem;

namespace {

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

template <typename T>
T run_stage(const std::string& stage, const std::function<T()>& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind, stage + ": " + e.what());
  }
}

void add_fit_keys(Report& rep, const std::string& base, const Gaussian2DFit& f) {
  report_value_err(rep, base + ".x0_nm", f.x0_nm, std::sqrt(std::max(f.cov[0], 0.0)));
  report_value_err(rep, base + ".y0_nm", f.y0_nm, std::sqrt(std::max(f.cov[7], 0.0)));
  report_value_err(rep, base + ".sigma_x_nm", f.sigma_x_nm, std::sqrt(std::max(f.cov[14], 0.0)));
  report_value_err(rep, base + ".sigma_y_nm", f.sigma_y_nm, std::sqrt(std::max(f.cov[21], 0.0)));
  report_value_err(rep, base + ".amplitude_cps", f.amplitude, std::sqrt(std::max(f.cov[28], 0.0)));
  report_value_err(rep, base + ".offset_cps", f.offset, std::sqrt(std::max(f.cov[35], 0.0)));
}

}  // namespace

ScanData run_simulation(const Scenario& sc) {
  if (!sc.has_grid) fail_validation("simulate: the scenario has no grid section");
  return simulate_scan(sc.scene, sc.grid, sc.orders, sc.seed);
}

void write_scan(const std::string& dir, const ScanData& sd) {
  write_grid(join(dir, "singles_d1.txt"), sd.singles_d1, sd.grid, "counts");
  write_grid(join(dir, "singles_d2.txt"), sd.singles_d2, sd.grid, "counts");
  for (const auto& [m, img] : sd.coincidences)
    write_grid(join(dir, "coincidence_" + std::to_string(m) + ".txt"), img, sd.grid, "counts");
}

Scenario read_manifest_dir(const std::string& dir) {
  return scenario_from_config(read_key_values(join(dir, "manifest.cfg")));
}

namespace {

void check_grid_match(const ScanGrid& a, const ScanGrid& b, const std::string& what) {
  if (a.nx != b.nx || a.ny != b.ny || a.pitch_nm != b.pitch_nm || a.x0_nm != b.x0_nm ||
      a.y0_nm != b.y0_nm || a.dwell_s != b.dwell_s)
    fail_validation(what + ": grid header disagrees with the manifest");
}

}  // namespace

ScanData read_scan(const std::string& dir, const Scenario& sc) {
  if (!sc.has_grid) fail_validation("read_scan: the manifest has no grid section");
  ScanData sd;
  sd.grid = sc.grid;
  sd.pump_angle_deg = sc.scene.pump_angle_deg;
  sd.seed = sc.seed;
  sd.detector = sc.scene.detector;

  const GridData d1 = read_grid(join(dir, "singles_d1.txt"));
  check_grid_match(d1.grid, sc.grid, "singles_d1.txt");
  sd.singles_d1 = to_counts(d1);
  const GridData d2 = read_grid(join(dir, "singles_d2.txt"));
  check_grid_match(d2.grid, sc.grid, "singles_d2.txt");
  sd.singles_d2 = to_counts(d2);
  for (const int m : sc.orders) {
    const GridData gm = read_grid(join(dir, "coincidence_" + std::to_string(m) + ".txt"));
    check_grid_match(gm.grid, sc.grid, "coincidence_" + std::to_string(m) + ".txt");
    sd.coincidences.emplace_back(m, to_counts(gm));
  }
  return sd;
}

void write_reconstruction(const std::string& dir, const EmitterImages& ei) {
  for (size_t i = 0; i < ei.images.size(); ++i) {
    const std::string tag = std::to_string(i + 1);
    write_grid(join(dir, "emitter_" + tag + ".txt"), ei.images[i], ei.grid, "cps");
    if (i < ei.variances.size())
      write_grid(join(dir, "variance_" + tag + ".txt"), ei.variances[i], ei.grid, "cps2");
  }
  Image<int64_t> flags(ei.grid.nx, ei.grid.ny), labeled(ei.grid.nx, ei.grid.ny);
  for (size_t p = 0; p < flags.size(); ++p) {
    flags[p] = ei.flags[p];
    labeled[p] = ei.labeled[p];
  }
  write_grid(join(dir, "flags.txt"), flags, ei.grid, "flag");
  write_grid(join(dir, "labeled.txt"), labeled, ei.grid, "mask");
}

EmitterImages read_reconstruction(const std::string& dir, int n_emitters) {
  if (n_emitters < 1) fail_validation("read_reconstruction: n_emitters must be >= 1");
  EmitterImages ei;
  for (int i = 1; i <= n_emitters; ++i) {
    const std::string tag = std::to_string(i);
    const GridData g = read_grid(join(dir, "emitter_" + tag + ".txt"));
    if (i == 1)
      ei.grid = g.grid;
    else
      check_grid_match(g.grid, ei.grid, "emitter_" + tag + ".txt");
    ei.images.push_back(to_rates(g));
    const GridData v = read_grid(join(dir, "variance_" + tag + ".txt"));
    check_grid_match(v.grid, ei.grid, "variance_" + tag + ".txt");
    ei.variances.push_back(to_rates(v));
  }
  const GridData fl = read_grid(join(dir, "flags.txt"));
  check_grid_match(fl.grid, ei.grid, "flags.txt");
  const GridData lb = read_grid(join(dir, "labeled.txt"));
  check_grid_match(lb.grid, ei.grid, "labeled.txt");
  ei.flags = Image<uint8_t>(ei.grid.nx, ei.grid.ny);
  ei.labeled = Image<uint8_t>(ei.grid.nx, ei.grid.ny);
  for (size_t p = 0; p < ei.flags.size(); ++p) {
    ei.flags[p] = uint8_t(fl.values[p]);
    ei.labeled[p] = lb.values[p] != 0.0;
  }
  return ei;
}

SweepTable run_sweep_position(const Scenario& sc, size_t position) {
  if (!sc.has_sweep) fail_validation("sweep: the scenario has no sweep section");
  if (position >= sc.sweep.positions_nm.size())
    fail_validation("sweep: position index out of range");
  const auto [x, y] = sc.sweep.positions_nm[position];
  return simulate_polarization_sweep(sc.scene, x, y, sc.sweep.angles_deg, sc.sweep.dwell_s,
                                     sc.seed + position);
}

G2Histogram run_g2(const Scenario& sc) {
  if (!sc.has_g2) fail_validation("g2: the scenario has no g2 section");
  return simulate_g2(sc.scene, sc.g2.x_nm, sc.g2.y_nm, sc.g2.duration_s, sc.g2.bin_width_ns,
                     sc.seed);
}

// The sweep is parked on one emitter with any others outside the spot, so
// the background-subtracted singles rate carries the cos^2 law directly. The
// pair channel is recorded in the table but is count-starved at sweep dwell
// times, so it does not enter the fit.
Cos2Fit sweep_axis_fit(const SweepTable& table, double dwell_s, const Detector& calib) {
  if (!(dwell_s > 0.0)) fail_validation("sweep_axis_fit: dwell must be > 0");
  std::vector<double> angles, rates, errs;
  for (const SweepPoint& pt : table) {
    const double r1 = double(pt.d1) / dwell_s;
    const double r2 = double(pt.d2) / dwell_s;
    const double s1 = std::max(r1 + r2 - calib.bg_cps, 0.0);
    const double var_s1 = double(std::max<int64_t>(pt.d1 + pt.d2, 1)) / (dwell_s * dwell_s);
    angles.push_back(pt.angle_deg);
    rates.push_back(s1);
    errs.push_back(std::sqrt(var_s1));
  }
  return fit_cos2(angles, rates, errs);
}

Report fit_report(const EmitterImages& ei, const ScanData* sd_for_bootstrap, const Detector& calib,
                  int n_emitters, int resamples) {
  Report rep;
  if (ei.images.size() < 2) {
    const Gaussian2DFit f = fit_gaussian2d(ei.images.at(0), ei.grid);
    add_fit_keys(rep, "fit_1", f);
    return rep;
  }
  const PairDistance pd = estimate_pair_distance(ei);
  double err = pd.distance.err_nm;
  std::optional<BootstrapResult> boot;
  if (resamples >= 2) {
    if (!sd_for_bootstrap)
      fail_validation("fit_report: bootstrap needs the measured counts");
    boot = bootstrap_uncertainty(*sd_for_bootstrap, calib, n_emitters, resamples);
    err = std::max(err, boot->std_distance_nm);
  }
  report_value_err(rep, "distance_nm", pd.distance.distance_nm, err);
  report_value(rep, "distance_propagated_err_nm", pd.distance.err_nm);
  if (boot) {
    report_value(rep, "bootstrap.std_nm", boot->std_distance_nm);
    report_value(rep, "bootstrap.n_success", double(boot->n_success));
    report_value(rep, "bootstrap.n_fail", double(boot->n_fail));
  }
  add_fit_keys(rep, "fit_1", pd.fit_a);
  add_fit_keys(rep, "fit_2", pd.fit_b);
  return rep;
}

Report run_pipeline(const Scenario& sc, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail_runtime("cannot create output directory '" + out_dir + "'");
  write_manifest(join(out_dir, "manifest.cfg"), sc);

  Report rep;
  if (sc.has_grid) {
    const ScanData sd = run_stage<ScanData>("simulate", [&] { return run_simulation(sc); });
    run_stage<int>("write scan", [&] {
      write_scan(out_dir, sd);
      return 0;
    });
    const EmitterImages ei = run_stage<EmitterImages>("reconstruct", [&] {
      return reconstruct(sd, sc.scene.detector, sc.n_emitters);
    });
    run_stage<int>("write reconstruction", [&] {
      write_reconstruction(out_dir, ei);
      return 0;
    });
    const Report fit_part = run_stage<Report>("fit", [&] {
      return fit_report(ei, &sd, sc.scene.detector, sc.n_emitters, sc.resamples);
    });
    rep.insert(rep.end(), fit_part.begin(), fit_part.end());
  }

  if (sc.has_sweep) {
    for (size_t j = 0; j < sc.sweep.positions_nm.size(); ++j) {
      const auto [x, y] = sc.sweep.positions_nm[j];
      const std::string stage = "sweep " + std::to_string(j);
      const SweepTable table = run_stage<SweepTable>(stage, [&] { return run_sweep_position(sc, j); });
      write_sweep(join(out_dir, "sweep_" + std::to_string(j) + ".txt"), table, x, y,
                  sc.sweep.dwell_s);
      const Cos2Fit fit = run_stage<Cos2Fit>(stage + " fit", [&] {
        return sweep_axis_fit(table, sc.sweep.dwell_s, sc.scene.detector);
      });
      const std::string base = "axis_" + std::to_string(j);
      Report part;
      report_value_err(part, base + ".alpha_cps", fit.alpha_cps, fit.alpha_err);
      report_value_err(part, base + ".beta_cps", fit.beta_cps, fit.beta_err);
      rep.insert(rep.end(), part.begin(), part.end());
    }
  }

  if (sc.has_g2) {
    const G2Histogram h = run_stage<G2Histogram>("g2", [&] { return run_g2(sc); });
    write_g2(join(out_dir, "g2.txt"), h);
    const G2Fit fit = run_stage<G2Fit>("g2 fit", [&] { return fit_g2(h); });
    Report part;
    report_value_err(part, "g2.zero", fit.g2_zero, fit.g2_zero_err);
    report_value_err(part, "g2.tau_a_ns", fit.tau_a_ns, fit.tau_a_err);
    report_value(part, "g2.plateau_counts", fit.plateau_counts);
    report_value(part, "g2.total_starts", double(h.total_starts));
    rep.insert(rep.end(), part.begin(), part.end());
  }

  write_report(join(out_dir, "report.txt"), rep);
  return rep;
}

}  // namespace qsi
