#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "qsi/pipeline.hpp"

namespace {

using namespace qsi;

void print_report(const Report& rep) {
  for (const auto& [k, v] : rep) std::cout << k << " = " << v << '\n';
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_runtime("cannot create output directory '" + dir + "'");
}

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantum statistical imaging: simulate antibunched-emitter scans and unmix them"};
  app.require_subcommand(1);

  std::string config, in_dir, out_dir;
  uint64_t seed = 0;
  int emitters = 0;
  int resamples = 0;

  auto* sim = app.add_subcommand("simulate", "generate scan, sweep and g2 data for a scenario");
  sim->add_option("--config", config, "scenario config file")->required();
  sim->add_option("--out", out_dir, "run directory to create")->required();
  auto* sim_seed = sim->add_option("--seed", seed, "override the scenario seed");

  auto* rec = app.add_subcommand("reconstruct", "unmix per-emitter images from a run directory");
  rec->add_option("--in", in_dir, "run directory holding manifest.cfg and count grids")->required();
  rec->add_option("--out", out_dir, "where to write the images (default: --in)");
  auto* rec_emit = rec->add_option("--emitters", emitters, "override the emitter count");

  auto* fit = app.add_subcommand("fit", "localize reconstructed images and report the distance");
  fit->add_option("--in", in_dir, "run directory holding the reconstruction")->required();
  fit->add_option("--out", out_dir, "where to write report.txt (default: --in)");
  auto* fit_res = fit->add_option("--resamples", resamples, "bootstrap resamples (0 disables)");
  auto* fit_emit = fit->add_option("--emitters", emitters, "override the emitter count");

  auto* axes = app.add_subcommand("axes", "polarization sweeps and dipole axis fits");
  axes->add_option("--config", config, "scenario config file")->required();
  axes->add_option("--out", out_dir, "run directory to create")->required();
  auto* axes_seed = axes->add_option("--seed", seed, "override the scenario seed");

  auto* g2c = app.add_subcommand("g2", "start-stop correlation histogram and its fit");
  g2c->add_option("--config", config, "scenario config file")->required();
  g2c->add_option("--out", out_dir, "run directory to create")->required();
  auto* g2_seed = g2c->add_option("--seed", seed, "override the scenario seed");

  auto* pipe = app.add_subcommand("pipeline", "simulate, reconstruct, fit and report end to end");
  pipe->add_option("--config", config, "scenario config file")->required();
  pipe->add_option("--out", out_dir, "run directory to create")->required();
  auto* pipe_seed = pipe->add_option("--seed", seed, "override the scenario seed");
  auto* pipe_emit = pipe->add_option("--emitters", emitters, "override the emitter count");
  auto* pipe_res = pipe->add_option("--resamples", resamples, "bootstrap resamples (0 disables)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) {
      Scenario sc = scenario_from_config(read_key_values(config));
      if (sim_seed->count()) sc.seed = seed;
      ensure_dir(out_dir);
      write_manifest(join(out_dir, "manifest.cfg"), sc);
      if (sc.has_grid) write_scan(out_dir, run_simulation(sc));
      if (sc.has_sweep)
        for (size_t j = 0; j < sc.sweep.positions_nm.size(); ++j)
          write_sweep(join(out_dir, "sweep_" + std::to_string(j) + ".txt"),
                      run_sweep_position(sc, j), sc.sweep.positions_nm[j].first,
                      sc.sweep.positions_nm[j].second, sc.sweep.dwell_s);
      if (sc.has_g2) write_g2(join(out_dir, "g2.txt"), run_g2(sc));
    } else if (rec->parsed()) {
      Scenario sc = read_manifest_dir(in_dir);
      if (rec_emit->count()) sc.n_emitters = emitters;
      const ScanData sd = read_scan(in_dir, sc);
      const EmitterImages ei = reconstruct(sd, sc.scene.detector, sc.n_emitters);
      const std::string dst = out_dir.empty() ? in_dir : out_dir;
      ensure_dir(dst);
      write_reconstruction(dst, ei);
    } else if (fit->parsed()) {
      Scenario sc = read_manifest_dir(in_dir);
      if (fit_emit->count()) sc.n_emitters = emitters;
      if (fit_res->count()) sc.resamples = resamples;
      const EmitterImages ei = read_reconstruction(in_dir, sc.n_emitters);
      ScanData sd;
      const ScanData* sd_ptr = nullptr;
      if (sc.resamples >= 2) {
        sd = read_scan(in_dir, sc);
        sd_ptr = &sd;
      }
      const Report rep = fit_report(ei, sd_ptr, sc.scene.detector, sc.n_emitters, sc.resamples);
      const std::string dst = out_dir.empty() ? in_dir : out_dir;
      ensure_dir(dst);
      write_report(join(dst, "report.txt"), rep);
      print_report(rep);
    } else if (axes->parsed() || g2c->parsed()) {
      Scenario sc = scenario_from_config(read_key_values(config));
      if (axes->parsed()) {
        if (axes_seed->count()) sc.seed = seed;
        if (!sc.has_sweep) fail_validation("axes: the scenario has no sweep section");
        sc.has_grid = false;
        sc.has_g2 = false;
      } else {
        if (g2_seed->count()) sc.seed = seed;
        if (!sc.has_g2) fail_validation("g2: the scenario has no g2 section");
        sc.has_grid = false;
        sc.has_sweep = false;
      }
      print_report(run_pipeline(sc, out_dir));
    } else if (pipe->parsed()) {
      Scenario sc = scenario_from_config(read_key_values(config));
      if (pipe_seed->count()) sc.seed = seed;
      if (pipe_emit->count()) sc.n_emitters = emitters;
      if (pipe_res->count()) sc.resamples = resamples;
      print_report(run_pipeline(sc, out_dir));
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return int(e.kind);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
