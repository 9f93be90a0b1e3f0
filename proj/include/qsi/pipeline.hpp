#pragma once

#include <string>

#include "qsi/estimate.hpp"
#include "qsi/io.hpp"

namespace qsi {

// Scan stage: simulate per the scenario and lay the grids out in a run
// directory next to the manifest.
ScanData run_simulation(const Scenario& sc);
void write_scan(const std::string& dir, const ScanData& sd);
Scenario read_manifest_dir(const std::string& dir);
ScanData read_scan(const std::string& dir, const Scenario& sc);

void write_reconstruction(const std::string& dir, const EmitterImages& ei);
EmitterImages read_reconstruction(const std::string& dir, int n_emitters);

// Sweep and g2 sections; the sweep seed is offset by the position index so
// parked positions draw independent streams.
SweepTable run_sweep_position(const Scenario& sc, size_t position);
G2Histogram run_g2(const Scenario& sc);

// Pair unmixing of one polarization sweep: the brighter root per angle with
// propagated errors, fed to the cos^2 fit.
Cos2Fit sweep_axis_fit(const SweepTable& table, double dwell_s, const Detector& calib);

// Localization report for a reconstruction: per-image fit parameters, the
// pair distance when two images exist, and the bootstrap spread when
// resamples >= 2 (the quoted distance error is the larger of propagation and
// bootstrap).
Report fit_report(const EmitterImages& ei, const ScanData* sd_for_bootstrap, const Detector& calib,
                  int n_emitters, int resamples);

// Everything the scenario asks for, end to end, into out_dir. Outputs are a
// pure function of the scenario, so a rerun writes identical bytes.
Report run_pipeline(const Scenario& sc, const std::string& out_dir);

}  // namespace qsi
