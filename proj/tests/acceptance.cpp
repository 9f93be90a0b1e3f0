// Acceptance gate: eight end-to-end checks, one pass/fail line each.
// Exits nonzero if any check fails or overruns its time budget.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "qsi/estimate.hpp"
#include "qsi/io.hpp"
#include "qsi/model.hpp"
#include "qsi/pipeline.hpp"
#include "qsi/reconstruct.hpp"
#include "qsi/rng.hpp"
#include "qsi/simulate.hpp"

using namespace qsi;
namespace fs = std::filesystem;

namespace {

fs::path g_work;

std::string cli() { return QSI_CLI_PATH; }
std::string scenario(const std::string& name) {
  return std::string(QSI_SCENARIO_DIR) + "/" + name;
}

int run_cli(const std::string& args) {
  const std::string cmd = cli() + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc < 0 ? -1 : WEXITSTATUS(rc);
}

double report_number(const KeyValues& rep, const std::string& key) {
  const ConfigItem* item = rep.find(key);
  if (!item) throw Error(ErrorKind::runtime, "report is missing '" + key + "'");
  return std::stod(item->value);
}

struct Stats {
  double mean = 0.0;
  double sd = 0.0;
};

Stats mean_sd(const std::vector<double>& v) {
  Stats st;
  for (const double x : v) st.mean += x;
  st.mean /= double(v.size());
  double sq = 0.0;
  for (const double x : v) sq += (x - st.mean) * (x - st.mean);
  st.sd = std::sqrt(sq / double(v.size() - 1));
  return st;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ---- exact expectation grids (the dwell -> infinity surrogate) ----

struct RateGrids {
  Image<double> singles;
  std::vector<std::pair<int, Image<double>>> coincidences;
};

RateGrids exact_grids(const Scene& s, const ScanGrid& g, const std::vector<int>& orders) {
  RateGrids out;
  out.singles = Image<double>(g.nx, g.ny);
  for (const int m : orders) out.coincidences.emplace_back(m, Image<double>(g.nx, g.ny));
  const Detector& d = s.detector;
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) {
      const double x = g.x_at(ix), y = g.y_at(iy);
      const double lam1 = expected_singles(s, x, y);
      out.singles.at(ix, iy) = lam1;
      for (size_t k = 0; k < orders.size(); ++k) {
        const int m = orders[k];
        double lam = expected_coincidences_m(s, m, eta_m_default(d, m), x, y);
        if (m == 2) lam += accidental_rate(d, d.t * lam1, d.r * lam1);
        out.coincidences[k].second.at(ix, iy) = lam;
      }
    }
  }
  return out;
}

double worst_unflagged_rel_err(const Scene& s, const ScanGrid& g, const EmitterImages& ei) {
  const size_t n = s.emitters.size();
  std::vector<Image<double>> fields;
  for (size_t j = 0; j < n; ++j) {
    Image<double> f(g.nx, g.ny);
    for (int iy = 0; iy < g.ny; ++iy)
      for (int ix = 0; ix < g.nx; ++ix)
        f.at(ix, iy) = psf_rate(s.emitters[j], s.pump_angle_deg, s.psf, g.x_at(ix), g.y_at(iy));
    fields.push_back(std::move(f));
  }
  std::vector<int> match(n, -1);
  std::vector<bool> taken(n, false);
  for (size_t j = 0; j < n; ++j) {
    size_t peak = 0;
    for (size_t p = 1; p < fields[j].size(); ++p)
      if (fields[j][p] > fields[j][peak]) peak = p;
    double best = -1.0;
    for (size_t k = 0; k < n; ++k) {
      if (taken[k]) continue;
      const double diff = std::abs(ei.images[k][peak] - fields[j][peak]);
      if (best < 0.0 || diff < best) {
        best = diff;
        match[j] = int(k);
      }
    }
    taken[size_t(match[j])] = true;
  }
  double worst = 0.0;
  for (size_t p = 0; p < ei.flags.size(); ++p) {
    if (ei.flags[p] != uint8_t(PixelFlag::ok)) continue;
    for (size_t j = 0; j < n; ++j) {
      const double truth = fields[j][p];
      const double got = ei.images[size_t(match[j])][p];
      worst = std::max(worst, std::abs(got - truth) / std::max(truth, 1e-300));
    }
  }
  return worst;
}

// ---- criteria ----

std::string noiseless_inversion() {
  Scene pair;
  pair.emitters = {{186.35, 2.7, 19400.0, 0.0}, {-179.75, 2.7, 11980.0, 0.0}};
  ScanGrid g2grid;
  g2grid.nx = 40;
  g2grid.ny = 40;
  g2grid.pitch_nm = 37.0;
  g2grid.x0_nm = -721.5;
  g2grid.y0_nm = -721.5;
  g2grid.dwell_s = 8500.0;
  const RateGrids r2 = exact_grids(pair, g2grid, {2});
  const EmitterImages e2 = reconstruct_rates(r2.singles, r2.coincidences, g2grid, pair.detector, 2);
  const double w2 = worst_unflagged_rel_err(pair, g2grid, e2);

  Scene s3;
  s3.emitters = {{0.0, 0.0, 100000.0, 0.0},
                 {240.0, 80.0, 70000.0, 0.0},
                 {-100.0, 260.0, 140000.0, 0.0}};
  ScanGrid g;
  g.nx = 24;
  g.ny = 24;
  g.pitch_nm = 40.0;
  g.x0_nm = -410.0;
  g.y0_nm = -410.0;
  g.dwell_s = 100.0;
  const RateGrids r3 = exact_grids(s3, g, {2, 3});
  const EmitterImages e3 = reconstruct_rates(r3.singles, r3.coincidences, g, s3.detector, 3);
  const double w3 = worst_unflagged_rel_err(s3, g, e3);

  Scene s4 = s3;
  s4.emitters.push_back({150.0, -210.0, 55000.0, 0.0});
  const RateGrids r4 = exact_grids(s4, g, {2, 3, 4});
  const EmitterImages e4 = reconstruct_rates(r4.singles, r4.coincidences, g, s4.detector, 4);
  const double w4 = worst_unflagged_rel_err(s4, g, e4);

  const double worst = std::max({w2, w3, w4});
  if (worst > 1e-9)
    throw Error(ErrorKind::runtime, "worst unflagged relative error " + fmt(worst) +
                                        " (N=2 " + fmt(w2) + ", N=3 " + fmt(w3) + ", N=4 " +
                                        fmt(w4) + ") exceeds 1e-9");
  return "N=2/3/4 worst relative error " + fmt(worst);
}

std::vector<double> seed_sweep_distances(const std::string& config, int n_seeds) {
  std::vector<double> out;
  for (int seed = 1; seed <= n_seeds; ++seed) {
    const fs::path dir = g_work / ("seeds_" + fs::path(config).stem().string() +
                                   "_" + std::to_string(seed));
    const int rc = run_cli("pipeline --config " + config + " --out " + dir.string() + " --seed " +
                           std::to_string(seed));
    if (rc != 0)
      throw Error(ErrorKind::runtime,
                  "pipeline exit code " + std::to_string(rc) + " at seed " + std::to_string(seed));
    out.push_back(report_number(read_key_values((dir / "report.txt").string()), "distance_nm"));
    fs::remove_all(dir);
  }
  return out;
}

std::string pair366_reproduction() {
  const std::vector<double> d = seed_sweep_distances(scenario("pair366.cfg"), 20);
  const Stats st = mean_sd(d);
  if (std::abs(st.mean - 366.1) > 10.0)
    throw Error(ErrorKind::runtime, "mean distance " + fmt(st.mean) + " outside 366.1 +- 10");
  if (st.sd > 10.0)
    throw Error(ErrorKind::runtime, "distance std " + fmt(st.sd) + " exceeds 10");
  return "20-seed distance " + fmt(st.mean) + " +- " + fmt(st.sd) + " nm";
}

std::string pair8p5_reproduction() {
  const std::vector<double> d = seed_sweep_distances(scenario("pair8p5.cfg"), 20);
  const Stats st = mean_sd(d);
  if (std::abs(st.mean - 8.5) > 2.4)
    throw Error(ErrorKind::runtime, "mean distance " + fmt(st.mean) + " outside 8.5 +- 2.4");
  if (st.sd > 2.5)
    throw Error(ErrorKind::runtime, "distance std " + fmt(st.sd) + " exceeds 2.5");
  return "20-seed distance " + fmt(st.mean) + " +- " + fmt(st.sd) + " nm";
}

std::string bootstrap_scaling() {
  Scenario sc = scenario_from_config(read_key_values(scenario("pair8p5.cfg")));

  // dwell that puts the whole-scan expected signal-pair total at the budget
  const Detector& det = sc.scene.detector;
  double pair_rate = 0.0;
  for (int iy = 0; iy < sc.grid.ny; ++iy)
    for (int ix = 0; ix < sc.grid.nx; ++ix)
      pair_rate += expected_coincidences_m(sc.scene, 2, eta_m_default(det, 2), sc.grid.x_at(ix),
                                           sc.grid.y_at(iy));

  std::vector<double> stds;
  std::ostringstream detail;
  for (const double budget : {1e3, 1e4, 1e5}) {
    const std::string tag = std::to_string(int64_t(budget));
    sc.grid.dwell_s = budget / pair_rate;
    sc.resamples = 80;
    const fs::path cfg = g_work / ("budget_" + tag + ".cfg");
    write_manifest(cfg.string(), sc);
    const fs::path dir = g_work / ("budget_" + tag);
    const int rc = run_cli("pipeline --config " + cfg.string() + " --out " + dir.string());
    if (rc != 0)
      throw Error(ErrorKind::runtime, "pipeline exit code " + std::to_string(rc) + " at budget " +
                                          fmt(budget));
    const KeyValues rep = read_key_values((dir / "report.txt").string());
    const double sd = report_number(rep, "bootstrap.std_nm");
    const double ok = report_number(rep, "bootstrap.n_success");
    if (ok < 0.8 * 80.0)
      throw Error(ErrorKind::runtime, "only " + fmt(ok) + "/80 resamples succeeded at budget " +
                                          fmt(budget));
    stds.push_back(sd);
    detail << (detail.tellp() > 0 ? ", " : "") << tag << ": " << fmt(sd) << " nm";
    fs::remove_all(dir);
  }

  // an inverse-square-root law drops the std by sqrt(10) per decade;
  // demand that within a factor of 2 on either side
  const double lo = std::sqrt(10.0) / 2.0, hi = 2.0 * std::sqrt(10.0);
  for (size_t i = 0; i + 1 < stds.size(); ++i) {
    const double ratio = stds[i] / stds[i + 1];
    if (!(ratio >= lo && ratio <= hi))
      throw Error(ErrorKind::runtime, "decade ratio " + fmt(ratio) + " outside [" + fmt(lo) +
                                          ", " + fmt(hi) + "] (" + detail.str() + ")");
  }
  return detail.str();
}

std::string g2_signature() {
  Scene pair;
  pair.emitters = {{-100.0, 0.0, 10000.0, 0.0}, {100.0, 0.0, 10000.0, 0.0}};
  const G2Histogram mid = simulate_g2(pair, 0.0, 0.0, 3000.0, 1.0, 1);
  const G2Fit fmid = fit_g2(mid);
  if (std::abs(fmid.g2_zero - 0.5) > 0.05)
    throw Error(ErrorKind::runtime, "centered dip " + fmt(fmid.g2_zero) + " outside 0.5 +- 0.05");

  Scene lop;
  lop.emitters = {{0.0, 0.0, 10000.0, 0.0}, {1500.0, 0.0, 10000.0, 0.0}};
  const G2Histogram one = simulate_g2(lop, 0.0, 0.0, 3000.0, 1.0, 2);
  const G2Fit fone = fit_g2(one);
  if (fone.g2_zero > 0.1)
    throw Error(ErrorKind::runtime, "one-sided dip " + fmt(fone.g2_zero) + " exceeds 0.1");
  return "centered " + fmt(fmid.g2_zero) + ", one-sided " + fmt(fone.g2_zero);
}

std::string axis_fit() {
  const fs::path dir = g_work / "axes";
  const int rc = run_cli("pipeline --config " + scenario("axes.cfg") + " --out " + dir.string());
  if (rc != 0) throw Error(ErrorKind::runtime, "pipeline exit code " + std::to_string(rc));
  const KeyValues rep = read_key_values((dir / "report.txt").string());

  const struct {
    const char* key;
    double truth;
  } expected[] = {{"axis_0.alpha_cps", 37500.0},
                  {"axis_0.beta_cps", -21000.0},
                  {"axis_1.alpha_cps", 23100.0},
                  {"axis_1.beta_cps", -10800.0}};
  std::ostringstream detail;
  for (const auto& e : expected) {
    const double est = report_number(rep, e.key);
    const double err = report_number(rep, std::string(e.key) + ".err");
    if (std::abs(est - e.truth) > 3.0 * err)
      throw Error(ErrorKind::runtime, std::string(e.key) + " = " + fmt(est) + " +- " + fmt(err) +
                                          " misses " + fmt(e.truth) + " by more than 3 sigma");
    // standard errors should sit at the few-hundred-cps scale
    if (err < 80.0 || err > 9000.0)
      throw Error(ErrorKind::runtime,
                  std::string(e.key) + " standard error " + fmt(err) + " is out of scale");
    detail << (detail.tellp() > 0 ? ", " : "") << fmt((est - e.truth) / err) << " sigma";
  }
  return "deviations " + detail.str();
}

std::string property_suites() {
  // elementary symmetric polynomials against subset enumeration
  uint64_t state = 0x9e3779b97f4a7c15ull;
  const auto uni = [&]() {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return 0.5 + double(state >> 40) / double(1 << 24) * 1000.0;
  };
  for (int n = 1; n <= 6; ++n) {
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> v;
      for (int i = 0; i < n; ++i) v.push_back(uni());
      const auto e = esym(v);
      for (int m = 1; m <= n; ++m) {
        double sum = 0.0;
        for (uint32_t mask = 0; mask < (1u << n); ++mask) {
          if (__builtin_popcount(mask) != m) continue;
          double prod = 1.0;
          for (int i = 0; i < n; ++i)
            if (mask & (1u << i)) prod *= v[size_t(i)];
          sum += prod;
        }
        if (std::abs(e[size_t(m)] - sum) > 1e-12 * std::abs(sum))
          throw Error(ErrorKind::runtime, "e_" + std::to_string(m) + " recurrence drifted");
      }
    }
  }

  // root solvers round-trip
  for (int rep = 0; rep < 100; ++rep) {
    const double a = uni(), b = uni();
    const PairSolution ps = solve_pair(a + b, a * b);
    if (std::abs(ps.ia - std::max(a, b)) > 1e-9 * std::max(a, b))
      throw Error(ErrorKind::runtime, "solve_pair round-trip failed");
  }
  for (int n = 2; n <= 4; ++n) {
    for (int rep = 0; rep < 30; ++rep) {
      std::vector<double> r;
      for (int i = 0; i < n; ++i) r.push_back(uni() / 50.0 + double(i) * 3000.0 + 100.0);
      std::sort(r.begin(), r.end(), std::greater<>());
      const auto e = esym(r);
      const SymmetricSolution sol = solve_symmetric(std::vector<double>(e.begin() + 1, e.end()));
      for (int i = 0; i < n; ++i)
        if (std::abs(sol.roots[size_t(i)] - r[size_t(i)]) > 1e-9 * r[size_t(i)])
          throw Error(ErrorKind::runtime, "solve_symmetric round-trip failed at N=" +
                                              std::to_string(n));
    }
  }

  // sum conservation on a measured scan, label continuity on exact input
  Scene pair;
  pair.emitters = {{186.35, 2.7, 19400.0, 0.0}, {-179.75, 2.7, 11980.0, 0.0}};
  ScanGrid g;
  g.nx = 40;
  g.ny = 40;
  g.pitch_nm = 37.0;
  g.x0_nm = -721.5;
  g.y0_nm = -721.5;
  g.dwell_s = 8500.0;
  const ScanData sd = simulate_scan(pair, g, {2}, 1);
  const EmitterImages ei = reconstruct(sd, pair.detector, 2);
  for (size_t p = 0; p < ei.flags.size(); ++p) {
    const double s1 = double(sd.singles_d1[p] + sd.singles_d2[p]) / g.dwell_s;
    const double sum = ei.images[0][p] + ei.images[1][p];
    if (std::abs(sum - s1) > 1e-9 * std::max(s1, 1.0))
      throw Error(ErrorKind::runtime, "sum conservation violated");
  }
  const RateGrids rg = exact_grids(pair, g, {2});
  const EmitterImages er = reconstruct_rates(rg.singles, rg.coincidences, g, pair.detector, 2);
  for (const auto& img : er.images) {
    int maxima = 0;
    for (int iy = 0; iy < g.ny; ++iy)
      for (int ix = 0; ix < g.nx; ++ix) {
        bool strict = true;
        for (int dy = -1; dy <= 1 && strict; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int jx = ix + dx, jy = iy + dy;
            if (jx < 0 || jx >= g.nx || jy < 0 || jy >= g.ny) continue;
            if (img.at(jx, jy) >= img.at(ix, iy)) {
              strict = false;
              break;
            }
          }
        maxima += strict;
      }
    if (maxima != 1)
      throw Error(ErrorKind::runtime,
                  "label continuity: found " + std::to_string(maxima) + " maxima");
  }

  // analytic gaussian gradient against central differences
  for (int rep = 0; rep < 40; ++rep) {
    double th[6];
    th[0] = uni() - 500.0;
    th[1] = uni() - 500.0;
    th[2] = 80.0 + uni() / 5.0;
    th[3] = 80.0 + uni() / 5.0;
    th[4] = 500.0 + uni() * 10.0;
    th[5] = uni() / 2.0;
    const double x = uni() - 500.0, y = uni() - 500.0;
    double grad[6];
    gaussian2d_point(th, x, y, grad);
    for (int j = 0; j < 6; ++j) {
      const double h = 1e-6 * std::max(std::abs(th[j]), 1.0);
      double tp[6], tm[6];
      for (int k = 0; k < 6; ++k) tp[k] = tm[k] = th[k];
      tp[j] += h;
      tm[j] -= h;
      const double fd = (gaussian2d_point(tp, x, y) - gaussian2d_point(tm, x, y)) / (2.0 * h);
      const double scale = std::max({std::abs(fd), std::abs(grad[j]), 1.0});
      if (std::abs(fd - grad[j]) > 1e-6 * scale)
        throw Error(ErrorKind::runtime, "gaussian gradient mismatch in component " +
                                            std::to_string(j));
    }
  }

  // simulator determinism: identical draws on every channel
  const ScanData re = simulate_scan(pair, g, {2}, 1);
  if (re.singles_d1.v != sd.singles_d1.v || re.singles_d2.v != sd.singles_d2.v ||
      re.order(2)->v != sd.order(2)->v)
    throw Error(ErrorKind::runtime, "scan repeat diverged");
  const G2Histogram h1 = simulate_g2(pair, 0.0, 0.0, 10.0, 1.0, 3);
  const G2Histogram h2 = simulate_g2(pair, 0.0, 0.0, 10.0, 1.0, 3);
  if (h1.counts != h2.counts || h1.total_starts != h2.total_starts)
    throw Error(ErrorKind::runtime, "g2 repeat diverged");
  const SweepTable t1 = simulate_polarization_sweep(pair, 186.35, 2.7, {0.0, 30.0, 60.0}, 0.05, 4);
  const SweepTable t2 = simulate_polarization_sweep(pair, 186.35, 2.7, {0.0, 30.0, 60.0}, 0.05, 4);
  for (size_t i = 0; i < t1.size(); ++i)
    if (t1[i].d1 != t2[i].d1 || t1[i].d2 != t2[i].d2 || t1[i].c2 != t2[i].c2)
      throw Error(ErrorKind::runtime, "sweep repeat diverged");

  return "symmetric polynomials, solvers, conservation, gradients, determinism";
}

std::string eta2_algebra() {
  Detector half;
  half.r = 0.5;
  half.t = 0.5;
  for (const double r : {1.0, 137.0, 9999.5, 1e6}) {
    if (eta_2(half, r, r) != 2.0 * tw_s(half))
      throw Error(ErrorKind::runtime, "balanced equal-rate value is not exactly 2 t_w");
  }

  Detector skew;
  skew.r = 0.54;
  skew.t = 0.46;
  for (const double base : {13.0, 431.7, 88211.0}) {
    const double r1 = base, r2 = 2.7 * base + 11.0;
    if (eta_2(skew, 2.0 * r1, 2.0 * r2) != eta_2(skew, r1, r2))
      throw Error(ErrorKind::runtime, "joint rate doubling moved the value");
  }
  return "2 t_w exact, doubling invariant bit-exact";
}

struct Criterion {
  int number;
  double budget_s;
  std::function<std::string()> fn;
};

}  // namespace

int main() {
  g_work = fs::temp_directory_path() / ("qsi_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  const std::vector<Criterion> criteria = {
      {1, 5.0, noiseless_inversion},   {2, 120.0, pair366_reproduction},
      {3, 300.0, pair8p5_reproduction}, {4, 600.0, bootstrap_scaling},
      {5, 60.0, g2_signature},          {6, 60.0, axis_fit},
      {7, 0.0, property_suites},        {8, 0.0, eta2_algebra},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = true;
    try {
      detail = c.fn();
    } catch (const std::exception& e) {
      pass = false;
      detail = e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (pass && c.budget_s > 0.0 && elapsed > c.budget_s) {
      pass = false;
      detail += " (over the " + fmt(c.budget_s) + " s budget)";
    }
    failures += !pass;
    std::printf("criterion %d: %s  %s  [%.1f s]\n", c.number, pass ? "PASS" : "FAIL",
                detail.c_str(), elapsed);
    std::fflush(stdout);
  }

  fs::remove_all(g_work);
  return failures == 0 ? 0 : 1;
}
