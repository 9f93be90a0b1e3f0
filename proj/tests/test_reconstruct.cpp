#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "qsi/model.hpp"
#include "qsi/reconstruct.hpp"
#include "qsi/simulate.hpp"

using namespace qsi;

namespace {

// exact expectation grids for a scene: singles plus per-order coincidence
// rates, the noiseless surrogate for an infinitely long dwell
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

Image<double> field_of(const Scene& s, size_t emitter, const ScanGrid& g) {
  Image<double> img(g.nx, g.ny);
  for (int iy = 0; iy < g.ny; ++iy)
    for (int ix = 0; ix < g.nx; ++ix)
      img.at(ix, iy) =
          psf_rate(s.emitters[emitter], s.pump_angle_deg, s.psf, g.x_at(ix), g.y_at(iy));
  return img;
}

// match recovered images to true fields by peak position, then return the
// worst relative error over unflagged pixels
double worst_unflagged_rel_err(const Scene& s, const ScanGrid& g, const EmitterImages& ei) {
  const size_t n = s.emitters.size();
  REQUIRE(ei.images.size() == n);
  std::vector<Image<double>> fields;
  for (size_t j = 0; j < n; ++j) fields.push_back(field_of(s, j, g));

  // each true field claims the recovered image closest at the field's peak
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
      const double rel = std::abs(got - truth) / std::max(truth, 1e-300);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Scene pair_scene() {
  Scene s;
  s.emitters = {{186.35, 2.7, 19400.0, 0.0}, {-179.75, 2.7, 11980.0, 0.0}};
  return s;
}

ScanGrid pair_grid() {
  ScanGrid g;
  g.nx = 40;
  g.ny = 40;
  g.pitch_nm = 37.0;
  g.x0_nm = -721.5;
  g.y0_nm = -721.5;
  g.dwell_s = 8500.0;
  return g;
}

}  // namespace

TEST_CASE("solve_pair factors clean products") {
  const PairSolution a = solve_pair(10.0, 21.0);
  CHECK(a.ia == doctest::Approx(7.0).epsilon(1e-12));
  CHECK(a.ib == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(a.flag == PixelFlag::ok);

  const PairSolution b = solve_pair(10.0, 25.0);
  CHECK(b.ia == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(b.ib == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(b.flag == PixelFlag::ok);

  // product beyond the square of the half-sum cannot come from real rates
  const PairSolution c = solve_pair(10.0, 26.0);
  CHECK(c.ia == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(c.ib == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(c.flag == PixelFlag::clamped_discriminant);

  CHECK_THROWS_AS(solve_pair(-1.0, 4.0), Error);
  CHECK_THROWS_AS(solve_pair(4.0, -1.0), Error);
}

TEST_CASE("solve_pair round-trips random rate pairs") {
  uint64_t state = 99;
  const auto next = [&]() {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return 0.5 + double(state >> 40) / double(1 << 24) * 5000.0;
  };
  for (int rep = 0; rep < 200; ++rep) {
    const double a = next(), b = next();
    const PairSolution sol = solve_pair(a + b, a * b);
    CHECK(sol.flag == PixelFlag::ok);
    CHECK(sol.ia == doctest::Approx(std::max(a, b)).epsilon(1e-11));
    CHECK(sol.ib == doctest::Approx(std::min(a, b)).epsilon(1e-11));
  }
}

TEST_CASE("solve_symmetric recovers integer roots") {
  const SymmetricSolution s = solve_symmetric({6.0, 11.0, 6.0});
  REQUIRE(s.roots.size() == 3);
  CHECK(s.flag == PixelFlag::ok);
  CHECK(s.roots[0] == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(s.roots[1] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(s.roots[2] == doctest::Approx(1.0).epsilon(1e-9));

  const SymmetricSolution one = solve_symmetric({5.0});
  REQUIRE(one.roots.size() == 1);
  CHECK(one.roots[0] == 5.0);
}

TEST_CASE("solve_symmetric round-trips N=4 rates") {
  const std::vector<double> rates = {4.0, 3.0, 2.0, 1.0};
  const auto e = esym(rates);
  const SymmetricSolution s = solve_symmetric({e[1], e[2], e[3], e[4]});
  REQUIRE(s.roots.size() == 4);
  CHECK(s.flag == PixelFlag::ok);
  for (size_t i = 0; i < 4; ++i)
    CHECK(s.roots[i] == doctest::Approx(rates[i]).epsilon(1e-9));

  // randomized round-trips at physical scales
  uint64_t state = 1234;
  const auto next = [&]() {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return 100.0 + double(state >> 40) / double(1 << 24) * 30000.0;
  };
  for (int n = 2; n <= 4; ++n) {
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<double> r;
      for (int i = 0; i < n; ++i) r.push_back(next());
      std::sort(r.begin(), r.end(), std::greater<>());
      // keep roots separated so the recovery tolerance is meaningful
      bool ok = true;
      for (int i = 0; i + 1 < n; ++i) ok = ok && (r[size_t(i)] - r[size_t(i + 1)] > 50.0);
      if (!ok) continue;
      const auto ee = esym(r);
      const SymmetricSolution sol = solve_symmetric(std::vector<double>(ee.begin() + 1, ee.end()));
      REQUIRE(int(sol.roots.size()) == n);
      for (int i = 0; i < n; ++i)
        CHECK(sol.roots[size_t(i)] == doctest::Approx(r[size_t(i)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("solve_symmetric repairs noise-driven root defects") {
  // complex pair: t^2 - 2t + 5 has roots 1 +- 2i; both collapse to the real
  // part and the repair is flagged
  const SymmetricSolution c = solve_symmetric({2.0, 5.0});
  REQUIRE(c.roots.size() == 2);
  CHECK(c.flag == PixelFlag::clamped_discriminant);
  CHECK(c.roots[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(c.roots[1] == doctest::Approx(1.0).epsilon(1e-9));

  // negative root: t^2 - t - 6 factors as (t-3)(t+2); the negative root
  // clamps to zero and the largest root absorbs the deficit, preserving e1
  const SymmetricSolution n = solve_symmetric({1.0, -6.0});
  REQUIRE(n.roots.size() == 2);
  CHECK(n.flag == PixelFlag::clamped_discriminant);
  CHECK(n.roots[1] == 0.0);
  CHECK(n.roots[0] == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_AS(solve_symmetric({}), Error);
}

TEST_CASE("subtract_background handles the pinned cases") {
  ScanGrid g;
  g.nx = 4;
  g.ny = 4;
  g.pitch_nm = 50.0;
  g.dwell_s = 2.0;

  ScanData sd;
  sd.grid = g;
  sd.singles_d1 = Image<int64_t>(4, 4, 30);
  sd.singles_d2 = Image<int64_t>(4, 4, 50);

  // explicit zero background: pure count-to-rate conversion
  const Image<double> plain = subtract_background(sd, 0.0);
  for (const double v : plain.v) CHECK(v == doctest::Approx(40.0).epsilon(1e-15));

  // uniform grid at rate b with bg=b collapses to zero
  const Image<double> zero = subtract_background(sd, 40.0);
  for (const double v : zero.v) CHECK(v == 0.0);
}

TEST_CASE("background estimate lands within single-pixel noise") {
  Scene s;
  s.emitters = {{0.0, 0.0, 30000.0, 0.0}};
  s.detector.bg_cps = 800.0;
  ScanGrid g;
  g.nx = 20;
  g.ny = 20;
  g.pitch_nm = 60.0;
  g.x0_nm = -570.0;
  g.y0_nm = -570.0;
  g.dwell_s = 40.0;
  const ScanData sd = simulate_scan(s, g, {2}, 4242);

  // recover the estimate the decile rule applied at a bright pixel, where
  // the clamp at zero cannot bite
  const Image<double> out = subtract_background(sd, std::nullopt);
  size_t peak = 0;
  double best = -1.0;
  for (size_t p = 0; p < sd.singles_d1.size(); ++p) {
    const double raw = double(sd.singles_d1[p] + sd.singles_d2[p]);
    if (raw > best) {
      best = raw;
      peak = p;
    }
  }
  const double raw_rate = best / g.dwell_s;
  const double est = raw_rate - out[peak];
  const double single_px_sigma = std::sqrt(s.detector.bg_cps / g.dwell_s);
  CHECK(std::abs(est - s.detector.bg_cps) <= 3.0 * single_px_sigma);
}

TEST_CASE("noiseless pair inversion recovers the psf fields") {
  const Scene s = pair_scene();
  const ScanGrid g = pair_grid();
  const RateGrids rg = exact_grids(s, g, {2});
  const EmitterImages ei =
      reconstruct_rates(rg.singles, rg.coincidences, g, s.detector, 2);
  REQUIRE(ei.images.size() == 2);
  CHECK(worst_unflagged_rel_err(s, g, ei) <= 1e-9);

  // label continuity: each recovered image has exactly one strict local max
  for (const auto& img : ei.images) {
    int maxima = 0;
    for (int iy = 0; iy < g.ny; ++iy) {
      for (int ix = 0; ix < g.nx; ++ix) {
        const double v = img.at(ix, iy);
        bool strict = true;
        for (int dy = -1; dy <= 1 && strict; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int jx = ix + dx, jy = iy + dy;
            if (jx < 0 || jx >= g.nx || jy < 0 || jy >= g.ny) continue;
            if (img.at(jx, jy) >= v) {
              strict = false;
              break;
            }
          }
        }
        maxima += strict;
      }
    }
    CHECK(maxima == 1);
  }
}

TEST_CASE("noiseless triple and quad inversion recover the psf fields") {
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
  CHECK(worst_unflagged_rel_err(s3, g, e3) <= 1e-9);

  Scene s4 = s3;
  s4.emitters.push_back({150.0, -210.0, 55000.0, 0.0});
  const RateGrids r4 = exact_grids(s4, g, {2, 3, 4});
  const EmitterImages e4 = reconstruct_rates(r4.singles, r4.coincidences, g, s4.detector, 4);
  CHECK(worst_unflagged_rel_err(s4, g, e4) <= 1e-9);
}

TEST_CASE("single emitter processed as a pair leaves the partner empty") {
  Scene s;
  s.emitters = {{10.0, -20.0, 15000.0, 0.0}};
  ScanGrid g;
  g.nx = 16;
  g.ny = 16;
  g.pitch_nm = 60.0;
  g.x0_nm = -450.0;
  g.y0_nm = -450.0;
  g.dwell_s = 10.0;
  const RateGrids rg = exact_grids(s, g, {2});
  const EmitterImages ei = reconstruct_rates(rg.singles, rg.coincidences, g, s.detector, 2);
  REQUIRE(ei.images.size() == 2);
  for (size_t p = 0; p < ei.flags.size(); ++p) {
    CHECK(ei.flags[p] == uint8_t(PixelFlag::below_noise_floor));
    CHECK(ei.images[1][p] == 0.0);
    CHECK(ei.images[0][p] == doctest::Approx(rg.singles[p]).epsilon(1e-12));
  }
}

TEST_CASE("pair inversion conserves singles and products") {
  const Scene s = pair_scene();
  const ScanGrid g = pair_grid();
  const RateGrids rg = exact_grids(s, g, {2});
  const Detector& d = s.detector;
  const EmitterImages ei = reconstruct_rates(rg.singles, rg.coincidences, g, d, 2);

  const double efac = eta_m_default(d, 2) * (1.0 + d.k_bunch) * d.r * d.t * d.capture_frac;
  for (size_t p = 0; p < rg.singles.size(); ++p) {
    const double s1 = rg.singles[p];
    const double sum = ei.images[0][p] + ei.images[1][p];
    CHECK(std::abs(sum - s1) <= 1e-9 * std::max(s1, 1e-30));

    if (ei.flags[p] == uint8_t(PixelFlag::ok) && ei.labeled[p]) {
      const double acc = accidental_rate(d, d.t * s1, d.r * s1);
      const double p2 = (rg.coincidences[0].second[p] - acc) / efac;
      const double prod = ei.images[0][p] * ei.images[1][p];
      if (p2 > 0.0) CHECK(std::abs(prod - p2) <= 1e-9 * p2);
    }
  }
}

TEST_CASE("relabeling scene emitters leaves the root multiset unchanged") {
  const Scene s = pair_scene();
  Scene swapped = s;
  std::swap(swapped.emitters[0], swapped.emitters[1]);
  const ScanGrid g = pair_grid();
  const RateGrids ra = exact_grids(s, g, {2});
  const RateGrids rb = exact_grids(swapped, g, {2});
  const EmitterImages ea = reconstruct_rates(ra.singles, ra.coincidences, g, s.detector, 2);
  const EmitterImages eb = reconstruct_rates(rb.singles, rb.coincidences, g, s.detector, 2);
  for (size_t p = 0; p < ea.images[0].size(); ++p) {
    const double lo_a = std::min(ea.images[0][p], ea.images[1][p]);
    const double hi_a = std::max(ea.images[0][p], ea.images[1][p]);
    const double lo_b = std::min(eb.images[0][p], eb.images[1][p]);
    const double hi_b = std::max(eb.images[0][p], eb.images[1][p]);
    CHECK(hi_a == doctest::Approx(hi_b).epsilon(1e-12));
    CHECK(lo_a == doctest::Approx(lo_b).epsilon(1e-12));
  }
}

TEST_CASE("count-mode reconstruction conserves singles over the scan") {
  const Scene s = pair_scene();
  const ScanGrid g = pair_grid();
  const ScanData sd = simulate_scan(s, g, {2}, 1);
  const EmitterImages ei = reconstruct(sd, s.detector, 2);
  REQUIRE(ei.images.size() == 2);

  int labeled = 0;
  for (size_t p = 0; p < ei.labeled.size(); ++p) labeled += ei.labeled[p];
  CHECK(labeled >= 48);

  for (size_t p = 0; p < ei.flags.size(); ++p) {
    const double s1 =
        double(sd.singles_d1[p] + sd.singles_d2[p]) / g.dwell_s;  // bg is zero here
    const double sum = ei.images[0][p] + ei.images[1][p];
    CHECK(std::abs(sum - s1) <= 1e-9 * std::max(s1, 1.0));
  }
}

TEST_CASE("reconstruct validates its inputs") {
  const Scene s = pair_scene();
  ScanGrid g = pair_grid();
  g.nx = 8;
  g.ny = 8;
  g.dwell_s = 1.0;
  ScanData sd = simulate_scan(s, g, {3}, 2);
  // order 2 missing
  CHECK_THROWS_AS(reconstruct(sd, s.detector, 2), Error);

  ScanData ok = simulate_scan(s, g, {2}, 2);
  ReconstructOptions opt;
  opt.eta_overrides = {{2, 0.0}};
  CHECK_THROWS_AS(reconstruct(ok, s.detector, 2, opt), Error);
  CHECK_THROWS_AS(reconstruct(ok, s.detector, 0), Error);
}
