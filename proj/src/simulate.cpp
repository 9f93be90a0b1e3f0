#include "qsi/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <queue>
#include <string>

#include "qsi/rng.hpp"

namespace qsi {

namespace {

struct PixelDraw {
  int64_t d1 = 0;
  int64_t d2 = 0;
  std::vector<int64_t> cm;
};

// One pixel's worth of Poisson draws; `unit` keys the per-pixel stream so
// results are independent of pixel visiting order.
PixelDraw sample_pixel(const Scene& s, double x, double y, double phi_deg, double dwell,
                       const std::vector<int>& orders, uint64_t seed, uint64_t unit) {
  const Detector& d = s.detector;
  double lam1 = d.bg_cps;
  std::vector<double> rates;
  rates.reserve(s.emitters.size());
  for (const auto& e : s.emitters) {
    const double r = psf_rate(e, phi_deg, s.psf, x, y);
    rates.push_back(r);
    lam1 += r;
  }

  PixelDraw out;
  out.d1 = Stream(seed, unit, kChannelD1).poisson(d.t * lam1 * dwell);
  out.d2 = Stream(seed, unit, kChannelD2).poisson(d.r * lam1 * dwell);

  const auto e = esym(rates);
  out.cm.reserve(orders.size());
  for (const int m : orders) {
    const double em = size_t(m) < e.size() ? e[size_t(m)] : 0.0;
    double lam = eta_m_default(d, m) * em * d.capture_frac;
    if (m == 2) {
      lam *= (1.0 + d.k_bunch) * d.r * d.t;
      lam += accidental_rate(d, d.t * lam1, d.r * lam1);
    }
    out.cm.push_back(Stream(seed, unit, uint32_t(m)).poisson(lam * dwell));
  }
  return out;
}

// Orders above the emitter count are legal: e_m vanishes there, leaving only
// the accidental floor (m = 2) or nothing.
void validate_orders(const std::vector<int>& orders) {
  for (const int m : orders)
    if (m < 2) fail_validation("simulate: coincidence order must be >= 2");
}

}  // namespace

ScanData simulate_scan(const Scene& s, const ScanGrid& g, const std::vector<int>& orders,
                       uint64_t seed) {
  validate(s);
  validate(g);
  validate_orders(orders);

  ScanData sd;
  sd.grid = g;
  sd.singles_d1 = Image<int64_t>(g.nx, g.ny);
  sd.singles_d2 = Image<int64_t>(g.nx, g.ny);
  for (const int m : orders) sd.coincidences.emplace_back(m, Image<int64_t>(g.nx, g.ny));
  sd.pump_angle_deg = s.pump_angle_deg;
  sd.seed = seed;
  sd.detector = s.detector;

  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) {
      const uint64_t unit = uint64_t(iy) * uint64_t(g.nx) + uint64_t(ix);
      const PixelDraw pd = sample_pixel(s, g.x_at(ix), g.y_at(iy), s.pump_angle_deg, g.dwell_s,
                                        orders, seed, unit);
      sd.singles_d1[unit] = pd.d1;
      sd.singles_d2[unit] = pd.d2;
      for (size_t k = 0; k < orders.size(); ++k) sd.coincidences[k].second[unit] = pd.cm[k];
    }
  }
  return sd;
}

G2Histogram simulate_g2(const Scene& s, double x_nm, double y_nm, double duration_s,
                        double bin_width_ns, uint64_t seed) {
  validate(s);
  if (!(duration_s > 0.0)) fail_validation("simulate_g2: duration must be > 0");
  if (!(bin_width_ns > 0.0)) fail_validation("simulate_g2: bin width must be > 0");

  const Detector& det = s.detector;
  const auto rates = emitter_rates_at(s, x_nm, y_nm);
  double total = det.bg_cps;
  for (double r : rates) total += r;
  if (!(total > 0.0)) fail_validation("simulate_g2: zero total rate at the query point");

  const double tau_a_s = det.tau_a_ns * 1e-9;
  const double span_ns = std::max(10.0 * det.tau_a_ns, 5.0 * bin_width_ns);
  const int half_bins = int(std::ceil(span_ns / bin_width_ns));
  const double span_s = half_bins * bin_width_ns * 1e-9;

  G2Histogram h;
  h.bin_width_ns = bin_width_ns;
  h.tau_ns.resize(size_t(2 * half_bins + 1));
  h.counts.assign(size_t(2 * half_bins + 1), 0);
  for (int k = -half_bins; k <= half_bins; ++k) h.tau_ns[size_t(k + half_bins)] = k * bin_width_ns;

  // Per-source event generators merged in time order. Each emitter is a
  // renewal process thinned by 1 - exp(-gap/tau_a); background is unthinned.
  struct Source {
    Stream st;
    double rate = 0.0;
    double t_next = 0.0;
    double t_last = -1.0;
    bool thinned = true;
  };
  std::vector<Source> sources;
  for (size_t i = 0; i < rates.size(); ++i) {
    if (!(rates[i] > 0.0)) continue;
    Source src{Stream(seed, 0, kChannelEmitterBase + uint32_t(i)), rates[i], 0.0, -1.0, true};
    src.t_next = src.st.exponential() / src.rate;
    sources.push_back(std::move(src));
  }
  if (det.bg_cps > 0.0) {
    Source src{Stream(seed, 0, kChannelBg), det.bg_cps, 0.0, -1.0, false};
    src.t_next = src.st.exponential() / src.rate;
    sources.push_back(std::move(src));
  }

  struct Event {
    double t;
    bool is_d1;
  };
  std::deque<Event> window;

  const auto next_source = [&]() {
    size_t best = 0;
    for (size_t i = 1; i < sources.size(); ++i)
      if (sources[i].t_next < sources[best].t_next) best = i;
    return best;
  };

  while (true) {
    const size_t si = next_source();
    Source& src = sources[si];
    const double t = src.t_next;
    if (t >= duration_s) break;
    src.t_next = t + src.st.exponential() / src.rate;

    bool accept = true;
    if (src.thinned) {
      const double gap = (src.t_last < 0.0) ? 1e9 : t - src.t_last;
      accept = src.st.u01() < -std::expm1(-gap / tau_a_s);
    }
    if (!accept) continue;
    src.t_last = t;

    const bool is_d1 = src.st.u01() < det.t;
    if (is_d1) ++h.total_starts;

    while (!window.empty() && t - window.front().t > span_s) window.pop_front();
    for (const Event& w : window) {
      if (w.is_d1 == is_d1) continue;
      // signed delay: D2 time minus D1 time
      const double tau_s = is_d1 ? (w.t - t) : (t - w.t);
      const int k = int(std::lround(tau_s * 1e9 / bin_width_ns));
      if (k >= -half_bins && k <= half_bins) ++h.counts[size_t(k + half_bins)];
    }
    window.push_back({t, is_d1});
  }
  return h;
}

SweepTable simulate_polarization_sweep(const Scene& s, double x_nm, double y_nm,
                                       const std::vector<double>& angles_deg, double dwell_s,
                                       uint64_t seed) {
  validate(s);
  if (angles_deg.empty()) fail_validation("simulate_polarization_sweep: empty angle list");
  if (!(dwell_s > 0.0)) fail_validation("simulate_polarization_sweep: dwell must be > 0");
  const std::vector<int> orders = {2};

  SweepTable table;
  table.reserve(angles_deg.size());
  for (size_t j = 0; j < angles_deg.size(); ++j) {
    const PixelDraw pd =
        sample_pixel(s, x_nm, y_nm, angles_deg[j], dwell_s, orders, seed, uint64_t(j));
    table.push_back({angles_deg[j], pd.d1, pd.d2, pd.cm[0]});
  }
  return table;
}

}  // namespace qsi
