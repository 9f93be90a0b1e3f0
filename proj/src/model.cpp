#include "qsi/model.hpp"

#include <cmath>
#include <string>

namespace qsi {

double emitter_rate(const Emitter& e, double phi_deg) {
  const double c = std::cos(deg2rad(phi_deg));
  return e.alpha_cps + e.beta_cps * c * c;
}

double psf_rate(const Emitter& e, double phi_deg, const Psf& psf, double x_nm, double y_nm) {
  const double dx = x_nm - e.x_nm;
  const double dy = y_nm - e.y_nm;
  const double s2 = 2.0 * psf.sigma_nm * psf.sigma_nm;
  return emitter_rate(e, phi_deg) * std::exp(-(dx * dx + dy * dy) / s2);
}

double expected_singles(const Scene& s, double x_nm, double y_nm) {
  double sum = s.detector.bg_cps;
  for (const auto& e : s.emitters) sum += psf_rate(e, s.pump_angle_deg, s.psf, x_nm, y_nm);
  return sum;
}

std::vector<double> emitter_rates_at(const Scene& s, double x_nm, double y_nm) {
  std::vector<double> rates;
  rates.reserve(s.emitters.size());
  for (const auto& e : s.emitters) rates.push_back(psf_rate(e, s.pump_angle_deg, s.psf, x_nm, y_nm));
  return rates;
}

double eta_2(const Detector& d, double r1_cps, double r2_cps) {
  if (!(r1_cps > 0.0) || !(r2_cps > 0.0))
    fail_validation("eta_2: both detector rates must be > 0");
  // Association chosen so equal rates with R = T = 1/2 give exactly 2 * t_w
  // and joint rate scaling cancels bit-for-bit.
  const double s = r1_cps + r2_cps;
  return 2.0 * tw_s(d) * ((r1_cps * r2_cps) / ((d.r * d.t) * (s * s)));
}

double eta_m_default(const Detector& d, int m) {
  if (m < 2) fail_validation("eta_m_default: order must be >= 2");
  double eta = 1.0;
  for (int i = 1; i < m; ++i) eta *= 2.0 * tw_s(d);
  return eta;
}

double accidental_rate(const Detector& d, double r1_cps, double r2_cps) {
  return 2.0 * tw_s(d) * r1_cps * r2_cps;
}

std::vector<double> esym(const std::vector<double>& values) {
  std::vector<double> e(values.size() + 1, 0.0);
  e[0] = 1.0;
  size_t j = 0;
  for (const double r : values) {
    ++j;
    for (size_t k = j; k >= 1; --k) e[k] += r * e[k - 1];
  }
  return e;
}

double expected_coincidences_m(const Scene& s, int m, double eta_m, double x_nm, double y_nm) {
  const int n = int(s.emitters.size());
  if (m < 1)
    fail_validation("expected_coincidences_m: order " + std::to_string(m) + " must be >= 1");
  const auto rates = emitter_rates_at(s, x_nm, y_nm);
  if (m == 1) {
    double sum = 0.0;
    for (double r : rates) sum += r;
    return sum;
  }
  // orders above the emitter count are legal; e_m vanishes there
  const double em = m > n ? 0.0 : esym(rates)[size_t(m)];
  double rate = eta_m * em * s.detector.capture_frac;
  if (m == 2) rate *= (1.0 + s.detector.k_bunch) * s.detector.r * s.detector.t;
  return rate;
}

double g2_tau(const std::vector<double>& rates, const Detector& d, double tau_ns) {
  double sum = 0.0, sq = 0.0;
  for (double r : rates) {
    sum += r;
    sq += r * r;
  }
  if (!(sum > 0.0)) fail_validation("g2_tau: all rates are zero");
  return 1.0 - (sq / (sum * sum)) * std::exp(-std::abs(tau_ns) / d.tau_a_ns);
}

}  // namespace qsi
