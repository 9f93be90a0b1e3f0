#pragma once

#include <vector>

#include "qsi/types.hpp"

namespace qsi {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * (kPi / 180.0); }
inline double tw_s(const Detector& d) { return d.tw_ns * 1e-9; }

// Detected rate of one emitter at focus for pump polarization angle phi.
double emitter_rate(const Emitter& e, double phi_deg);

// Same rate attenuated by the Gaussian confocal response at (x, y).
double psf_rate(const Emitter& e, double phi_deg, const Psf& psf, double x_nm, double y_nm);

// Background plus the sum of all per-emitter psf rates.
double expected_singles(const Scene& s, double x_nm, double y_nm);

// Per-emitter psf rates at one position, scene order.
std::vector<double> emitter_rates_at(const Scene& s, double x_nm, double y_nm);

// Pair-calibration constant from the two measured detector singles rates:
// 2 * t_w * r1 * r2 / (R * T * (r1 + r2)^2), in seconds.
double eta_2(const Detector& d, double r1_cps, double r2_cps);

// Default m-photon calibration (2 * t_w)^(m-1); the m = 2 value is what
// eta_2 reduces to when each arm sees its R/T share of the same light.
double eta_m_default(const Detector& d, int m);

// Start-stop accidental rate between two uncorrelated detector streams.
double accidental_rate(const Detector& d, double r1_cps, double r2_cps);

// Elementary symmetric polynomials e_0..e_N of the given values, by
// incremental product expansion (all-positive inputs stay cancellation-free).
std::vector<double> esym(const std::vector<double>& values);

// Expected order-m coincidence rate. m = 1 is the background-free singles
// sum; m = 2 carries the (1+K) R T factor; higher orders are
// eta_m * e_m * capture_frac.
double expected_coincidences_m(const Scene& s, int m, double eta_m, double x_nm, double y_nm);

// Normalized second-order correlation for independent antibunched emitters:
// 1 - (sum r_i^2) / (sum r_i)^2 * exp(-|tau| / tau_a).
double g2_tau(const std::vector<double>& rates, const Detector& d, double tau_ns);

}  // namespace qsi
