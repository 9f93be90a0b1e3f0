#include "qsi/types.hpp"

#include <cmath>

namespace qsi {

namespace {
bool finite(double x) { return std::isfinite(x); }
}  // namespace

void validate(const Emitter& e) {
  if (!finite(e.x_nm) || !finite(e.y_nm) || !finite(e.alpha_cps) || !finite(e.beta_cps))
    fail_validation("emitter: non-finite field");
  if (e.alpha_cps < 0.0) fail_validation("emitter: alpha_cps must be >= 0");
  if (e.alpha_cps + e.beta_cps < 0.0)
    fail_validation("emitter: alpha_cps + beta_cps must be >= 0 (rate nonnegative at every angle)");
}

void validate(const Psf& p) {
  if (!(p.sigma_nm > 0.0) || !finite(p.sigma_nm)) fail_validation("psf: sigma_nm must be > 0");
}

void validate(const Detector& d) {
  if (!(d.r > 0.0) || !(d.r < 1.0) || !(d.t > 0.0) || !(d.t < 1.0))
    fail_validation("detector: r and t must lie strictly between 0 and 1");
  if (std::abs(d.r + d.t - 1.0) > 1e-12) fail_validation("detector: r + t must equal 1");
  if (!(d.tw_ns > 0.0)) fail_validation("detector: tw_ns must be > 0");
  if (!(d.tau_a_ns > 0.0)) fail_validation("detector: tau_a_ns must be > 0");
  if (!(d.capture_frac > 0.0) || d.capture_frac > 1.0)
    fail_validation("detector: capture_frac must lie in (0, 1]");
  if (d.k_bunch < 0.0) fail_validation("detector: k_bunch must be >= 0");
  if (d.bg_cps < 0.0) fail_validation("detector: bg_cps must be >= 0");
}

void validate(const ScanGrid& g) {
  if (!(g.pitch_nm > 0.0)) fail_validation("grid: pitch_nm must be > 0");
  if (g.nx < 1 || g.ny < 1) fail_validation("grid: nx and ny must be >= 1");
  if (!(g.dwell_s > 0.0)) fail_validation("grid: dwell_s must be > 0");
  if (!finite(g.x0_nm) || !finite(g.y0_nm)) fail_validation("grid: non-finite origin");
}

void validate(const Scene& s) {
  if (s.emitters.empty()) fail_validation("scene: at least one emitter required");
  for (const auto& e : s.emitters) validate(e);
  validate(s.psf);
  validate(s.detector);
  if (!finite(s.pump_angle_deg)) fail_validation("scene: non-finite pump angle");
}

}  // namespace qsi
