#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "qsi/simulate.hpp"
#include "qsi/types.hpp"

namespace qsi {

enum class PixelFlag : uint8_t {
  ok = 0,
  clamped_discriminant = 1,
  below_noise_floor = 2,
};

// Per-emitter intensity images recovered from moment grids. `images` and
// `variances` are parallel per-label grids; `labeled` marks pixels whose
// values came from root solving with a committed label (the fit domain) as
// opposed to displays filled from the nearest labeled pixel. In rate
// (noiseless) mode all variances are zero.
struct EmitterImages {
  ScanGrid grid;
  std::vector<Image<double>> images;
  std::vector<Image<double>> variances;
  Image<uint8_t> flags;
  Image<uint8_t> labeled;
};

struct PairSolution {
  double ia = 0.0;  // larger root
  double ib = 0.0;  // smaller root
  PixelFlag flag = PixelFlag::ok;
};

struct SymmetricSolution {
  std::vector<double> roots;  // descending
  PixelFlag flag = PixelFlag::ok;
};

struct ReconstructOptions {
  // Background singles rate; unset means take bg_cps from the calibration
  // detector, and if that is zero the lowest-decile estimate is NOT applied
  // (zero background is assumed explicitly).
  std::optional<double> bg_cps;
  // Calibration overrides for orders m >= 3; default (2 t_w)^(m-1).
  std::vector<std::pair<int, double>> eta_overrides;
  // Significance thresholds, in sigmas of the propagated statistics.
  double pair_bar = 3.0;   // coincidence signal above the accidental noise
  double split_bar = 8.0;  // root separation, admits a pixel to the domain
  double solid_bar = 5.0;  // root separation, anchors label components
  // Below this many pixels with an unambiguous per-pixel split the fit
  // domain falls back to the singles e^-2 contour (individual splits carry
  // no usable orientation signal, but the aggregate still does).
  int min_split_px = 48;
};

// (singles_d1 + singles_d2) / dwell - bg, clamped at 0. With bg_cps unset the
// background is estimated as the mean of the lowest-decile pixels.
Image<double> subtract_background(const ScanData& sd, std::optional<double> bg_cps);

// Roots of t^2 - s1 t + p2, as (larger, smaller). A negative discriminant is
// noise: both roots become s1/2, flagged clamped_discriminant.
PairSolution solve_pair(double s1, double p2);

// Roots of t^N - e1 t^(N-1) + ... +- eN from the elementary symmetric values
// e1..eN, sorted descending. Complex-conjugate noise pairs collapse to their
// shared real part; negative roots clamp to 0 with the largest root adjusted
// to preserve e1. Either repair flags the result.
SymmetricSolution solve_symmetric(const std::vector<double>& e1_to_eN);

// Count-mode inversion of a measured scan into labeled per-emitter images.
EmitterImages reconstruct(const ScanData& sd, const Detector& calib, int n_emitters,
                          const ReconstructOptions& opt = {});

// Rate-mode inversion (noiseless expectations instead of counts): same
// pipeline with zero variances; flags reduce to "no pair signal here".
EmitterImages reconstruct_rates(const Image<double>& singles_cps,
                                const std::vector<std::pair<int, Image<double>>>& coincidences_cps,
                                const ScanGrid& grid, const Detector& calib, int n_emitters,
                                const ReconstructOptions& opt = {});

}  // namespace qsi
