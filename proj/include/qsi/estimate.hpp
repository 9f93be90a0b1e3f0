#pragma once

#include <array>
#include <vector>

#include "qsi/reconstruct.hpp"
#include "qsi/simulate.hpp"

namespace qsi {

// Parameter order everywhere: (x0, y0, sigma_x, sigma_y, amplitude, offset).
struct Gaussian2DFit {
  double x0_nm = 0.0;
  double y0_nm = 0.0;
  double sigma_x_nm = 0.0;
  double sigma_y_nm = 0.0;
  double amplitude = 0.0;
  double offset = 0.0;
  std::array<double, 36> cov{};  // row-major 6x6
  double cost = 0.0;
  int iterations = 0;
  int n_pixels = 0;
};

struct FitGaussianOptions {
  const Image<double>* variance = nullptr;  // per-pixel variance; <=0 entries fall back
  const Image<uint8_t>* mask = nullptr;     // nonzero pixels participate
  int max_iterations = 200;
  double lambda0 = 1e-3;
  double rel_tol = 1e-10;
};

// Model value amp*exp(-dx^2/2sx^2 - dy^2/2sy^2) + off for theta =
// (x0, y0, sx, sy, amp, off); when grad is non-null also writes the six
// analytic partial derivatives. This is the exact evaluation the fit uses.
double gaussian2d_point(const double theta[6], double x_nm, double y_nm,
                        double grad[6] = nullptr);

Gaussian2DFit fit_gaussian2d(const Image<double>& img, const ScanGrid& grid,
                             const FitGaussianOptions& opt = {});

struct DistanceEstimate {
  double distance_nm = 0.0;
  double err_nm = 0.0;
};

DistanceEstimate estimate_distance(const Gaussian2DFit& a, const Gaussian2DFit& b);

struct PairDistance {
  Gaussian2DFit fit_a, fit_b;
  DistanceEstimate distance;
};

// Fit the first two emitter images over the labeled mask and propagate their
// centroid covariances into a distance.
PairDistance estimate_pair_distance(const EmitterImages& ei);

struct Cos2Fit {
  double alpha_cps = 0.0;
  double beta_cps = 0.0;
  double alpha_err = 0.0;
  double beta_err = 0.0;
  double cost = 0.0;
  int n_points = 0;
};

// Weighted least squares for rate(phi) = alpha + beta cos^2(phi). With
// measurement errors the covariance is unscaled; without, it is scaled by the
// residual variance.
Cos2Fit fit_cos2(const std::vector<double>& angles_deg, const std::vector<double>& rates_cps,
                 const std::vector<double>& errs_cps = {});

struct G2Fit {
  double g2_zero = 0.0;
  double g2_zero_err = 0.0;
  double tau_a_ns = 0.0;
  double tau_a_err = 0.0;
  double plateau_counts = 0.0;
  double cost = 0.0;
  int iterations = 0;
};

G2Fit fit_g2(const G2Histogram& hist);

struct BootstrapResult {
  double std_distance_nm = 0.0;
  int n_success = 0;
  int n_fail = 0;
  std::vector<double> distances_nm;
};

// Redraw every recorded count from a Poisson at its observed value, rerun the
// unmixing and localization, and spread the recovered distances.
BootstrapResult bootstrap_uncertainty(const ScanData& sd, const Detector& calib, int n_emitters,
                                      int n_resamples, const ReconstructOptions& ropt = {});

}  // namespace qsi
