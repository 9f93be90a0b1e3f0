#include "qsi/estimate.hpp"

#include "qsi/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

namespace qsi {

namespace {

struct LmOutcome {
  Eigen::VectorXd theta;
  Eigen::MatrixXd normal;  // J^T W J at the solution, undamped
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Damped least squares: the normal-matrix diagonal is inflated by (1+lambda),
// lambda falls tenfold on acceptance and grows tenfold on rejection, and the
// loop stops once an accepted step changes the cost by less than rel_tol.
LmOutcome lm_minimize(
    const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd&)>& eval,
    Eigen::VectorXd theta, const Eigen::VectorXd& w, int max_iterations, double lambda0,
    double rel_tol) {
  const int p = int(theta.size());
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  eval(theta, r, jac);
  double cost = (w.array() * r.array().square()).sum();

  LmOutcome out;
  double lambda = lambda0;
  bool converged = cost == 0.0;
  int it = 0;
  while (it < max_iterations && !converged) {
    ++it;
    const Eigen::MatrixXd a = jac.transpose() * w.asDiagonal() * jac;
    const Eigen::VectorXd g = jac.transpose() * (w.asDiagonal() * r);
    Eigen::MatrixXd ad = a;
    for (int j = 0; j < p; ++j) ad(j, j) = a(j, j) * (1.0 + lambda) + 1e-300;
    const Eigen::VectorXd delta = ad.ldlt().solve(-g);
    if (!delta.allFinite()) {
      lambda *= 10.0;
      if (lambda > 1e15) converged = true;
      continue;
    }
    const Eigen::VectorXd theta2 = theta + delta;
    Eigen::VectorXd r2;
    Eigen::MatrixXd jac2;
    eval(theta2, r2, jac2);
    const double cost2 = (w.array() * r2.array().square()).sum();
    if (std::isfinite(cost2) && cost2 < cost) {
      const double rel = (cost - cost2) / std::max(cost, 1e-300);
      theta = theta2;
      r = std::move(r2);
      jac = std::move(jac2);
      cost = cost2;
      lambda = std::max(lambda * 0.1, 1e-15);
      if (rel < rel_tol || cost == 0.0) converged = true;
    } else {
      lambda *= 10.0;
      if (lambda > 1e15) converged = true;  // no downhill direction left
    }
  }
  out.theta = std::move(theta);
  out.normal = jac.transpose() * w.asDiagonal() * jac;
  out.cost = cost;
  out.iterations = it;
  out.converged = converged;
  return out;
}

double percentile_75(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double h = 0.75 * double(v.size() - 1);
  const size_t lo = size_t(h);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double gaussian2d_point(const double theta[6], double x_nm, double y_nm, double grad[6]) {
  const double x0 = theta[0], y0 = theta[1];
  const double sx = std::abs(theta[2]) > 1e-12 ? theta[2] : 1e-12;
  const double sy = std::abs(theta[3]) > 1e-12 ? theta[3] : 1e-12;
  const double amp = theta[4], off = theta[5];
  const double dx = x_nm - x0;
  const double dy = y_nm - y0;
  const double e = std::exp(-0.5 * (dx * dx) / (sx * sx) - 0.5 * (dy * dy) / (sy * sy));
  if (grad) {
    const double ae = amp * e;
    grad[0] = ae * dx / (sx * sx);
    grad[1] = ae * dy / (sy * sy);
    grad[2] = ae * dx * dx / (sx * sx * sx);
    grad[3] = ae * dy * dy / (sy * sy * sy);
    grad[4] = e;
    grad[5] = 1.0;
  }
  return amp * e + off;
}

Gaussian2DFit fit_gaussian2d(const Image<double>& img, const ScanGrid& grid,
                             const FitGaussianOptions& opt) {
  validate(grid);
  if (img.nx != grid.nx || img.ny != grid.ny)
    fail_validation("fit_gaussian2d: image dimensions do not match the grid");
  if (opt.mask && (opt.mask->nx != grid.nx || opt.mask->ny != grid.ny))
    fail_validation("fit_gaussian2d: mask dimensions do not match the grid");
  if (opt.variance && (opt.variance->nx != grid.nx || opt.variance->ny != grid.ny))
    fail_validation("fit_gaussian2d: variance dimensions do not match the grid");

  std::vector<double> xs, ys, vs, ws;
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const size_t p = size_t(iy) * grid.nx + ix;
      if (opt.mask && !(*opt.mask)[p]) continue;
      const double v = img[p];
      if (!std::isfinite(v)) fail_validation("fit_gaussian2d: non-finite pixel value");
      xs.push_back(grid.x_at(ix));
      ys.push_back(grid.y_at(iy));
      vs.push_back(v);
      double var = 0.0;
      if (opt.variance) var = (*opt.variance)[p];
      if (!(var > 0.0)) var = std::max(v, 1.0);  // Poisson fallback
      ws.push_back(1.0 / var);
    }
  const int n = int(vs.size());
  if (n < 7) fail_validation("fit_gaussian2d: needs at least 7 pixels, got " + std::to_string(n));

  // moment-based start
  const double off0 = *std::min_element(vs.begin(), vs.end());
  const double vmax = *std::max_element(vs.begin(), vs.end());
  const double amp0 = vmax - off0;
  if (!(amp0 > 0.0)) fail_validation("fit_gaussian2d: image has no contrast");
  std::vector<double> excess(vs.size());
  for (size_t i = 0; i < vs.size(); ++i) excess[i] = std::max(vs[i] - off0, 0.0);
  const double thr = percentile_75(excess);
  double tw = 0.0, twx = 0.0, twy = 0.0;
  for (size_t i = 0; i < vs.size(); ++i) {
    if (excess[i] < thr) continue;
    tw += excess[i];
    twx += excess[i] * xs[i];
    twy += excess[i] * ys[i];
  }
  if (tw <= 0.0) {
    for (size_t i = 0; i < vs.size(); ++i) {
      tw += excess[i];
      twx += excess[i] * xs[i];
      twy += excess[i] * ys[i];
    }
  }
  const double cx0 = tw > 0.0 ? twx / tw : xs[size_t(n / 2)];
  const double cy0 = tw > 0.0 ? twy / tw : ys[size_t(n / 2)];
  double ew = 0.0, exx = 0.0, eyy = 0.0;
  for (size_t i = 0; i < vs.size(); ++i) {
    ew += excess[i];
    exx += excess[i] * (xs[i] - cx0) * (xs[i] - cx0);
    eyy += excess[i] * (ys[i] - cy0) * (ys[i] - cy0);
  }
  const double sig_floor = std::max(grid.pitch_nm / 2.0, 1.0);
  const double sx0 = std::max(ew > 0.0 ? std::sqrt(exx / ew) : sig_floor, sig_floor);
  const double sy0 = std::max(ew > 0.0 ? std::sqrt(eyy / ew) : sig_floor, sig_floor);

  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = ws[size_t(i)];

  const auto eval = [&](const Eigen::VectorXd& th, Eigen::VectorXd& r, Eigen::MatrixXd& jac) {
    const double theta[6] = {th[0], th[1], th[2], th[3], th[4], th[5]};
    r.resize(n);
    jac.resize(n, 6);
    double g[6];
    for (int i = 0; i < n; ++i) {
      r[i] = gaussian2d_point(theta, xs[size_t(i)], ys[size_t(i)], g) - vs[size_t(i)];
      for (int j = 0; j < 6; ++j) jac(i, j) = g[j];
    }
  };

  Eigen::VectorXd theta0(6);
  theta0 << cx0, cy0, sx0, sy0, amp0, off0;
  const LmOutcome lm =
      lm_minimize(eval, theta0, w, opt.max_iterations, opt.lambda0, opt.rel_tol);
  if (!lm.converged)
    fail_non_convergence("fit_gaussian2d: no convergence after " +
                         std::to_string(lm.iterations) + " iterations");

  Gaussian2DFit fit;
  fit.x0_nm = lm.theta[0];
  fit.y0_nm = lm.theta[1];
  fit.sigma_x_nm = std::abs(lm.theta[2]);
  fit.sigma_y_nm = std::abs(lm.theta[3]);
  fit.amplitude = lm.theta[4];
  fit.offset = lm.theta[5];
  fit.cost = lm.cost;
  fit.iterations = lm.iterations;
  fit.n_pixels = n;
  const double scale = lm.cost / double(n - 6);
  const Eigen::MatrixXd cov = scale * lm.normal.fullPivLu().inverse();
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) fit.cov[size_t(i * 6 + j)] = cov(i, j);
  return fit;
}

DistanceEstimate estimate_distance(const Gaussian2DFit& a, const Gaussian2DFit& b) {
  const double dx = b.x0_nm - a.x0_nm;
  const double dy = b.y0_nm - a.y0_nm;
  const double d = std::hypot(dx, dy);
  DistanceEstimate out;
  out.distance_nm = d;
  const double diag_sum = a.cov[0] + a.cov[7] + b.cov[0] + b.cov[7];
  if (d < 1e-12) {
    out.err_nm = std::sqrt(std::max(diag_sum, 0.0) / 2.0);
    return out;
  }
  double var_d = 0.0;
  for (const Gaussian2DFit* f : {&a, &b})
    var_d += (dx * dx * f->cov[0] + 2.0 * dx * dy * f->cov[1] + dy * dy * f->cov[7]) / (d * d);
  out.err_nm = std::sqrt(std::max(var_d, 0.0));
  return out;
}

PairDistance estimate_pair_distance(const EmitterImages& ei) {
  if (ei.images.size() < 2)
    fail_validation("estimate_pair_distance: needs two emitter images");
  PairDistance out;
  for (int k = 0; k < 2; ++k) {
    FitGaussianOptions opt;
    opt.mask = &ei.labeled;
    bool any_var = false;
    if (ei.variances.size() > size_t(k))
      for (size_t p = 0; p < ei.variances[size_t(k)].size() && !any_var; ++p)
        any_var = ei.variances[size_t(k)][p] > 0.0;
    if (any_var) opt.variance = &ei.variances[size_t(k)];
    Gaussian2DFit& dst = k == 0 ? out.fit_a : out.fit_b;
    dst = fit_gaussian2d(ei.images[size_t(k)], ei.grid, opt);
  }
  out.distance = estimate_distance(out.fit_a, out.fit_b);
  return out;
}

Cos2Fit fit_cos2(const std::vector<double>& angles_deg, const std::vector<double>& rates_cps,
                 const std::vector<double>& errs_cps) {
  const int n = int(angles_deg.size());
  if (n < 3) fail_validation("fit_cos2: needs at least 3 points");
  if (int(rates_cps.size()) != n) fail_validation("fit_cos2: angle and rate counts differ");
  const bool have_errs = !errs_cps.empty();
  if (have_errs && int(errs_cps.size()) != n)
    fail_validation("fit_cos2: angle and error counts differ");

  std::vector<double> x(size_t(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const double c = std::cos(deg2rad(angles_deg[size_t(i)]));
    x[size_t(i)] = c * c;
  }
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  if (*mx - *mn < 1e-9)
    fail_validation("fit_cos2: angles give a degenerate design, need distinct cos^2 values");

  Eigen::MatrixXd design(n, 2);
  Eigen::VectorXd y(n), w(n);
  for (int i = 0; i < n; ++i) {
    design(i, 0) = 1.0;
    design(i, 1) = x[size_t(i)];
    y[i] = rates_cps[size_t(i)];
    if (have_errs) {
      const double e = errs_cps[size_t(i)];
      if (!(e > 0.0)) fail_validation("fit_cos2: errors must be > 0");
      w[i] = 1.0 / (e * e);
    } else {
      w[i] = 1.0;
    }
  }
  const Eigen::MatrixXd a = design.transpose() * w.asDiagonal() * design;
  const Eigen::VectorXd b = design.transpose() * (w.asDiagonal() * y);
  const Eigen::VectorXd beta = a.ldlt().solve(b);
  const Eigen::VectorXd resid = design * beta - y;
  const double rss = (w.array() * resid.array().square()).sum();
  Eigen::MatrixXd cov = a.inverse();
  if (!have_errs) cov *= rss / double(n - 2);

  Cos2Fit fit;
  fit.alpha_cps = beta[0];
  fit.beta_cps = beta[1];
  fit.alpha_err = std::sqrt(std::max(cov(0, 0), 0.0));
  fit.beta_err = std::sqrt(std::max(cov(1, 1), 0.0));
  fit.cost = rss;
  fit.n_points = n;
  return fit;
}

G2Fit fit_g2(const G2Histogram& hist) {
  const int nb = int(hist.counts.size());
  if (nb < 8 || int(hist.tau_ns.size()) != nb)
    fail_validation("fit_g2: histogram needs at least 8 consistent bins");

  // plateau from the outer quarter of |tau|
  std::vector<int> idx(size_t(nb), 0);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return std::abs(hist.tau_ns[size_t(a)]) < std::abs(hist.tau_ns[size_t(b)]);
  });
  const int n_outer = std::max(1, nb / 4);
  double plateau = 0.0;
  for (int i = nb - n_outer; i < nb; ++i) plateau += double(hist.counts[size_t(idx[size_t(i)])]);
  plateau /= double(n_outer);
  if (plateau < 10.0)
    fail_validation("fit_g2: plateau averages fewer than 10 counts per bin");

  std::vector<double> tau(size_t(nb), 0.0);
  Eigen::VectorXd w(nb);
  std::vector<double> g(size_t(nb), 0.0);
  double tau_max = 0.0, g_center = 1.0, center_tau = std::numeric_limits<double>::infinity();
  for (int i = 0; i < nb; ++i) {
    tau[size_t(i)] = std::abs(hist.tau_ns[size_t(i)]);
    tau_max = std::max(tau_max, tau[size_t(i)]);
    g[size_t(i)] = double(hist.counts[size_t(i)]) / plateau;
    w[i] = plateau * plateau / double(std::max<int64_t>(hist.counts[size_t(i)], 1));
    if (tau[size_t(i)] < center_tau) {
      center_tau = tau[size_t(i)];
      g_center = g[size_t(i)];
    }
  }

  const int n = nb;
  const auto eval = [&](const Eigen::VectorXd& th, Eigen::VectorXd& r, Eigen::MatrixXd& jac) {
    const double c = th[0];
    const double ta = std::max(th[1], hist.bin_width_ns * 1e-6);
    r.resize(n);
    jac.resize(n, 2);
    for (int i = 0; i < n; ++i) {
      const double e = std::exp(-tau[size_t(i)] / ta);
      r[i] = (1.0 - c * e) - g[size_t(i)];
      jac(i, 0) = -e;
      jac(i, 1) = -c * e * tau[size_t(i)] / (ta * ta);
    }
  };

  Eigen::VectorXd theta0(2);
  theta0 << std::clamp(1.0 - g_center, 1e-3, 2.0), std::max(tau_max / 10.0, hist.bin_width_ns);
  const LmOutcome lm = lm_minimize(eval, theta0, w, 200, 1e-3, 1e-10);
  if (!lm.converged)
    fail_non_convergence("fit_g2: no convergence after " + std::to_string(lm.iterations) +
                         " iterations");

  const double scale = lm.cost / double(std::max(n - 2, 1));
  const Eigen::MatrixXd cov = scale * lm.normal.fullPivLu().inverse();
  G2Fit fit;
  fit.g2_zero = 1.0 - lm.theta[0];
  fit.g2_zero_err = std::sqrt(std::max(cov(0, 0), 0.0));
  fit.tau_a_ns = std::max(lm.theta[1], hist.bin_width_ns * 1e-6);
  fit.tau_a_err = std::sqrt(std::max(cov(1, 1), 0.0));
  fit.plateau_counts = plateau;
  fit.cost = lm.cost;
  fit.iterations = lm.iterations;
  return fit;
}

BootstrapResult bootstrap_uncertainty(const ScanData& sd, const Detector& calib, int n_emitters,
                                      int n_resamples, const ReconstructOptions& ropt) {
  if (n_resamples < 2) fail_validation("bootstrap_uncertainty: needs at least 2 resamples");

  const auto resample_grid = [&](Image<int64_t>& img, uint32_t channel, int k) {
    for (size_t p = 0; p < img.size(); ++p) {
      if (img[p] <= 0) continue;
      Stream st(sd.seed, p, kChannelResampleBase + channel, uint32_t(k + 1));
      img[p] = st.poisson(double(img[p]));
    }
  };

  BootstrapResult out;
  for (int k = 0; k < n_resamples; ++k) {
    ScanData sd2 = sd;
    resample_grid(sd2.singles_d1, kChannelD1, k);
    resample_grid(sd2.singles_d2, kChannelD2, k);
    for (auto& [m, img] : sd2.coincidences) resample_grid(img, uint32_t(m), k);
    try {
      const EmitterImages ei = reconstruct(sd2, calib, n_emitters, ropt);
      const PairDistance pd = estimate_pair_distance(ei);
      out.distances_nm.push_back(pd.distance.distance_nm);
      ++out.n_success;
    } catch (const Error&) {
      ++out.n_fail;
    }
  }
  if (out.n_success < 2 || double(out.n_success) < 0.8 * double(n_resamples))
    fail_runtime("bootstrap_uncertainty: only " + std::to_string(out.n_success) + " of " +
                 std::to_string(n_resamples) + " resamples succeeded");

  const double mean = std::accumulate(out.distances_nm.begin(), out.distances_nm.end(), 0.0) /
                      double(out.n_success);
  double ss = 0.0;
  for (const double d : out.distances_nm) ss += (d - mean) * (d - mean);
  out.std_distance_nm = std::sqrt(ss / double(out.n_success - 1));
  return out;
}

}  // namespace qsi
