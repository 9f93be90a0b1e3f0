#include "qsi/reconstruct.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <deque>
#include <queue>
#include <limits>
#include <numeric>
#include <string>

namespace qsi {

namespace {

constexpr double kTiny = 1e-300;
constexpr double kDerivClip = 1e12;   // caps 1/sqrt(D) blowup near degeneracy
constexpr double kVarLo = 1e-300;
constexpr double kVarHi = 1e30;

// Compensated discriminant s1^2 - 4 p2: the fma term recovers the low half
// of s1^2 so near-degenerate pixels keep a meaningful sign.
double discriminant(double s1, double p2) {
  const double p = s1 * s1;
  const double dp = std::fma(s1, s1, -p);
  return (p - 4.0 * p2) + dp;
}

struct PairGrids {
  Image<double> s1, sub, acc, p2, hi, lo, var_s1, var_p2, sig_split;
  Image<uint8_t> clamped, pair_sig, split_sig, solid, domain;
  int nx = 0, ny = 0;
};

// Neighbor visit order shared by every BFS here; fixed so results do not
// depend on container internals.
constexpr int kNbrDx[4] = {1, -1, 0, 0};
constexpr int kNbrDy[4] = {0, 0, 1, -1};

// Orientation assignment for noisy two-emitter data: connected components of
// unambiguous (solid) pixels each get one hi/lo orientation bit; the largest
// anchors the convention and the rest greedily minimize the summed
// intensity-weighted spatial variance of both assembled images (the compact
// single-blob configuration). Remaining domain pixels attach by multi-source
// BFS. Returns +1 / -1 on oriented pixels, 0 elsewhere.
Image<int8_t> orient_components(const PairGrids& pg) {
  const int nx = pg.nx, ny = pg.ny;
  const size_t npx = size_t(nx) * size_t(ny);
  Image<int8_t> lab(nx, ny, 0);

  // components of unambiguous in-domain pixels, 4-connected, discovered in
  // raster order
  const auto anchors = [&](size_t p) { return pg.solid[p] && pg.domain[p]; };
  std::vector<int> comp(npx, -1);
  std::vector<std::vector<size_t>> members;
  for (size_t start = 0; start < npx; ++start) {
    if (!anchors(start) || comp[start] >= 0) continue;
    const int id = int(members.size());
    members.emplace_back();
    std::deque<size_t> q{start};
    comp[start] = id;
    while (!q.empty()) {
      const size_t p = q.front();
      q.pop_front();
      members[size_t(id)].push_back(p);
      const int ix = int(p % size_t(nx)), iy = int(p / size_t(nx));
      for (int k = 0; k < 4; ++k) {
        const int jx = ix + kNbrDx[k], jy = iy + kNbrDy[k];
        if (jx < 0 || jx >= nx || jy < 0 || jy >= ny) continue;
        const size_t pj = size_t(jy) * nx + jx;
        if (anchors(pj) && comp[pj] < 0) {
          comp[pj] = id;
          q.push_back(pj);
        }
      }
    }
  }
  if (members.empty()) {
    // no solid pixel anywhere: canonical hi -> first image on the domain
    for (size_t p = 0; p < npx; ++p)
      if (pg.domain[p]) lab[p] = 1;
    return lab;
  }

  std::vector<int> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return members[size_t(a)].size() > members[size_t(b)].size();
  });

  std::vector<int8_t> bit(members.size(), 0);
  bit[size_t(order[0])] = 1;
  // weighted spatial variance of one assembled image over the pixels of the
  // already-oriented components plus the candidate
  const auto spatial_var = [&](const std::vector<int>& comps, const std::vector<int8_t>& bits,
                               int take_hi_sign) {
    double w_sum = 0.0, wx = 0.0, wy = 0.0, wxx = 0.0, wyy = 0.0;
    for (const int c : comps) {
      for (const size_t p : members[size_t(c)]) {
        const double val = (bits[size_t(c)] * take_hi_sign > 0) ? pg.hi[p] : pg.lo[p];
        const double w = std::max(val, 0.0);
        const double x = double(p % size_t(nx)), y = double(p / size_t(nx));
        w_sum += w;
        wx += w * x;
        wy += w * y;
        wxx += w * x * x;
        wyy += w * y * y;
      }
    }
    if (w_sum <= 0.0) return 0.0;
    const double cx = wx / w_sum, cy = wy / w_sum;
    return (wxx + wyy) / w_sum - cx * cx - cy * cy;
  };

  std::vector<int> placed{order[0]};
  for (size_t oi = 1; oi < order.size(); ++oi) {
    const int c = order[oi];
    placed.push_back(c);
    double best_j = std::numeric_limits<double>::infinity();
    int8_t best_b = 1;
    for (const int8_t b : {int8_t(1), int8_t(-1)}) {
      bit[size_t(c)] = b;
      const double j = spatial_var(placed, bit, +1) + spatial_var(placed, bit, -1);
      if (j < best_j) {
        best_j = j;
        best_b = b;
      }
    }
    bit[size_t(c)] = best_b;
  }

  for (size_t ci = 0; ci < members.size(); ++ci)
    for (const size_t p : members[ci]) lab[p] = bit[ci];

  // attach the remaining domain pixels to the nearest oriented region
  std::deque<size_t> q;
  for (size_t p = 0; p < npx; ++p)
    if (lab[p] != 0) q.push_back(p);
  while (!q.empty()) {
    const size_t p = q.front();
    q.pop_front();
    const int ix = int(p % size_t(nx)), iy = int(p / size_t(nx));
    for (int k = 0; k < 4; ++k) {
      const int jx = ix + kNbrDx[k], jy = iy + kNbrDy[k];
      if (jx < 0 || jx >= nx || jy < 0 || jy >= ny) continue;
      const size_t pj = size_t(jy) * nx + jx;
      if (pg.domain[pj] && lab[pj] == 0) {
        lab[pj] = lab[p];
        q.push_back(pj);
      }
    }
  }
  return lab;
}

std::vector<std::vector<int>> permutations(int n) {
  std::vector<int> idx(size_t(n), 0);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::vector<int>> out;
  do {
    out.push_back(idx);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return out;
}

// roots_px: per-pixel descending roots (n per pixel); in_domain: mask.
// Returns per-pixel permutation index into permutations(n), or -1 off-domain.
//
// Confidence-ordered flood. A committed pixel fixes which root belongs to
// which image slot; a frontier pixel's slot values are predicted from its
// committed neighbors by log-linear extrapolation (the fields decay
// near-exponentially, so the geometric trend holds both in the deep tails and
// through root crossings, where nearest-value matching glues the wrong
// identities together). Pixels whose best permutation wins by the widest
// margin commit first, so ambiguous pixels near a crossing wait until
// committed context surrounds them.
std::vector<int> flood_match_labels(const std::vector<std::vector<double>>& roots_px,
                                    const Image<uint8_t>& in_domain, int nx, int ny, int n) {
  const size_t npx = size_t(nx) * size_t(ny);
  const auto perms = permutations(n);
  std::vector<int> choice(npx, -1);

  std::vector<std::vector<double>> lg(npx);
  for (size_t p = 0; p < npx; ++p) {
    lg[p].reserve(roots_px[p].size());
    for (const double r : roots_px[p]) lg[p].push_back(std::log(std::max(r, 1e-300)));
  }

  struct Cand {
    int pick = 0;
    double margin = -1.0;
    bool informed = false;
    bool chained = false;
  };
  const auto evaluate = [&](size_t pj) {
    Cand c;
    const int jx = int(pj % size_t(nx)), jy = int(pj / size_t(nx));
    std::vector<double> chain(size_t(n), 0.0), copy(size_t(n), 0.0);
    int chain_cnt = 0, copy_cnt = 0;
    for (int k = 0; k < 4; ++k) {
      const int lx = jx + kNbrDx[k], ly = jy + kNbrDy[k];
      if (lx < 0 || lx >= nx || ly < 0 || ly >= ny) continue;
      const size_t pl = size_t(ly) * nx + lx;
      if (choice[pl] < 0) continue;
      const auto& perm = perms[size_t(choice[pl])];
      const int bx = jx + 2 * kNbrDx[k], by = jy + 2 * kNbrDy[k];
      const std::vector<int>* behind = nullptr;
      size_t pb = 0;
      if (bx >= 0 && bx < nx && by >= 0 && by < ny) {
        pb = size_t(by) * nx + bx;
        if (choice[pb] >= 0) behind = &perms[size_t(choice[pb])];
      }
      for (int j = 0; j < n; ++j) {
        const double v = lg[pl][size_t(perm[size_t(j)])];
        if (behind)
          chain[size_t(j)] += 2.0 * v - lg[pb][size_t((*behind)[size_t(j)])];
        else
          copy[size_t(j)] += v;
      }
      (behind ? chain_cnt : copy_cnt) += 1;
    }
    if (chain_cnt + copy_cnt == 0) return c;
    c.informed = true;
    c.chained = chain_cnt > 0;
    // a straight committed run behind a neighbor extrapolates each branch
    // through value crossings; plain copies cannot, so they only count when
    // no run reaches this pixel
    const auto& pred = c.chained ? chain : copy;
    const int cnt = c.chained ? chain_cnt : copy_cnt;
    double best = std::numeric_limits<double>::infinity(), second = best;
    for (size_t pi = 0; pi < perms.size(); ++pi) {
      double dsum = 0.0;
      for (int j = 0; j < n; ++j) {
        const double dv = lg[pj][size_t(perms[pi][size_t(j)])] - pred[size_t(j)] / cnt;
        dsum += dv * dv;
      }
      if (dsum < best) {
        second = best;
        best = dsum;
        c.pick = int(pi);
      } else if (dsum < second) {
        second = dsum;
      }
    }
    c.margin = second - best;
    return c;
  };

  // run-backed evaluations outrank plain copies: a wrong pick where only
  // values matched poisons everything downstream, while a wrong pick at an
  // exact value crossing is harmless (the tied roots agree there); within a
  // tier, widest margin first, ties to the lower pixel index
  struct Entry {
    bool chained;
    double margin;
    size_t px;
  };
  const auto heap_before = [](const Entry& a, const Entry& b) {
    if (a.chained != b.chained) return b.chained;
    if (a.margin != b.margin) return a.margin < b.margin;
    return a.px > b.px;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(heap_before)> heap(heap_before);

  const auto commit = [&](size_t p, int pick) {
    choice[p] = pick;
    const int ix = int(p % size_t(nx)), iy = int(p / size_t(nx));
    for (int k = 0; k < 4; ++k) {
      const int jx = ix + kNbrDx[k], jy = iy + kNbrDy[k];
      if (jx < 0 || jx >= nx || jy < 0 || jy >= ny) continue;
      const size_t pj = size_t(jy) * nx + jx;
      if (!in_domain[pj] || choice[pj] >= 0) continue;
      const Cand c = evaluate(pj);
      if (c.informed) heap.push({c.chained, c.margin, pj});
    }
  };

  const auto spread = [&](size_t p) {
    const auto& r = roots_px[p];
    return r.empty() ? -1.0 : r.front() - r.back();
  };

  for (;;) {
    if (heap.empty()) {
      // start (or restart, for a disconnected domain) at the unlabeled pixel
      // with the widest root separation, taking descending order there
      size_t seed = npx;
      double best = -1.0;
      for (size_t p = 0; p < npx; ++p)
        if (in_domain[p] && choice[p] < 0 && spread(p) > best) {
          best = spread(p);
          seed = p;
        }
      if (seed == npx) break;
      commit(seed, 0);
      continue;
    }
    const Entry e = heap.top();
    heap.pop();
    if (choice[e.px] >= 0) continue;
    // the key may be stale: neighbors committed since the push
    const Cand c = evaluate(e.px);
    if (!c.informed) continue;
    if (c.chained != e.chained || c.margin != e.margin) {
      heap.push({c.chained, c.margin, e.px});
      continue;
    }
    commit(e.px, c.pick);
  }
  return choice;
}

// Display fill for pixels without a committed label: split the pixel's own
// singles by the ratio found at the nearest labeled pixel (BFS distance).
void fill_unlabeled(std::vector<Image<double>>& images, const Image<double>& s1,
                    const Image<uint8_t>& labeled, int nx, int ny) {
  const size_t npx = size_t(nx) * size_t(ny);
  const int n = int(images.size());
  std::vector<size_t> src(npx, npx);
  std::deque<size_t> q;
  for (size_t p = 0; p < npx; ++p)
    if (labeled[p]) {
      src[p] = p;
      q.push_back(p);
    }
  if (q.empty()) {
    // nothing labeled anywhere: put all intensity in the first image
    for (size_t p = 0; p < npx; ++p) {
      images[0][p] = s1[p];
      for (int j = 1; j < n; ++j) images[size_t(j)][p] = 0.0;
    }
    return;
  }
  while (!q.empty()) {
    const size_t p = q.front();
    q.pop_front();
    const int ix = int(p % size_t(nx)), iy = int(p / size_t(nx));
    for (int k = 0; k < 4; ++k) {
      const int jx = ix + kNbrDx[k], jy = iy + kNbrDy[k];
      if (jx < 0 || jx >= nx || jy < 0 || jy >= ny) continue;
      const size_t pj = size_t(jy) * nx + jx;
      if (src[pj] == npx) {
        src[pj] = src[p];
        q.push_back(pj);
      }
    }
  }
  for (size_t p = 0; p < npx; ++p) {
    if (labeled[p]) continue;
    const size_t sp = src[p];
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += images[size_t(j)][sp];
    for (int j = 0; j < n; ++j) {
      const double ratio = sum > 0.0 ? images[size_t(j)][sp] / sum : (j == 0 ? 0.5 : (j == 1 ? 0.5 : 0.0));
      images[size_t(j)][p] = ratio * s1[p];
    }
  }
}

double eta2_factor(const Detector& calib) {
  const double f = eta_m_default(calib, 2) * (1.0 + calib.k_bunch) * calib.r * calib.t *
                   calib.capture_frac;
  if (!(f > 0.0)) fail_validation("reconstruct: pair calibration factor must be > 0");
  return f;
}

void validate_overrides(const ReconstructOptions& opt) {
  for (const auto& [m, eta] : opt.eta_overrides) {
    if (m < 3)
      fail_validation("reconstruct: eta overrides apply to orders >= 3, got " + std::to_string(m));
    if (!(eta > 0.0)) fail_validation("reconstruct: eta_m must be > 0");
  }
}

double eta_for_order(const Detector& calib, int m, const ReconstructOptions& opt) {
  for (const auto& [om, eta] : opt.eta_overrides)
    if (om == m) {
      if (!(eta > 0.0)) fail_validation("reconstruct: eta_m must be > 0");
      return eta;
    }
  return eta_m_default(calib, m);
}

// Shared two-emitter path. In count mode the measured counts drive the
// propagated variances and significance tests; in rate mode variances are
// zero and the tests reduce to sign checks.
EmitterImages reconstruct_pair(const ScanGrid& grid, const Image<double>& s1_sub,
                               const Image<double>* coin_rate_grid,
                               const Image<int64_t>* c1, const Image<int64_t>* c2,
                               const Image<int64_t>* cc, const Detector& calib,
                               const ReconstructOptions& opt, bool count_mode,
                               double bg_used = 0.0) {
  const int nx = grid.nx, ny = grid.ny;
  const size_t npx = size_t(nx) * size_t(ny);
  const double dwell = grid.dwell_s;
  const double efac = eta2_factor(calib);

  PairGrids pg;
  pg.nx = nx;
  pg.ny = ny;
  for (Image<double>* im : {&pg.s1, &pg.sub, &pg.acc, &pg.p2, &pg.hi, &pg.lo, &pg.var_s1,
                            &pg.var_p2, &pg.sig_split})
    *im = Image<double>(nx, ny);
  for (Image<uint8_t>* im : {&pg.clamped, &pg.pair_sig, &pg.split_sig, &pg.solid, &pg.domain})
    *im = Image<uint8_t>(nx, ny, 0);

  for (size_t p = 0; p < npx; ++p) {
    const double s1 = s1_sub[p];
    double acc, sub, var_s1 = 0.0, var_p2 = 0.0;
    if (count_mode) {
      const double r1 = double((*c1)[p]) / dwell;
      const double r2 = double((*c2)[p]) / dwell;
      acc = accidental_rate(calib, r1, r2);
      sub = double((*cc)[p]) / dwell - acc;
      var_s1 = double(std::max<int64_t>((*c1)[p] + (*c2)[p], 1)) / (dwell * dwell);
      var_p2 = double(std::max<int64_t>((*cc)[p], 1)) / (dwell * dwell * efac * efac);
    } else {
      const double lam1 = s1 + bg_used;  // rate mode: split by R/T exactly
      acc = accidental_rate(calib, calib.t * lam1, calib.r * lam1);
      sub = (*coin_rate_grid)[p] - acc;
    }
    const double p2 = std::max(sub, 0.0) / efac;
    const double disc = discriminant(s1, p2);
    const bool cl = disc < 0.0;
    const double sq = std::sqrt(std::max(disc, 0.0));
    const double hi = cl ? 0.5 * s1 : 0.5 * (s1 + sq);
    const double lo = cl ? 0.5 * s1 : (hi > 0.0 ? p2 / hi : 0.0);

    pg.s1[p] = s1;
    pg.acc[p] = acc;
    pg.sub[p] = sub;
    pg.p2[p] = p2;
    pg.hi[p] = hi;
    pg.lo[p] = lo;
    pg.clamped[p] = cl;
    if (count_mode) {
      pg.var_s1[p] = var_s1;
      pg.var_p2[p] = var_p2;
      const double var_disc = 4.0 * s1 * s1 * var_s1 + 16.0 * var_p2;
      const double sig_split = std::sqrt(var_disc) / std::max(2.0 * sq, kTiny);
      pg.sig_split[p] = sig_split;
      pg.pair_sig[p] = sub > opt.pair_bar * std::sqrt(std::max(acc, kTiny) / dwell);
      pg.split_sig[p] = (sub > 0.0) && !cl && (hi - lo > opt.split_bar * sig_split);
      pg.solid[p] = (sub > 0.0) && !cl && (hi - lo > opt.solid_bar * sig_split);
    } else {
      pg.pair_sig[p] = sub > 0.0;
      pg.split_sig[p] = (sub > 0.0) && !cl && (hi > lo);
      pg.solid[p] = pg.split_sig[p];
    }
    pg.domain[p] = pg.pair_sig[p] || pg.split_sig[p];
  }

  EmitterImages out;
  out.grid = grid;
  out.images.assign(2, Image<double>(nx, ny));
  out.variances.assign(2, Image<double>(nx, ny));
  out.flags = Image<uint8_t>(nx, ny, uint8_t(PixelFlag::ok));
  out.labeled = Image<uint8_t>(nx, ny, 0);

  size_t anchor_count = 0;
  for (size_t p = 0; p < npx; ++p) anchor_count += pg.domain[p] && pg.solid[p];

  Image<int8_t> lab(nx, ny, 0);
  bool fallback = false;
  if (count_mode && int(anchor_count) < opt.min_split_px) {
    // too few unambiguous split pixels to anchor component orientation; fall
    // back to the singles e^-2 contour, where the aggregate split still
    // informs
    fallback = true;
    double max_s1 = 0.0;
    for (size_t p = 0; p < npx; ++p) max_s1 = std::max(max_s1, pg.s1[p]);
    const double thr = std::exp(-2.0) * max_s1;
    for (size_t p = 0; p < npx; ++p)
      if (pg.s1[p] >= thr) lab[p] = 1;
  } else if (count_mode) {
    lab = orient_components(pg);
  } else {
    // noiseless inputs: breadth-first mean-matching labels
    std::vector<std::vector<double>> roots(npx);
    for (size_t p = 0; p < npx; ++p) roots[p] = {pg.hi[p], pg.lo[p]};
    const auto choice = flood_match_labels(roots, pg.domain, nx, ny, 2);
    for (size_t p = 0; p < npx; ++p)
      if (choice[p] >= 0) lab[p] = choice[p] == 0 ? 1 : -1;
  }

  for (size_t p = 0; p < npx; ++p) {
    const bool in_fit = lab[p] != 0;
    out.labeled[p] = in_fit;
    if (in_fit) {
      const bool first_hi = lab[p] > 0;
      out.images[0][p] = first_hi ? pg.hi[p] : pg.lo[p];
      out.images[1][p] = first_hi ? pg.lo[p] : pg.hi[p];
    }
    // flags report the significance state regardless of labeling; in
    // fallback mode the contour itself defines usability
    if (fallback) {
      out.flags[p] = in_fit ? (pg.clamped[p] ? uint8_t(PixelFlag::clamped_discriminant)
                                             : uint8_t(PixelFlag::ok))
                            : uint8_t(PixelFlag::below_noise_floor);
    } else if (!pg.domain[p]) {
      out.flags[p] = uint8_t(PixelFlag::below_noise_floor);
    } else if (pg.clamped[p]) {
      out.flags[p] = uint8_t(PixelFlag::clamped_discriminant);
    }
  }

  fill_unlabeled(out.images, pg.s1, out.labeled, nx, ny);

  if (count_mode) {
    for (size_t p = 0; p < npx; ++p) {
      double var_hi, var_lo;
      if (pg.clamped[p]) {
        const double var_disc = 4.0 * pg.s1[p] * pg.s1[p] * pg.var_s1[p] + 16.0 * pg.var_p2[p];
        var_hi = var_lo = 0.25 * (pg.var_s1[p] + std::sqrt(var_disc));
      } else {
        const double sq = std::max(pg.hi[p] - pg.lo[p], kTiny);  // sq == sqrt(disc)
        const double ratio = std::min(pg.s1[p] / sq, kDerivClip);
        const double dh_ds1 = 0.5 * (1.0 + ratio);
        const double dl_ds1 = 0.5 * std::abs(1.0 - ratio);
        const double d_dp2 = std::min(1.0 / sq, kDerivClip);
        var_hi = dh_ds1 * dh_ds1 * pg.var_s1[p] + d_dp2 * d_dp2 * pg.var_p2[p];
        var_lo = dl_ds1 * dl_ds1 * pg.var_s1[p] + d_dp2 * d_dp2 * pg.var_p2[p];
      }
      var_hi = std::clamp(var_hi, kVarLo, kVarHi);
      var_lo = std::clamp(var_lo, kVarLo, kVarHi);
      const bool first_hi = lab[p] >= 0;  // unlabeled: hi orientation, excluded anyway
      out.variances[0][p] = first_hi ? var_hi : var_lo;
      out.variances[1][p] = first_hi ? var_lo : var_hi;
    }
  }
  return out;
}

// General-N path: per-pixel symmetric-polynomial roots plus BFS mean labels.
EmitterImages reconstruct_multi(const ScanGrid& grid, const Image<double>& s1_sub,
                                const std::vector<std::pair<int, const Image<double>*>>& e_raw,
                                const Image<int64_t>* c1, const Image<int64_t>* c2,
                                const std::vector<std::pair<int, const Image<int64_t>*>>& c_m,
                                const Detector& calib, int n, const ReconstructOptions& opt,
                                bool count_mode, double bg_used = 0.0) {
  const int nx = grid.nx, ny = grid.ny;
  const size_t npx = size_t(nx) * size_t(ny);
  const double dwell = grid.dwell_s;
  const double efac2 = eta2_factor(calib);

  std::vector<std::vector<double>> roots(npx);
  std::vector<uint8_t> solver_flag(npx, uint8_t(PixelFlag::ok));
  Image<uint8_t> domain(nx, ny, 0);
  Image<double> var_s1(nx, ny, 0.0);

  for (size_t p = 0; p < npx; ++p) {
    std::vector<double> e(size_t(n), 0.0);
    e[0] = s1_sub[p];
    bool all_positive = true;
    for (int m = 2; m <= n; ++m) {
      double raw, acc = 0.0;
      if (count_mode) {
        const auto it = std::find_if(c_m.begin(), c_m.end(),
                                     [m](const auto& pr) { return pr.first == m; });
        raw = double((*it->second)[p]) / dwell;
        if (m == 2) {
          const double r1 = double((*c1)[p]) / dwell;
          const double r2 = double((*c2)[p]) / dwell;
          acc = accidental_rate(calib, r1, r2);
        }
      } else {
        const auto it = std::find_if(e_raw.begin(), e_raw.end(),
                                     [m](const auto& pr) { return pr.first == m; });
        raw = (*it->second)[p];
        if (m == 2) {
          const double lam1 = s1_sub[p] + bg_used;
          acc = accidental_rate(calib, calib.t * lam1, calib.r * lam1);
        }
      }
      const double sub = raw - acc;
      const double efac = (m == 2) ? efac2 : eta_for_order(calib, m, opt) * calib.capture_frac;
      const double em = std::max(sub, 0.0) / efac;
      e[size_t(m - 1)] = em;
      if (!(sub > 0.0)) all_positive = false;
    }
    if (count_mode)
      var_s1[p] = double(std::max<int64_t>((*c1)[p] + (*c2)[p], 1)) / (dwell * dwell);

    domain[p] = all_positive && s1_sub[p] > 0.0;
    const SymmetricSolution sol = solve_symmetric(e);
    roots[p] = sol.roots;
    solver_flag[p] = uint8_t(sol.flag);
  }

  const auto choice = flood_match_labels(roots, domain, nx, ny, n);
  const auto perms = permutations(n);

  EmitterImages out;
  out.grid = grid;
  out.images.assign(size_t(n), Image<double>(nx, ny));
  out.variances.assign(size_t(n), Image<double>(nx, ny));
  out.flags = Image<uint8_t>(nx, ny, uint8_t(PixelFlag::ok));
  out.labeled = Image<uint8_t>(nx, ny, 0);

  for (size_t p = 0; p < npx; ++p) {
    if (choice[p] >= 0) {
      out.labeled[p] = 1;
      const auto& perm = perms[size_t(choice[p])];
      for (int j = 0; j < n; ++j) out.images[size_t(j)][p] = roots[p][size_t(perm[size_t(j)])];
      out.flags[p] = solver_flag[p];
    } else {
      out.flags[p] = uint8_t(PixelFlag::below_noise_floor);
    }
    if (count_mode)
      for (int j = 0; j < n; ++j) out.variances[size_t(j)][p] = std::max(var_s1[p], kVarLo);
  }

  fill_unlabeled(out.images, s1_sub, out.labeled, nx, ny);
  return out;
}

}  // namespace

Image<double> subtract_background(const ScanData& sd, std::optional<double> bg_cps) {
  const ScanGrid& g = sd.grid;
  const size_t npx = size_t(g.nx) * size_t(g.ny);
  Image<double> out(g.nx, g.ny);
  std::vector<double> rate(npx);
  for (size_t p = 0; p < npx; ++p)
    rate[p] = double(sd.singles_d1[p] + sd.singles_d2[p]) / g.dwell_s;

  double bg;
  if (bg_cps) {
    if (*bg_cps < 0.0) fail_validation("subtract_background: bg_cps must be >= 0");
    bg = *bg_cps;
  } else {
    // estimate from the dimmest decile
    std::vector<double> sorted(rate);
    std::sort(sorted.begin(), sorted.end());
    const size_t k = std::max<size_t>(1, npx / 10);
    bg = std::accumulate(sorted.begin(), sorted.begin() + long(k), 0.0) / double(k);
  }
  for (size_t p = 0; p < npx; ++p) out[p] = std::max(rate[p] - bg, 0.0);
  return out;
}

PairSolution solve_pair(double s1, double p2) {
  if (s1 < 0.0 || p2 < 0.0) fail_validation("solve_pair: negative input");
  const double disc = discriminant(s1, p2);
  if (disc < 0.0) return {0.5 * s1, 0.5 * s1, PixelFlag::clamped_discriminant};
  const double hi = 0.5 * (s1 + std::sqrt(disc));
  const double lo = hi > 0.0 ? p2 / hi : 0.0;
  return {hi, lo, PixelFlag::ok};
}

SymmetricSolution solve_symmetric(const std::vector<double>& e1_to_eN) {
  const int n = int(e1_to_eN.size());
  if (n < 1) fail_validation("solve_symmetric: empty input");
  for (const double e : e1_to_eN)
    if (!std::isfinite(e)) fail_validation("solve_symmetric: non-finite input");

  SymmetricSolution sol;
  if (n == 1) {
    double r = e1_to_eN[0];
    if (r < 0.0) {
      r = 0.0;
      sol.flag = PixelFlag::clamped_discriminant;
    }
    sol.roots = {r};
    return sol;
  }

  // scale so the normalized roots are O(1)
  double scale = 0.0;
  for (int k = 1; k <= n; ++k) {
    const double ek = std::abs(e1_to_eN[size_t(k - 1)]);
    if (ek > 0.0) scale = std::max(scale, std::pow(ek, 1.0 / double(k)));
  }
  if (scale == 0.0) {
    sol.roots.assign(size_t(n), 0.0);
    return sol;
  }

  // monic coefficients of u^n + a[n-1] u^(n-1) + ... + a[0]
  std::vector<double> a(size_t(n), 0.0);
  double sk = 1.0;
  for (int k = 1; k <= n; ++k) {
    sk *= scale;
    const double ck = e1_to_eN[size_t(k - 1)] / sk;
    a[size_t(n - k)] = (k % 2 == 1) ? -ck : ck;
  }

  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) comp(i, i - 1) = 1.0;
  for (int i = 0; i < n; ++i) comp(i, n - 1) = -a[size_t(i)];
  const Eigen::EigenSolver<Eigen::MatrixXd> es(comp);
  if (es.info() != Eigen::Success) fail_runtime("solve_symmetric: eigensolver failed");

  const auto poly = [&](double u, double& val, double& deriv) {
    double v = 1.0, d = 0.0;
    for (int i = n - 1; i >= 0; --i) {
      d = d * u + v;
      v = v * u + a[size_t(i)];
    }
    val = v;
    deriv = d;
  };

  std::vector<double> roots(size_t(n), 0.0);
  bool complex_seen = false;
  for (int i = 0; i < n; ++i) {
    const std::complex<double> ev = es.eigenvalues()[i];
    double u = ev.real();
    if (std::abs(ev.imag()) > 1e-7 * std::max(1.0, std::abs(ev.real()))) {
      complex_seen = true;  // conjugate pair collapses to the shared real part
    } else {
      for (int it = 0; it < 4; ++it) {
        double v, d;
        poly(u, v, d);
        if (d == 0.0) break;
        const double step = v / d;
        const double u2 = u - step;
        double v2, d2;
        poly(u2, v2, d2);
        if (std::abs(v2) >= std::abs(v)) break;
        u = u2;
      }
    }
    roots[size_t(i)] = u * scale;
  }
  if (complex_seen) sol.flag = PixelFlag::clamped_discriminant;

  double deficit = 0.0;
  bool negative_seen = false;
  for (double& r : roots)
    if (r < 0.0) {
      deficit += r;
      r = 0.0;
      negative_seen = true;
    }
  std::sort(roots.begin(), roots.end(), std::greater<>());
  if (negative_seen) {
    sol.flag = PixelFlag::clamped_discriminant;
    roots[0] = std::max(roots[0] + deficit, 0.0);  // preserve e1 where possible
    std::sort(roots.begin(), roots.end(), std::greater<>());
  }
  sol.roots = std::move(roots);
  return sol;
}

EmitterImages reconstruct(const ScanData& sd, const Detector& calib, int n_emitters,
                          const ReconstructOptions& opt) {
  validate(sd.grid);
  validate(calib);
  validate_overrides(opt);
  if (n_emitters < 1) fail_validation("reconstruct: n_emitters must be >= 1");
  const int nx = sd.grid.nx, ny = sd.grid.ny;
  if (sd.singles_d1.nx != nx || sd.singles_d1.ny != ny || sd.singles_d2.nx != nx ||
      sd.singles_d2.ny != ny)
    fail_validation("reconstruct: singles grid dimensions do not match the scan grid");

  const Image<double> s1 = subtract_background(sd, opt.bg_cps ? opt.bg_cps
                                                              : std::optional<double>(calib.bg_cps));

  if (n_emitters == 1) {
    EmitterImages out;
    out.grid = sd.grid;
    out.images = {s1};
    Image<double> var(nx, ny);
    for (size_t p = 0; p < var.size(); ++p)
      var[p] = double(std::max<int64_t>(sd.singles_d1[p] + sd.singles_d2[p], 1)) /
               (sd.grid.dwell_s * sd.grid.dwell_s);
    out.variances = {var};
    out.flags = Image<uint8_t>(nx, ny, uint8_t(PixelFlag::ok));
    out.labeled = Image<uint8_t>(nx, ny, 1);
    return out;
  }

  std::vector<std::pair<int, const Image<int64_t>*>> c_m;
  for (int m = 2; m <= n_emitters; ++m) {
    const Image<int64_t>* img = sd.order(m);
    if (!img)
      fail_validation("reconstruct: missing coincidence order " + std::to_string(m));
    if (img->nx != nx || img->ny != ny)
      fail_validation("reconstruct: coincidence grid dimensions do not match the scan grid");
    c_m.emplace_back(m, img);
  }

  if (n_emitters == 2)
    return reconstruct_pair(sd.grid, s1, nullptr, &sd.singles_d1, &sd.singles_d2, c_m[0].second,
                            calib, opt, /*count_mode=*/true);
  return reconstruct_multi(sd.grid, s1, {}, &sd.singles_d1, &sd.singles_d2, c_m, calib,
                           n_emitters, opt, /*count_mode=*/true);
}

EmitterImages reconstruct_rates(const Image<double>& singles_cps,
                                const std::vector<std::pair<int, Image<double>>>& coincidences_cps,
                                const ScanGrid& grid, const Detector& calib, int n_emitters,
                                const ReconstructOptions& opt) {
  validate(grid);
  validate(calib);
  validate_overrides(opt);
  if (n_emitters < 1) fail_validation("reconstruct_rates: n_emitters must be >= 1");
  const int nx = grid.nx, ny = grid.ny;
  if (singles_cps.nx != nx || singles_cps.ny != ny)
    fail_validation("reconstruct_rates: singles grid dimensions do not match the scan grid");

  const double bg = opt.bg_cps ? *opt.bg_cps : calib.bg_cps;
  Image<double> s1(nx, ny);
  for (size_t p = 0; p < s1.size(); ++p) s1[p] = std::max(singles_cps[p] - bg, 0.0);

  if (n_emitters == 1) {
    EmitterImages out;
    out.grid = grid;
    out.images = {s1};
    out.variances = {Image<double>(nx, ny, 0.0)};
    out.flags = Image<uint8_t>(nx, ny, uint8_t(PixelFlag::ok));
    out.labeled = Image<uint8_t>(nx, ny, 1);
    return out;
  }

  std::vector<std::pair<int, const Image<double>*>> e_raw;
  for (int m = 2; m <= n_emitters; ++m) {
    const auto it = std::find_if(coincidences_cps.begin(), coincidences_cps.end(),
                                 [m](const auto& pr) { return pr.first == m; });
    if (it == coincidences_cps.end())
      fail_validation("reconstruct_rates: missing coincidence order " + std::to_string(m));
    if (it->second.nx != nx || it->second.ny != ny)
      fail_validation("reconstruct_rates: coincidence grid dimensions do not match the scan grid");
    e_raw.emplace_back(m, &it->second);
  }

  if (n_emitters == 2)
    return reconstruct_pair(grid, s1, e_raw[0].second, nullptr, nullptr, nullptr, calib, opt,
                            /*count_mode=*/false, bg);
  return reconstruct_multi(grid, s1, e_raw, nullptr, nullptr, {}, calib, n_emitters, opt,
                           /*count_mode=*/false, bg);
}

}  // namespace qsi
