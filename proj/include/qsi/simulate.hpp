#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "qsi/model.hpp"
#include "qsi/types.hpp"

namespace qsi {

// RNG channel map. Scan pixels draw from (seed, pixel, channel); g2 event
// sources from (seed, 0, emitter channel); bootstrap resamples shift the
// channel by kChannelResampleBase and carry the resample index.
inline constexpr uint32_t kChannelD1 = 0;
inline constexpr uint32_t kChannelD2 = 1;  // order-m coincidences use channel m (m >= 2)
inline constexpr uint32_t kChannelBg = 999;
inline constexpr uint32_t kChannelEmitterBase = 1000;
inline constexpr uint32_t kChannelResampleBase = 2000;

struct ScanData {
  ScanGrid grid;
  Image<int64_t> singles_d1;  // transmitted arm
  Image<int64_t> singles_d2;  // reflected arm
  std::vector<std::pair<int, Image<int64_t>>> coincidences;  // (order m, counts)
  double pump_angle_deg = 0.0;
  uint64_t seed = 0;
  Detector detector;

  const Image<int64_t>* order(int m) const {
    for (const auto& [om, img] : coincidences)
      if (om == m) return &img;
    return nullptr;
  }
};

struct G2Histogram {
  double bin_width_ns = 1.0;
  std::vector<double> tau_ns;  // bin centers, ascending, symmetric about 0
  std::vector<int64_t> counts;
  int64_t total_starts = 0;
};

struct SweepPoint {
  double angle_deg = 0.0;
  int64_t d1 = 0;
  int64_t d2 = 0;
  int64_t c2 = 0;
};
using SweepTable = std::vector<SweepPoint>;

// Poisson-samples per-pixel detector singles and order-m coincidence counts.
// The m = 2 rate carries the start-stop accidental floor of that pixel.
ScanData simulate_scan(const Scene& s, const ScanGrid& g, const std::vector<int>& orders,
                       uint64_t seed);

// Event-level start-stop histogram at a fixed position: thinned per-emitter
// renewal processes, R/T routing, all cross-detector pairs within the span.
G2Histogram simulate_g2(const Scene& s, double x_nm, double y_nm, double duration_s,
                        double bin_width_ns, uint64_t seed);

// Per-angle singles and pair counts at a fixed position with the pump angle
// overridden per entry. One entry reproduces one pixel of simulate_scan.
SweepTable simulate_polarization_sweep(const Scene& s, double x_nm, double y_nm,
                                       const std::vector<double>& angles_deg, double dwell_s,
                                       uint64_t seed);

}  // namespace qsi
