#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace qsi {

// Philox4x32-10 block cipher in counter mode. Every (seed, unit, channel,
// resample) tuple owns an independent stream, so per-pixel draws do not
// depend on evaluation order and parallel scans reproduce serial ones.
inline std::array<uint32_t, 4> philox4x32(std::array<uint32_t, 4> x, std::array<uint32_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    const uint64_t p0 = uint64_t(0xD2511F53u) * x[0];
    const uint64_t p1 = uint64_t(0xCD9E8D57u) * x[2];
    x = {uint32_t(p1 >> 32) ^ x[1] ^ k[0], uint32_t(p1),
         uint32_t(p0 >> 32) ^ x[3] ^ k[1], uint32_t(p0)};
    k[0] += 0x9E3779B9u;
    k[1] += 0xBB67AE85u;
  }
  return x;
}

class Stream {
 public:
  Stream(uint64_t seed, uint64_t unit, uint32_t channel, uint32_t resample = 0)
      : key_{uint32_t(seed), uint32_t(seed >> 32)},
        ctr_{uint32_t(unit), uint32_t(unit >> 32) ^ (resample * 0x9E3779B9u), channel, 0} {}

  uint32_t next_u32() {
    if (idx_ == 4) {
      buf_ = philox4x32(ctr_, key_);
      ++ctr_[3];
      idx_ = 0;
    }
    return buf_[idx_++];
  }

  // 53-bit uniform in [0, 1)
  double u01() {
    const uint64_t a = next_u32() >> 5;
    const uint64_t b = next_u32() >> 6;
    return (double(a) * 67108864.0 + double(b)) * (1.0 / 9007199254740992.0);
  }

  // unit-mean exponential
  double exponential() { return -std::log1p(-u01()); }

  int64_t poisson(double mu);

 private:
  std::array<uint32_t, 2> key_;
  std::array<uint32_t, 4> ctr_;
  std::array<uint32_t, 4> buf_{};
  int idx_ = 4;
};

inline int64_t Stream::poisson(double mu) {
  if (!(mu > 0.0)) return 0;
  if (mu < 10.0) {
    // Knuth multiplication method
    const double limit = std::exp(-mu);
    double p = 1.0;
    int64_t k = -1;
    do {
      ++k;
      p *= u01();
    } while (p > limit);
    return k;
  }
  // Hoermann's PTRS transformed rejection
  const double b = 0.931 + 2.53 * std::sqrt(mu);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double llam = std::log(mu);
  for (;;) {
    const double u = u01() - 0.5;
    const double v = u01();
    const double us = 0.5 - std::abs(u);
    const double kd = std::floor((2.0 * a / us + b) * u + mu + 0.43);
    if (us >= 0.07 && v <= vr) return int64_t(kd);
    if (kd < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        kd * llam - mu - std::lgamma(kd + 1.0))
      return int64_t(kd);
  }
}

}  // namespace qsi
