#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace qsi {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind : int { validation = 1, runtime = 2, non_convergence = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  ErrorKind kind;
};

[[noreturn]] inline void fail_validation(const std::string& msg) {
  throw Error(ErrorKind::validation, msg);
}
[[noreturn]] inline void fail_runtime(const std::string& msg) {
  throw Error(ErrorKind::runtime, msg);
}
[[noreturn]] inline void fail_non_convergence(const std::string& msg) {
  throw Error(ErrorKind::non_convergence, msg);
}

// One single-photon source. The detected rate at focus is
// alpha_cps + beta_cps * cos^2(pump angle); beta may be negative but the
// total rate stays nonnegative at every angle.
struct Emitter {
  double x_nm = 0.0;
  double y_nm = 0.0;
  double alpha_cps = 0.0;
  double beta_cps = 0.0;
};

struct Psf {
  double sigma_nm = 150.0;
};

struct Detector {
  double r = 0.54;            // reflected-arm fraction
  double t = 0.46;            // transmitted-arm fraction
  double tw_ns = 2.0;         // coincidence window
  double k_bunch = 0.0;       // residual bunching factor
  double tau_a_ns = 10.0;     // antibunching recovery time constant
  double capture_frac = 1.0;  // fraction of true pairs inside the window
  double bg_cps = 0.0;        // background singles rate
};

struct ScanGrid {
  double x0_nm = 0.0;
  double y0_nm = 0.0;
  double pitch_nm = 1.0;
  int nx = 1;
  int ny = 1;
  double dwell_s = 1.0;

  int npx() const { return nx * ny; }
  double x_at(int ix) const { return x0_nm + ix * pitch_nm; }
  double y_at(int iy) const { return y0_nm + iy * pitch_nm; }
};

struct Scene {
  std::vector<Emitter> emitters;
  Psf psf;
  Detector detector;
  double pump_angle_deg = 0.0;
};

// Flat row-major grid of values; index = iy * nx + ix, y increasing per row.
template <typename T>
struct Image {
  int nx = 0;
  int ny = 0;
  std::vector<T> v;

  Image() = default;
  Image(int nx_, int ny_, T fill = T{}) : nx(nx_), ny(ny_), v(size_t(nx_) * size_t(ny_), fill) {}

  T& at(int ix, int iy) { return v[size_t(iy) * nx + ix]; }
  const T& at(int ix, int iy) const { return v[size_t(iy) * nx + ix]; }
  T& operator[](size_t i) { return v[i]; }
  const T& operator[](size_t i) const { return v[i]; }
  size_t size() const { return v.size(); }
};

void validate(const Emitter& e);
void validate(const Psf& p);
void validate(const Detector& d);
void validate(const ScanGrid& g);
void validate(const Scene& s);

}  // namespace qsi
