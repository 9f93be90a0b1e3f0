#include "qsi/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace qsi {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

double parse_double_str(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t.empty()) fail_validation(what + ": empty number");
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size())
    fail_validation(what + ": invalid number '" + t + "'");
  return v;
}

long long parse_int_str(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t.empty()) fail_validation(what + ": empty integer");
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (end != t.c_str() + t.size())
    fail_validation(what + ": invalid integer '" + t + "'");
  return v;
}

unsigned long long parse_uint_str(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t.empty()) fail_validation(what + ": empty integer");
  char* end = nullptr;
  const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
  if (end != t.c_str() + t.size() || t[0] == '-')
    fail_validation(what + ": invalid unsigned integer '" + t + "'");
  return v;
}

std::string describe(const ConfigItem& it) {
  return "config line " + std::to_string(it.line) + ": key '" + it.key + "'";
}

double cfg_double(const KeyValues& kv, const std::string& key, double fallback) {
  const ConfigItem* it = kv.find(key);
  return it ? parse_double_str(it->value, describe(*it)) : fallback;
}

// header map for the '#'-prefixed formats; returns remaining data text
std::map<std::string, std::string> read_header(const std::string& text, const std::string& what,
                                               std::string& data_out) {
  std::map<std::string, std::string> hdr;
  std::istringstream is(text);
  std::string line;
  std::ostringstream data;
  bool in_header = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (in_header && !t.empty() && t[0] == '#') {
      const auto toks = split_ws(t.substr(1));
      if (toks.size() < 2)
        fail_validation(what + ": malformed header line '" + t + "'");
      std::string value = toks[1];
      for (size_t i = 2; i < toks.size(); ++i) value += " " + toks[i];
      hdr[toks[0]] = value;
      continue;
    }
    if (t.empty() && in_header) continue;
    in_header = false;
    data << line << '\n';
  }
  data_out = data.str();
  return hdr;
}

const std::string& header_get(const std::map<std::string, std::string>& hdr,
                              const std::string& key, const std::string& what) {
  const auto it = hdr.find(key);
  if (it == hdr.end()) fail_validation(what + ": missing header '" + key + "'");
  return it->second;
}

}  // namespace

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_validation("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail_runtime("read error on '" + path + "'");
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) fail_runtime("write error on '" + path + "'");
}

namespace {

std::string grid_header(const ScanGrid& grid, const std::string& unit) {
  std::ostringstream os;
  os << "# nx " << grid.nx << '\n';
  os << "# ny " << grid.ny << '\n';
  os << "# pitch_nm " << format_g17(grid.pitch_nm) << '\n';
  os << "# x0_nm " << format_g17(grid.x0_nm) << '\n';
  os << "# y0_nm " << format_g17(grid.y0_nm) << '\n';
  os << "# dwell_s " << format_g17(grid.dwell_s) << '\n';
  os << "# unit " << unit << '\n';
  return os.str();
}

}  // namespace

void write_grid(const std::string& path, const Image<int64_t>& img, const ScanGrid& grid,
                const std::string& unit) {
  if (img.nx != grid.nx || img.ny != grid.ny)
    fail_validation("write_grid: image dimensions do not match the grid");
  std::ostringstream os;
  os << grid_header(grid, unit);
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      if (ix) os << ' ';
      os << img.at(ix, iy);
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

void write_grid(const std::string& path, const Image<double>& img, const ScanGrid& grid,
                const std::string& unit) {
  if (img.nx != grid.nx || img.ny != grid.ny)
    fail_validation("write_grid: image dimensions do not match the grid");
  std::ostringstream os;
  os << grid_header(grid, unit);
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      if (ix) os << ' ';
      os << format_g17(img.at(ix, iy));
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

GridData read_grid(const std::string& path) {
  const std::string what = "grid file '" + path + "'";
  std::string data;
  const auto hdr = read_header(read_text_file(path), what, data);

  GridData gd;
  gd.grid.nx = int(parse_int_str(header_get(hdr, "nx", what), what + " nx"));
  gd.grid.ny = int(parse_int_str(header_get(hdr, "ny", what), what + " ny"));
  gd.grid.pitch_nm = parse_double_str(header_get(hdr, "pitch_nm", what), what + " pitch_nm");
  gd.grid.x0_nm = parse_double_str(header_get(hdr, "x0_nm", what), what + " x0_nm");
  gd.grid.y0_nm = parse_double_str(header_get(hdr, "y0_nm", what), what + " y0_nm");
  gd.grid.dwell_s = parse_double_str(header_get(hdr, "dwell_s", what), what + " dwell_s");
  gd.unit = header_get(hdr, "unit", what);
  validate(gd.grid);

  const size_t expected = size_t(gd.grid.nx) * size_t(gd.grid.ny);
  gd.values.reserve(expected);
  std::istringstream is(data);
  std::string tok;
  while (is >> tok) gd.values.push_back(parse_double_str(tok, what + " value"));
  if (gd.values.size() != expected)
    fail_validation(what + ": expected " + std::to_string(expected) + " values, got " +
                    std::to_string(gd.values.size()));
  return gd;
}

Image<int64_t> to_counts(const GridData& gd) {
  Image<int64_t> img(gd.grid.nx, gd.grid.ny);
  for (size_t p = 0; p < gd.values.size(); ++p) {
    const double v = gd.values[p];
    if (!(std::floor(v) == v) || std::abs(v) > 9.2e18)
      fail_validation("count grid holds a non-integral value " + format_g17(v));
    img[p] = int64_t(v);
  }
  return img;
}

Image<double> to_rates(const GridData& gd) {
  Image<double> img(gd.grid.nx, gd.grid.ny);
  for (size_t p = 0; p < gd.values.size(); ++p) img[p] = gd.values[p];
  return img;
}

const ConfigItem* KeyValues::find(const std::string& key) const {
  for (const auto& it : items)
    if (it.key == key) return &it;
  return nullptr;
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail_validation("config line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                      t + "'");
    ConfigItem item;
    item.key = trim(t.substr(0, eq));
    item.value = trim(t.substr(eq + 1));
    item.line = lineno;
    if (item.key.empty())
      fail_validation("config line " + std::to_string(lineno) + ": empty key");
    if (kv.find(item.key))
      fail_validation("config line " + std::to_string(lineno) + ": duplicate key '" + item.key +
                      "'");
    kv.items.push_back(std::move(item));
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  return parse_key_values(read_text_file(path));
}

namespace {

bool is_uint_token(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isdigit(static_cast<unsigned char>(c));
  });
}

// emitter.<index>.<field> -> (index, field), or index -1 when not that shape
std::pair<int, std::string> emitter_key(const std::string& key) {
  if (key.rfind("emitter.", 0) != 0) return {-1, ""};
  const std::string rest = key.substr(8);
  const size_t dot = rest.find('.');
  if (dot == std::string::npos) return {-1, ""};
  const std::string idx = rest.substr(0, dot);
  if (!is_uint_token(idx)) return {-1, ""};
  return {int(std::strtol(idx.c_str(), nullptr, 10)), rest.substr(dot + 1)};
}

std::vector<double> parse_angle_list(const std::string& value, const std::string& what) {
  std::string v = value;
  std::replace(v.begin(), v.end(), ',', ' ');
  if (v.find(':') != std::string::npos) {
    // start:step:stop, inclusive of the stop within a small tolerance
    std::vector<std::string> parts;
    std::istringstream is(v);
    std::string p;
    while (std::getline(is, p, ':')) parts.push_back(p);
    if (parts.size() != 3) fail_validation(what + ": range must be start:step:stop");
    const double start = parse_double_str(parts[0], what);
    const double step = parse_double_str(parts[1], what);
    const double stop = parse_double_str(parts[2], what);
    if (!(step > 0.0)) fail_validation(what + ": range step must be > 0");
    std::vector<double> out;
    for (int k = 0;; ++k) {
      const double a = start + double(k) * step;
      if (a > stop + 1e-9) break;
      out.push_back(a);
      if (out.size() > 100000) fail_validation(what + ": range produces too many angles");
    }
    return out;
  }
  std::vector<double> out;
  for (const auto& tok : split_ws(v)) out.push_back(parse_double_str(tok, what));
  return out;
}

}  // namespace

Scenario scenario_from_config(const KeyValues& kv) {
  static const std::vector<std::string> detector_keys = {
      "r", "t", "tw_ns", "k_bunch", "tau_a_ns", "capture_frac", "bg_cps"};
  static const std::vector<std::string> grid_keys = {"nx",    "ny",    "pitch_nm",
                                                     "x0_nm", "y0_nm", "dwell_s"};
  static const std::vector<std::string> sweep_keys = {"angles_deg", "dwell_s", "positions"};
  static const std::vector<std::string> g2_keys = {"x_nm", "y_nm", "duration_s", "bin_width_ns"};
  static const std::vector<std::string> emitter_fields = {"x_nm", "y_nm", "alpha_cps", "beta_cps"};

  const auto in = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };

  for (const auto& item : kv.items) {
    const std::string& k = item.key;
    bool ok = k == "seed" || k == "orders" || k == "n_emitters" || k == "resamples" ||
              k == "scene.pump_angle_deg" || k == "psf.sigma_nm";
    if (!ok && k.rfind("detector.", 0) == 0) ok = in(detector_keys, k.substr(9));
    if (!ok && k.rfind("grid.", 0) == 0) ok = in(grid_keys, k.substr(5));
    if (!ok && k.rfind("sweep.", 0) == 0) ok = in(sweep_keys, k.substr(6));
    if (!ok && k.rfind("g2.", 0) == 0) ok = in(g2_keys, k.substr(3));
    if (!ok) {
      const auto [idx, field] = emitter_key(k);
      ok = idx >= 0 && in(emitter_fields, field);
    }
    if (!ok)
      fail_validation("config line " + std::to_string(item.line) + ": unknown key '" + k + "'");
  }

  Scenario sc;

  const ConfigItem* seed_item = kv.find("seed");
  if (!seed_item) fail_validation("config: missing required key 'seed'");
  sc.seed = parse_uint_str(seed_item->value, describe(*seed_item));

  // emitters: indices must run 0..K-1 with x, y and alpha present
  std::map<int, Emitter> emap;
  for (const auto& item : kv.items) {
    const auto [idx, field] = emitter_key(item.key);
    if (idx < 0) continue;
    Emitter& e = emap[idx];
    const double v = parse_double_str(item.value, describe(item));
    if (field == "x_nm") e.x_nm = v;
    else if (field == "y_nm") e.y_nm = v;
    else if (field == "alpha_cps") e.alpha_cps = v;
    else e.beta_cps = v;
  }
  if (emap.empty()) fail_validation("config: no emitters given");
  for (int i = 0; i < int(emap.size()); ++i)
    if (!emap.count(i))
      fail_validation("config: emitter indices must be contiguous from 0, missing emitter." +
                      std::to_string(i));
  for (const auto& [idx, e] : emap) {
    const std::string base = "emitter." + std::to_string(idx) + ".";
    for (const std::string& f : {std::string("x_nm"), std::string("y_nm"),
                                 std::string("alpha_cps")})
      if (!kv.find(base + f)) fail_validation("config: missing key '" + base + f + "'");
    sc.scene.emitters.push_back(e);
  }

  sc.scene.psf.sigma_nm = cfg_double(kv, "psf.sigma_nm", sc.scene.psf.sigma_nm);
  Detector& d = sc.scene.detector;
  d.r = cfg_double(kv, "detector.r", d.r);
  d.t = cfg_double(kv, "detector.t", d.t);
  d.tw_ns = cfg_double(kv, "detector.tw_ns", d.tw_ns);
  d.k_bunch = cfg_double(kv, "detector.k_bunch", d.k_bunch);
  d.tau_a_ns = cfg_double(kv, "detector.tau_a_ns", d.tau_a_ns);
  d.capture_frac = cfg_double(kv, "detector.capture_frac", d.capture_frac);
  d.bg_cps = cfg_double(kv, "detector.bg_cps", d.bg_cps);
  sc.scene.pump_angle_deg = cfg_double(kv, "scene.pump_angle_deg", 0.0);

  if (const ConfigItem* it = kv.find("n_emitters")) {
    sc.n_emitters = int(parse_int_str(it->value, describe(*it)));
    if (sc.n_emitters < 1) fail_validation(describe(*it) + ": must be >= 1");
  } else {
    sc.n_emitters = int(sc.scene.emitters.size());
  }

  if (const ConfigItem* it = kv.find("resamples")) {
    sc.resamples = int(parse_int_str(it->value, describe(*it)));
    if (sc.resamples < 0) fail_validation(describe(*it) + ": must be >= 0");
  }

  if (const ConfigItem* it = kv.find("orders")) {
    std::string v = it->value;
    std::replace(v.begin(), v.end(), ',', ' ');
    for (const auto& tok : split_ws(v)) {
      const int m = int(parse_int_str(tok, describe(*it)));
      if (m < 2) fail_validation(describe(*it) + ": coincidence orders start at 2");
      sc.orders.push_back(m);
    }
    std::sort(sc.orders.begin(), sc.orders.end());
    sc.orders.erase(std::unique(sc.orders.begin(), sc.orders.end()), sc.orders.end());
  } else if (sc.n_emitters >= 2) {
    sc.orders = {2};
  }

  bool any_grid = false;
  for (const auto& gk : grid_keys) any_grid = any_grid || kv.find("grid." + gk);
  if (any_grid) {
    for (const auto& gk : grid_keys)
      if (!kv.find("grid." + gk)) fail_validation("config: missing key 'grid." + gk + "'");
    sc.has_grid = true;
    sc.grid.nx = int(parse_int_str(kv.find("grid.nx")->value, "config key 'grid.nx'"));
    sc.grid.ny = int(parse_int_str(kv.find("grid.ny")->value, "config key 'grid.ny'"));
    sc.grid.pitch_nm = cfg_double(kv, "grid.pitch_nm", 0.0);
    sc.grid.x0_nm = cfg_double(kv, "grid.x0_nm", 0.0);
    sc.grid.y0_nm = cfg_double(kv, "grid.y0_nm", 0.0);
    sc.grid.dwell_s = cfg_double(kv, "grid.dwell_s", 0.0);
    validate(sc.grid);
  }

  bool any_sweep = false;
  for (const auto& sk : sweep_keys) any_sweep = any_sweep || kv.find("sweep." + sk);
  if (any_sweep) {
    const ConfigItem* ang = kv.find("sweep.angles_deg");
    if (!ang) fail_validation("config: missing key 'sweep.angles_deg'");
    sc.sweep.angles_deg = parse_angle_list(ang->value, describe(*ang));
    if (sc.sweep.angles_deg.empty()) fail_validation(describe(*ang) + ": no angles");
    const ConfigItem* dw = kv.find("sweep.dwell_s");
    if (!dw) fail_validation("config: missing key 'sweep.dwell_s'");
    sc.sweep.dwell_s = parse_double_str(dw->value, describe(*dw));
    if (!(sc.sweep.dwell_s > 0.0)) fail_validation(describe(*dw) + ": must be > 0");
    const ConfigItem* pos = kv.find("sweep.positions");
    if (!pos || trim(pos->value) == "emitters") {
      for (const Emitter& e : sc.scene.emitters) sc.sweep.positions_nm.emplace_back(e.x_nm, e.y_nm);
    } else {
      std::string v = pos->value;
      std::replace(v.begin(), v.end(), ',', ' ');
      const auto toks = split_ws(v);
      if (toks.empty() || toks.size() % 2 != 0)
        fail_validation(describe(*pos) + ": expected x y pairs or 'emitters'");
      for (size_t i = 0; i < toks.size(); i += 2)
        sc.sweep.positions_nm.emplace_back(parse_double_str(toks[i], describe(*pos)),
                                           parse_double_str(toks[i + 1], describe(*pos)));
    }
    sc.has_sweep = true;
  }

  bool any_g2 = false;
  for (const auto& gk : g2_keys) any_g2 = any_g2 || kv.find("g2." + gk);
  if (any_g2) {
    for (const auto& gk : g2_keys)
      if (!kv.find("g2." + gk)) fail_validation("config: missing key 'g2." + gk + "'");
    sc.g2.x_nm = cfg_double(kv, "g2.x_nm", 0.0);
    sc.g2.y_nm = cfg_double(kv, "g2.y_nm", 0.0);
    sc.g2.duration_s = cfg_double(kv, "g2.duration_s", 0.0);
    sc.g2.bin_width_ns = cfg_double(kv, "g2.bin_width_ns", 0.0);
    if (!(sc.g2.duration_s > 0.0)) fail_validation("config key 'g2.duration_s': must be > 0");
    if (!(sc.g2.bin_width_ns > 0.0)) fail_validation("config key 'g2.bin_width_ns': must be > 0");
    sc.has_g2 = true;
  }

  if (!sc.has_grid && !sc.has_sweep && !sc.has_g2)
    fail_validation("config describes no measurement: give a grid, sweep or g2 section");

  validate(sc.scene);
  return sc;
}

void write_manifest(const std::string& path, const Scenario& sc) {
  std::ostringstream os;
  os << "seed = " << sc.seed << '\n';
  os << "n_emitters = " << sc.n_emitters << '\n';
  os << "resamples = " << sc.resamples << '\n';
  os << "orders =";
  for (const int m : sc.orders) os << ' ' << m;
  os << '\n';
  os << "scene.pump_angle_deg = " << format_g17(sc.scene.pump_angle_deg) << '\n';
  os << "psf.sigma_nm = " << format_g17(sc.scene.psf.sigma_nm) << '\n';
  const Detector& d = sc.scene.detector;
  os << "detector.r = " << format_g17(d.r) << '\n';
  os << "detector.t = " << format_g17(d.t) << '\n';
  os << "detector.tw_ns = " << format_g17(d.tw_ns) << '\n';
  os << "detector.k_bunch = " << format_g17(d.k_bunch) << '\n';
  os << "detector.tau_a_ns = " << format_g17(d.tau_a_ns) << '\n';
  os << "detector.capture_frac = " << format_g17(d.capture_frac) << '\n';
  os << "detector.bg_cps = " << format_g17(d.bg_cps) << '\n';
  for (size_t i = 0; i < sc.scene.emitters.size(); ++i) {
    const Emitter& e = sc.scene.emitters[i];
    const std::string base = "emitter." + std::to_string(i) + ".";
    os << base << "x_nm = " << format_g17(e.x_nm) << '\n';
    os << base << "y_nm = " << format_g17(e.y_nm) << '\n';
    os << base << "alpha_cps = " << format_g17(e.alpha_cps) << '\n';
    os << base << "beta_cps = " << format_g17(e.beta_cps) << '\n';
  }
  if (sc.has_grid) {
    os << "grid.nx = " << sc.grid.nx << '\n';
    os << "grid.ny = " << sc.grid.ny << '\n';
    os << "grid.pitch_nm = " << format_g17(sc.grid.pitch_nm) << '\n';
    os << "grid.x0_nm = " << format_g17(sc.grid.x0_nm) << '\n';
    os << "grid.y0_nm = " << format_g17(sc.grid.y0_nm) << '\n';
    os << "grid.dwell_s = " << format_g17(sc.grid.dwell_s) << '\n';
  }
  if (sc.has_sweep) {
    os << "sweep.angles_deg =";
    for (const double a : sc.sweep.angles_deg) os << ' ' << format_g17(a);
    os << '\n';
    os << "sweep.dwell_s = " << format_g17(sc.sweep.dwell_s) << '\n';
    os << "sweep.positions =";
    for (const auto& [x, y] : sc.sweep.positions_nm)
      os << ' ' << format_g17(x) << ' ' << format_g17(y);
    os << '\n';
  }
  if (sc.has_g2) {
    os << "g2.x_nm = " << format_g17(sc.g2.x_nm) << '\n';
    os << "g2.y_nm = " << format_g17(sc.g2.y_nm) << '\n';
    os << "g2.duration_s = " << format_g17(sc.g2.duration_s) << '\n';
    os << "g2.bin_width_ns = " << format_g17(sc.g2.bin_width_ns) << '\n';
  }
  write_text_file(path, os.str());
}

void report_value(Report& rep, const std::string& key, double value) {
  rep.emplace_back(key, format_g17(value));
}

void report_value_err(Report& rep, const std::string& key, double value, double err) {
  report_value(rep, key, value);
  report_value(rep, key + ".err", err);
}

void write_report(const std::string& path, const Report& rep) {
  std::ostringstream os;
  for (const auto& [k, v] : rep) os << k << " = " << v << '\n';
  write_text_file(path, os.str());
}

void write_sweep(const std::string& path, const SweepTable& table, double x_nm, double y_nm,
                 double dwell_s) {
  std::ostringstream os;
  os << "# x_nm " << format_g17(x_nm) << '\n';
  os << "# y_nm " << format_g17(y_nm) << '\n';
  os << "# dwell_s " << format_g17(dwell_s) << '\n';
  os << "# n_angles " << table.size() << '\n';
  for (const SweepPoint& p : table)
    os << format_g17(p.angle_deg) << ' ' << p.d1 << ' ' << p.d2 << ' ' << p.c2 << '\n';
  write_text_file(path, os.str());
}

SweepData read_sweep(const std::string& path) {
  const std::string what = "sweep file '" + path + "'";
  std::string data;
  const auto hdr = read_header(read_text_file(path), what, data);
  SweepData sd;
  sd.x_nm = parse_double_str(header_get(hdr, "x_nm", what), what + " x_nm");
  sd.y_nm = parse_double_str(header_get(hdr, "y_nm", what), what + " y_nm");
  sd.dwell_s = parse_double_str(header_get(hdr, "dwell_s", what), what + " dwell_s");
  const long long n = parse_int_str(header_get(hdr, "n_angles", what), what + " n_angles");
  std::istringstream is(data);
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto toks = split_ws(t);
    if (toks.size() != 4) fail_validation(what + ": expected 4 columns, got '" + t + "'");
    SweepPoint p;
    p.angle_deg = parse_double_str(toks[0], what);
    p.d1 = parse_int_str(toks[1], what);
    p.d2 = parse_int_str(toks[2], what);
    p.c2 = parse_int_str(toks[3], what);
    sd.table.push_back(p);
  }
  if (n != (long long)sd.table.size())
    fail_validation(what + ": n_angles header does not match the row count");
  return sd;
}

void write_g2(const std::string& path, const G2Histogram& h) {
  std::ostringstream os;
  os << "# bin_width_ns " << format_g17(h.bin_width_ns) << '\n';
  os << "# total_starts " << h.total_starts << '\n';
  os << "# n_bins " << h.counts.size() << '\n';
  for (size_t i = 0; i < h.counts.size(); ++i)
    os << format_g17(h.tau_ns[i]) << ' ' << h.counts[i] << '\n';
  write_text_file(path, os.str());
}

G2Histogram read_g2(const std::string& path) {
  const std::string what = "g2 file '" + path + "'";
  std::string data;
  const auto hdr = read_header(read_text_file(path), what, data);
  G2Histogram h;
  h.bin_width_ns = parse_double_str(header_get(hdr, "bin_width_ns", what), what + " bin_width_ns");
  h.total_starts = parse_int_str(header_get(hdr, "total_starts", what), what + " total_starts");
  const long long n = parse_int_str(header_get(hdr, "n_bins", what), what + " n_bins");
  std::istringstream is(data);
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto toks = split_ws(t);
    if (toks.size() != 2) fail_validation(what + ": expected 2 columns, got '" + t + "'");
    h.tau_ns.push_back(parse_double_str(toks[0], what));
    h.counts.push_back(parse_int_str(toks[1], what));
  }
  if (n != (long long)h.counts.size())
    fail_validation(what + ": n_bins header does not match the row count");
  return h;
}

}  // namespace qsi
