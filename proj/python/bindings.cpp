#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qsi/estimate.hpp"
#include "qsi/io.hpp"
#include "qsi/model.hpp"
#include "qsi/pipeline.hpp"
#include "qsi/reconstruct.hpp"
#include "qsi/simulate.hpp"
#include "qsi/types.hpp"

namespace py = pybind11;
using namespace qsi;

namespace {

template <typename T>
py::array_t<T> image_to_array(const Image<T>& img) {
  py::array_t<T> out({img.ny, img.nx});
  std::copy(img.v.begin(), img.v.end(), out.mutable_data());
  return out;
}

template <typename T>
using c_array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Image<T> array_to_image(const c_array<T>& arr) {
  if (arr.ndim() != 2) throw py::value_error("expected a 2d array (ny, nx)");
  Image<T> img(int(arr.shape(1)), int(arr.shape(0)));
  std::copy(arr.data(), arr.data() + arr.size(), img.v.begin());
  return img;
}

py::object report_to_dict(const Report& rep) {
  py::dict out;
  for (const auto& [k, v] : rep) {
    try {
      size_t used = 0;
      const double num = std::stod(v, &used);
      if (used == v.size()) {
        out[py::str(k)] = py::float_(num);
        continue;
      }
    } catch (const std::exception&) {
    }
    out[py::str(k)] = py::str(v);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_qsi, m) {
  m.doc() = "antibunched-emitter scanning simulator and moment-unmixing toolkit";
  m.attr("__version__") = "0.1.0";

  static py::exception<Error> qsi_error(m, "QsiError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(qsi_error.ptr(), e.what());
    }
  });

  py::class_<Emitter>(m, "Emitter")
      .def(py::init<>())
      .def(py::init<double, double, double, double>(), py::arg("x_nm"), py::arg("y_nm"),
           py::arg("alpha_cps"), py::arg("beta_cps") = 0.0)
      .def_readwrite("x_nm", &Emitter::x_nm)
      .def_readwrite("y_nm", &Emitter::y_nm)
      .def_readwrite("alpha_cps", &Emitter::alpha_cps)
      .def_readwrite("beta_cps", &Emitter::beta_cps);

  py::class_<Psf>(m, "Psf")
      .def(py::init<>())
      .def(py::init<double>(), py::arg("sigma_nm"))
      .def_readwrite("sigma_nm", &Psf::sigma_nm);

  py::class_<Detector>(m, "Detector")
      .def(py::init<>())
      .def_readwrite("r", &Detector::r)
      .def_readwrite("t", &Detector::t)
      .def_readwrite("tw_ns", &Detector::tw_ns)
      .def_readwrite("k_bunch", &Detector::k_bunch)
      .def_readwrite("tau_a_ns", &Detector::tau_a_ns)
      .def_readwrite("capture_frac", &Detector::capture_frac)
      .def_readwrite("bg_cps", &Detector::bg_cps);

  py::class_<ScanGrid>(m, "ScanGrid")
      .def(py::init<>())
      .def_readwrite("x0_nm", &ScanGrid::x0_nm)
      .def_readwrite("y0_nm", &ScanGrid::y0_nm)
      .def_readwrite("pitch_nm", &ScanGrid::pitch_nm)
      .def_readwrite("nx", &ScanGrid::nx)
      .def_readwrite("ny", &ScanGrid::ny)
      .def_readwrite("dwell_s", &ScanGrid::dwell_s)
      .def("npx", &ScanGrid::npx)
      .def("x_at", &ScanGrid::x_at, py::arg("ix"))
      .def("y_at", &ScanGrid::y_at, py::arg("iy"));

  py::class_<Scene>(m, "Scene")
      .def(py::init<>())
      .def_readwrite("emitters", &Scene::emitters)
      .def_readwrite("psf", &Scene::psf)
      .def_readwrite("detector", &Scene::detector)
      .def_readwrite("pump_angle_deg", &Scene::pump_angle_deg);

  py::enum_<PixelFlag>(m, "PixelFlag")
      .value("ok", PixelFlag::ok)
      .value("clamped_discriminant", PixelFlag::clamped_discriminant)
      .value("below_noise_floor", PixelFlag::below_noise_floor);

  py::class_<ScanData>(m, "ScanData")
      .def_readonly("grid", &ScanData::grid)
      .def_readonly("pump_angle_deg", &ScanData::pump_angle_deg)
      .def_readonly("seed", &ScanData::seed)
      .def_readonly("detector", &ScanData::detector)
      .def_property_readonly(
          "singles_d1", [](const ScanData& sd) { return image_to_array(sd.singles_d1); })
      .def_property_readonly(
          "singles_d2", [](const ScanData& sd) { return image_to_array(sd.singles_d2); })
      .def_property_readonly("coincidences",
                             [](const ScanData& sd) {
                               py::list out;
                               for (const auto& [mo, img] : sd.coincidences)
                                 out.append(py::make_tuple(mo, image_to_array(img)));
                               return out;
                             })
      .def("order", [](const ScanData& sd, int mo) -> py::object {
        const Image<int64_t>* img = sd.order(mo);
        return img ? py::object(image_to_array(*img)) : py::none();
      });

  py::class_<G2Histogram>(m, "G2Histogram")
      .def_readonly("bin_width_ns", &G2Histogram::bin_width_ns)
      .def_readonly("tau_ns", &G2Histogram::tau_ns)
      .def_readonly("counts", &G2Histogram::counts)
      .def_readonly("total_starts", &G2Histogram::total_starts);

  py::class_<SweepPoint>(m, "SweepPoint")
      .def_readonly("angle_deg", &SweepPoint::angle_deg)
      .def_readonly("d1", &SweepPoint::d1)
      .def_readonly("d2", &SweepPoint::d2)
      .def_readonly("c2", &SweepPoint::c2);

  py::class_<PairSolution>(m, "PairSolution")
      .def_readonly("ia", &PairSolution::ia)
      .def_readonly("ib", &PairSolution::ib)
      .def_readonly("flag", &PairSolution::flag);

  py::class_<SymmetricSolution>(m, "SymmetricSolution")
      .def_readonly("roots", &SymmetricSolution::roots)
      .def_readonly("flag", &SymmetricSolution::flag);

  py::class_<ReconstructOptions>(m, "ReconstructOptions")
      .def(py::init<>())
      .def_readwrite("bg_cps", &ReconstructOptions::bg_cps)
      .def_readwrite("eta_overrides", &ReconstructOptions::eta_overrides)
      .def_readwrite("pair_bar", &ReconstructOptions::pair_bar)
      .def_readwrite("split_bar", &ReconstructOptions::split_bar)
      .def_readwrite("solid_bar", &ReconstructOptions::solid_bar)
      .def_readwrite("min_split_px", &ReconstructOptions::min_split_px);

  py::class_<EmitterImages>(m, "EmitterImages")
      .def_readonly("grid", &EmitterImages::grid)
      .def_property_readonly("images",
                             [](const EmitterImages& ei) {
                               py::list out;
                               for (const auto& img : ei.images) out.append(image_to_array(img));
                               return out;
                             })
      .def_property_readonly("variances",
                             [](const EmitterImages& ei) {
                               py::list out;
                               for (const auto& img : ei.variances) out.append(image_to_array(img));
                               return out;
                             })
      .def_property_readonly("flags",
                             [](const EmitterImages& ei) { return image_to_array(ei.flags); })
      .def_property_readonly("labeled",
                             [](const EmitterImages& ei) { return image_to_array(ei.labeled); });

  py::class_<Gaussian2DFit>(m, "Gaussian2DFit")
      .def_readonly("x0_nm", &Gaussian2DFit::x0_nm)
      .def_readonly("y0_nm", &Gaussian2DFit::y0_nm)
      .def_readonly("sigma_x_nm", &Gaussian2DFit::sigma_x_nm)
      .def_readonly("sigma_y_nm", &Gaussian2DFit::sigma_y_nm)
      .def_readonly("amplitude", &Gaussian2DFit::amplitude)
      .def_readonly("offset", &Gaussian2DFit::offset)
      .def_property_readonly("cov",
                             [](const Gaussian2DFit& f) {
                               py::array_t<double> out({6, 6});
                               std::copy(f.cov.begin(), f.cov.end(), out.mutable_data());
                               return out;
                             })
      .def_readonly("cost", &Gaussian2DFit::cost)
      .def_readonly("iterations", &Gaussian2DFit::iterations)
      .def_readonly("n_pixels", &Gaussian2DFit::n_pixels);

  py::class_<DistanceEstimate>(m, "DistanceEstimate")
      .def_readonly("distance_nm", &DistanceEstimate::distance_nm)
      .def_readonly("err_nm", &DistanceEstimate::err_nm);

  py::class_<PairDistance>(m, "PairDistance")
      .def_readonly("fit_a", &PairDistance::fit_a)
      .def_readonly("fit_b", &PairDistance::fit_b)
      .def_readonly("distance", &PairDistance::distance);

  py::class_<Cos2Fit>(m, "Cos2Fit")
      .def_readonly("alpha_cps", &Cos2Fit::alpha_cps)
      .def_readonly("beta_cps", &Cos2Fit::beta_cps)
      .def_readonly("alpha_err", &Cos2Fit::alpha_err)
      .def_readonly("beta_err", &Cos2Fit::beta_err)
      .def_readonly("cost", &Cos2Fit::cost)
      .def_readonly("n_points", &Cos2Fit::n_points);

  py::class_<G2Fit>(m, "G2Fit")
      .def_readonly("g2_zero", &G2Fit::g2_zero)
      .def_readonly("g2_zero_err", &G2Fit::g2_zero_err)
      .def_readonly("tau_a_ns", &G2Fit::tau_a_ns)
      .def_readonly("tau_a_err", &G2Fit::tau_a_err)
      .def_readonly("plateau_counts", &G2Fit::plateau_counts)
      .def_readonly("cost", &G2Fit::cost)
      .def_readonly("iterations", &G2Fit::iterations);

  py::class_<BootstrapResult>(m, "BootstrapResult")
      .def_readonly("std_distance_nm", &BootstrapResult::std_distance_nm)
      .def_readonly("n_success", &BootstrapResult::n_success)
      .def_readonly("n_fail", &BootstrapResult::n_fail)
      .def_readonly("distances_nm", &BootstrapResult::distances_nm);

  py::class_<SweepSpec>(m, "SweepSpec")
      .def_readonly("angles_deg", &SweepSpec::angles_deg)
      .def_readonly("dwell_s", &SweepSpec::dwell_s)
      .def_readonly("positions_nm", &SweepSpec::positions_nm);

  py::class_<G2Spec>(m, "G2Spec")
      .def_readonly("x_nm", &G2Spec::x_nm)
      .def_readonly("y_nm", &G2Spec::y_nm)
      .def_readonly("duration_s", &G2Spec::duration_s)
      .def_readonly("bin_width_ns", &G2Spec::bin_width_ns);

  py::class_<Scenario>(m, "Scenario")
      .def_readonly("scene", &Scenario::scene)
      .def_readonly("has_grid", &Scenario::has_grid)
      .def_readonly("grid", &Scenario::grid)
      .def_readonly("orders", &Scenario::orders)
      .def_readonly("seed", &Scenario::seed)
      .def_readonly("n_emitters", &Scenario::n_emitters)
      .def_readonly("resamples", &Scenario::resamples)
      .def_readonly("has_sweep", &Scenario::has_sweep)
      .def_readonly("sweep", &Scenario::sweep)
      .def_readonly("has_g2", &Scenario::has_g2)
      .def_readonly("g2", &Scenario::g2);

  py::class_<GridData>(m, "GridData")
      .def_readonly("grid", &GridData::grid)
      .def_readonly("unit", &GridData::unit)
      .def_property_readonly("values", [](const GridData& gd) {
        py::array_t<double> out({gd.grid.ny, gd.grid.nx});
        std::copy(gd.values.begin(), gd.values.end(), out.mutable_data());
        return out;
      });

  // closed-form model
  m.def("emitter_rate", &emitter_rate, py::arg("emitter"), py::arg("phi_deg"));
  m.def("psf_rate", &psf_rate, py::arg("emitter"), py::arg("phi_deg"), py::arg("psf"),
        py::arg("x_nm"), py::arg("y_nm"));
  m.def("expected_singles", &expected_singles, py::arg("scene"), py::arg("x_nm"), py::arg("y_nm"));
  m.def("emitter_rates_at", &emitter_rates_at, py::arg("scene"), py::arg("x_nm"), py::arg("y_nm"));
  m.def("expected_coincidences_m", &expected_coincidences_m, py::arg("scene"), py::arg("m"),
        py::arg("eta_m"), py::arg("x_nm"), py::arg("y_nm"));
  m.def("g2_tau", &g2_tau, py::arg("rates"), py::arg("detector"), py::arg("tau_ns"));
  m.def("eta_2", &eta_2, py::arg("detector"), py::arg("r1_cps"), py::arg("r2_cps"));
  m.def("eta_m_default", &eta_m_default, py::arg("detector"), py::arg("m"));
  m.def("accidental_rate", &accidental_rate, py::arg("detector"), py::arg("r1_cps"),
        py::arg("r2_cps"));
  m.def("esym", &esym, py::arg("values"));

  // simulation
  m.def("simulate_scan", &simulate_scan, py::arg("scene"), py::arg("grid"), py::arg("orders"),
        py::arg("seed"));
  m.def("simulate_g2", &simulate_g2, py::arg("scene"), py::arg("x_nm"), py::arg("y_nm"),
        py::arg("duration_s"), py::arg("bin_width_ns"), py::arg("seed"));
  m.def("simulate_polarization_sweep", &simulate_polarization_sweep, py::arg("scene"),
        py::arg("x_nm"), py::arg("y_nm"), py::arg("angles_deg"), py::arg("dwell_s"),
        py::arg("seed"));

  // unmixing
  m.def("solve_pair", &solve_pair, py::arg("s1"), py::arg("p2"));
  m.def("solve_symmetric", &solve_symmetric, py::arg("e1_to_eN"));
  m.def(
      "subtract_background",
      [](const ScanData& sd, std::optional<double> bg_cps) {
        return image_to_array(subtract_background(sd, bg_cps));
      },
      py::arg("scan"), py::arg("bg_cps") = std::nullopt);
  m.def("reconstruct", &reconstruct, py::arg("scan"), py::arg("calib"), py::arg("n_emitters"),
        py::arg("options") = ReconstructOptions{});
  m.def(
      "reconstruct_rates",
      [](const c_array<double>& singles_cps,
         const std::vector<std::pair<int, c_array<double>>>& coincidences_cps,
         const ScanGrid& grid, const Detector& calib, int n_emitters,
         const ReconstructOptions& opt) {
        std::vector<std::pair<int, Image<double>>> cps;
        cps.reserve(coincidences_cps.size());
        for (const auto& [mo, arr] : coincidences_cps) cps.emplace_back(mo, array_to_image(arr));
        return reconstruct_rates(array_to_image(singles_cps), cps, grid, calib, n_emitters, opt);
      },
      py::arg("singles_cps"), py::arg("coincidences_cps"), py::arg("grid"), py::arg("calib"),
      py::arg("n_emitters"), py::arg("options") = ReconstructOptions{});

  // estimation
  m.def(
      "fit_gaussian2d",
      [](const c_array<double>& image, const ScanGrid& grid,
         std::optional<c_array<double>> variance, std::optional<c_array<uint8_t>> mask,
         int max_iterations) {
        const Image<double> img = array_to_image(image);
        Image<double> var;
        Image<uint8_t> msk;
        FitGaussianOptions opt;
        opt.max_iterations = max_iterations;
        if (variance) {
          var = array_to_image(*variance);
          opt.variance = &var;
        }
        if (mask) {
          msk = array_to_image(*mask);
          opt.mask = &msk;
        }
        return fit_gaussian2d(img, grid, opt);
      },
      py::arg("image"), py::arg("grid"), py::arg("variance") = std::nullopt,
      py::arg("mask") = std::nullopt, py::arg("max_iterations") = 200);
  m.def("estimate_distance", &estimate_distance, py::arg("fit_a"), py::arg("fit_b"));
  m.def("estimate_pair_distance", &estimate_pair_distance, py::arg("emitter_images"));
  m.def("fit_cos2", &fit_cos2, py::arg("angles_deg"), py::arg("rates_cps"),
        py::arg("errs_cps") = std::vector<double>{});
  m.def("fit_g2", &fit_g2, py::arg("histogram"));
  m.def("bootstrap_uncertainty", &bootstrap_uncertainty, py::arg("scan"), py::arg("calib"),
        py::arg("n_emitters"), py::arg("n_resamples"),
        py::arg("options") = ReconstructOptions{});

  // files and end-to-end runs
  m.def("load_scenario",
        [](const std::string& path) { return scenario_from_config(read_key_values(path)); },
        py::arg("path"));
  m.def("read_grid", &read_grid, py::arg("path"));
  m.def(
      "run_pipeline",
      [](const std::string& config_path, const std::string& out_dir) {
        const Scenario sc = scenario_from_config(read_key_values(config_path));
        return report_to_dict(run_pipeline(sc, out_dir));
      },
      py::arg("config_path"), py::arg("out_dir"));
}
