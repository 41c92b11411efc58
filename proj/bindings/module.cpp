#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "diffcast/data.hpp"
#include "diffcast/diffusion.hpp"
#include "diffcast/framework.hpp"
#include "diffcast/metrics.hpp"

namespace py = pybind11;
using namespace diffcast;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(arr.shape(i));
  std::vector<real> values(arr.data(), arr.data() + arr.size());
  return Tensor(std::move(shape), std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy_n(t.data(), t.numel(), out.mutable_data());
  return out;
}

DataRange range_from_pair(const std::pair<double, double>& p) { return DataRange{p.first, p.second}; }

}  // namespace

PYBIND11_MODULE(_diffcast, m) {
  m.doc() = "Residual-diffusion precipitation nowcasting core";

  // ---- core ----
  m.def(
      "validate_config", [](const std::string& json_text) { return validate_config(config_from_json_text(json_text)); },
      py::arg("config_json"), "Invariant violations for a config JSON document (empty list when valid)");
  m.def("default_config_json", [] { return config_to_json_text(ModelConfig{}); });
  m.def(
      "normalize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& raw,
         std::pair<double, double> data_range) {
        return array_from_tensor(normalize(tensor_from_array(raw), range_from_pair(data_range)).frames);
      },
      py::arg("raw"), py::arg("data_range"));
  m.def(
      "denormalize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& frames,
         std::pair<double, double> data_range) {
        RadarSequence seq{tensor_from_array(frames), range_from_pair(data_range)};
        return array_from_tensor(denormalize(seq));
      },
      py::arg("frames"), py::arg("data_range"));

  // ---- diffusion ----
  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_property_readonly("T", &NoiseSchedule::steps)
      .def_property_readonly("betas", [](const NoiseSchedule& s) { return s.betas(); })
      .def_property_readonly("alphas", [](const NoiseSchedule& s) { return s.alphas(); })
      .def_property_readonly("alpha_bars", [](const NoiseSchedule& s) { return s.alpha_bars(); })
      .def_property_readonly("posterior_sigmas", [](const NoiseSchedule& s) { return s.posterior_sigmas(); });
  m.def(
      "make_linear_schedule",
      [](int64_t T, double beta_start, double beta_end, const std::string& sigma_kind) {
        return make_linear_schedule(T, beta_start, beta_end,
                                    sigma_kind == "posterior" ? SigmaKind::Posterior : SigmaKind::SqrtBeta);
      },
      py::arg("T"), py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02,
      py::arg("sigma_kind") = "sqrt_beta");
  m.def(
      "forward_diffuse",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x0, int64_t t,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& eps, const NoiseSchedule& s) {
        return array_from_tensor(forward_diffuse(tensor_from_array(x0), t, tensor_from_array(eps), s));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
  m.def(
      "ddpm_reverse_step",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& xt, int64_t t,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& eps_hat,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& noise, const NoiseSchedule& s) {
        return array_from_tensor(
            ddpm_reverse_step(tensor_from_array(xt), t, tensor_from_array(eps_hat), tensor_from_array(noise), s));
      },
      py::arg("xt"), py::arg("t"), py::arg("eps_hat"), py::arg("noise"), py::arg("schedule"));
  m.def(
      "ddim_reverse_step",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& xt, int64_t t, int64_t t_prev,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& eps_hat, const NoiseSchedule& s,
         double eta) {
        return array_from_tensor(ddim_reverse_step(tensor_from_array(xt), t, t_prev, tensor_from_array(eps_hat), s, eta));
      },
      py::arg("xt"), py::arg("t"), py::arg("t_prev"), py::arg("eps_hat"), py::arg("schedule"),
      py::arg("eta") = 0.0);

  // ---- metrics ----
  m.def(
      "binarize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& frames, double threshold,
         std::pair<double, double> data_range) {
        return array_from_tensor(metrics::binarize(tensor_from_array(frames), threshold, range_from_pair(data_range)));
      },
      py::arg("frames"), py::arg("threshold"), py::arg("data_range"));
  m.def(
      "csi",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth) {
        return metrics::csi(metrics::confusion_counts(tensor_from_array(pred), tensor_from_array(truth)));
      },
      py::arg("pred_mask"), py::arg("true_mask"));
  m.def(
      "hss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth) {
        return metrics::hss(metrics::confusion_counts(tensor_from_array(pred), tensor_from_array(truth)));
      },
      py::arg("pred_mask"), py::arg("true_mask"));
  m.def(
      "pooled_csi",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth, double threshold,
         int64_t pool, std::pair<double, double> data_range) {
        return metrics::pooled_csi(tensor_from_array(pred), tensor_from_array(truth), threshold, pool,
                                   range_from_pair(data_range));
      },
      py::arg("pred"), py::arg("truth"), py::arg("threshold"), py::arg("pool"), py::arg("data_range"));
  m.def(
      "ssim",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& truth, int64_t window,
         double sigma) { return metrics::ssim(tensor_from_array(pred), tensor_from_array(truth), window, sigma); },
      py::arg("pred_frame"), py::arg("true_frame"), py::arg("window") = 11, py::arg("sigma") = 1.5);

  // ---- data ----
  m.def(
      "generate_sequence",
      [](const std::string& config_json, uint64_t seed) {
        data::SyntheticConfig cfg = data::synthetic_config_from_json_text(config_json);
        Rng rng(seed);
        return array_from_tensor(data::generate_sequence(cfg, rng).frames);
      },
      py::arg("config_json") = "{}", py::arg("seed") = 0);
  m.def(
      "filter_events",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& frames, double T_pixel,
         int64_t L_in, int64_t L_out) {
        RadarSequence s{tensor_from_array(frames), DataRange{0.0, 1.0}};
        auto events = data::filter_events(s, T_pixel, L_in, L_out);
        py::list out;
        for (const auto& ev : events) {
          py::dict d;
          d["id"] = ev.id;
          d["x"] = array_from_tensor(ev.x.frames);
          d["y"] = array_from_tensor(ev.y.frames);
          out.append(d);
        }
        return out;
      },
      py::arg("frames"), py::arg("T_pixel"), py::arg("L_in") = 5, py::arg("L_out") = 20);
  m.def(
      "make_benchmark",
      [](const std::string& root, int64_t train, int64_t val, int64_t test, double T_pixel, int64_t L_in,
         int64_t L_out, uint64_t seed, const std::string& synth_json) {
        data::BenchmarkParams params;
        params.synth = data::synthetic_config_from_json_text(synth_json);
        params.counts = {train, val, test};
        params.T_pixel = T_pixel;
        params.L_in = L_in;
        params.L_out = L_out;
        params.seed = seed;
        data::EventStore store = data::make_benchmark(params, root);
        return static_cast<int64_t>(store.entries.size());
      },
      py::arg("root"), py::arg("train"), py::arg("val"), py::arg("test"), py::arg("T_pixel") = 0.05,
      py::arg("L_in") = 5, py::arg("L_out") = 8, py::arg("seed") = 0, py::arg("synth_json") = "{}");

  // ---- framework ----
  py::class_<TrainStepReport>(m, "TrainStepReport")
      .def_readonly("loss_total", &TrainStepReport::loss_total)
      .def_readonly("loss_deterministic", &TrainStepReport::loss_deterministic)
      .def_readonly("loss_denoising_per_segment", &TrainStepReport::loss_denoising_per_segment)
      .def_readonly("grad_norm_backbone", &TrainStepReport::grad_norm_backbone)
      .def_readonly("grad_norm_denoiser", &TrainStepReport::grad_norm_denoiser)
      .def_readonly("grad_norm_globalnet", &TrainStepReport::grad_norm_globalnet)
      .def_readonly("step", &TrainStepReport::step)
      .def("loss_denoising_sum", &TrainStepReport::loss_denoising_sum);

  py::class_<DiffCastModel>(m, "DiffCastModel")
      .def(py::init([](const std::string& config_json, int64_t data_channels) {
             return new DiffCastModel(config_from_json_text(config_json), data_channels);
           }),
           py::arg("config_json"), py::arg("data_channels") = 1)
      .def("config_json", [](const DiffCastModel& m2) { return config_to_json_text(m2.config()); })
      .def("parameter_count",
           [](const DiffCastModel& m2) {
             int64_t n = 0;
             for (auto* p : m2.backbone_params()) n += p->value().numel();
             for (auto* p : m2.denoiser_params()) n += p->value().numel();
             for (auto* p : m2.globalnet_params()) n += p->value().numel();
             return n;
           })
      .def(
          "training_step",
          [](DiffCastModel& m2, const std::vector<std::pair<py::array_t<double, py::array::c_style>,
                                                            py::array_t<double, py::array::c_style>>>& batch,
             uint64_t seed) {
            std::vector<EventSample> events;
            int64_t idx = 0;
            for (const auto& [x, y] : batch) {
              EventSample ev;
              ev.x = RadarSequence{tensor_from_array(x), DataRange{0.0, 1.0}};
              ev.y = RadarSequence{tensor_from_array(y), DataRange{0.0, 1.0}};
              ev.id = "py-" + std::to_string(idx++);
              events.push_back(std::move(ev));
            }
            Rng rng(seed);
            return m2.training_step(events, rng);
          },
          py::arg("batch"), py::arg("seed"),
          "One optimizer step on [(x, y)] pairs of [L,H,W,C] arrays in [0,1]")
      .def(
          "forecast",
          [](const DiffCastModel& m2, const py::array_t<double, py::array::c_style>& x, uint64_t seed) {
            RadarSequence seq{tensor_from_array(x), DataRange{0.0, 1.0}};
            Rng rng(seed);
            Prediction pred = m2.forecast(seq, rng);
            py::dict out;
            out["mu"] = array_from_tensor(pred.mu);
            out["residual_hat"] = array_from_tensor(pred.residual_hat);
            out["y_hat"] = array_from_tensor(pred.y_hat);
            out["y_hat_clamped"] = array_from_tensor(pred.y_hat_clamped);
            return out;
          },
          py::arg("x"), py::arg("seed"))
      .def("set_training_mode", &DiffCastModel::set_training_mode, py::arg("frozen_backbone"),
           py::arg("use_globalnet"), py::arg("alpha"))
      .def("save_checkpoint", &DiffCastModel::save_checkpoint)
      .def("load_checkpoint", &DiffCastModel::load_checkpoint);
}
