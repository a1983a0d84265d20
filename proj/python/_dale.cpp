#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dale/calib.hpp"
#include "dale/dataio.hpp"
#include "dale/error.hpp"
#include "dale/metrics.hpp"
#include "dale/partition.hpp"
#include "dale/trainer.hpp"

namespace py = pybind11;
using namespace dale;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <typename T> py::array_t<T> to_numpy(const Grid<T> &g) {
  py::array_t<T> a({g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), a.mutable_data());
  return a;
}

template <typename T> Grid<T> to_grid(const py::array_t<T, py::array::c_style | py::array::forcecast> &a) {
  if (a.ndim() != 2)
    throw py::value_error("expected a 2-D array");
  Grid<T> g(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), g.data.begin());
  return g;
}

Tensor to_tensor(const F64 &a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> image_array(const Tensor &t) {
  py::array_t<double> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::dict sample_dict(const Sample &s) {
  py::dict d;
  d["image"] = image_array(s.image);
  d["label"] = to_numpy(s.label);
  d["clean_label"] = to_numpy(s.clean_label);
  d["noise_mask"] = to_numpy(s.noise_mask);
  return d;
}

py::dict row_dict(const MetricRow &r) {
  py::dict d;
  d["Dice"] = r.dice;
  d["mIoU"] = r.miou;
  d["HD95"] = r.hd95;
  d["ASD"] = r.asd;
  return d;
}

} // namespace

PYBIND11_MODULE(_dale, m) {
  m.doc() = "Bindings for the dale noisy-label segmentation library.";

  py::register_exception<dale::Error>(m, "DaleError", PyExc_RuntimeError);

  m.def(
      "synthetic_splits",
      [](std::size_t n, std::size_t test_n, std::size_t hw, double blur, double rate,
         int band, std::uint64_t seed) {
        GeneratorConfig g;
        g.n = n;
        g.height = g.width = hw;
        g.blur_sigma = blur;
        g.seed = seed;
        NoiseConfig nc;
        nc.rate = rate;
        nc.band = band;
        nc.seed = seed;
        const auto sp = make_synthetic_splits(g, test_n, nc);
        py::list train, test;
        for (const auto &s : sp.train)
          train.append(sample_dict(s));
        for (const auto &s : sp.test)
          test.append(sample_dict(s));
        return py::make_tuple(train, test);
      },
      py::arg("n") = 200, py::arg("test_n") = 50, py::arg("hw") = 32,
      py::arg("blur") = 3.0, py::arg("rate") = 0.3, py::arg("band") = 2,
      py::arg("seed") = 0);

  m.def(
      "write_synthetic_dataset",
      [](const std::string &dir, std::size_t n, std::size_t test_n, std::size_t hw,
         double rate, std::uint64_t seed) {
        GeneratorConfig g;
        g.n = n;
        g.height = g.width = hw;
        g.seed = seed;
        NoiseConfig nc;
        nc.rate = rate;
        nc.seed = seed;
        const auto sp = make_synthetic_splits(g, test_n, nc);
        write_dataset(dir, sp.train, sp.test, "{}", g.classes);
      },
      py::arg("dir"), py::arg("n") = 200, py::arg("test_n") = 50, py::arg("hw") = 32,
      py::arg("rate") = 0.3, py::arg("seed") = 0);

  m.def("avg_entropy",
        [](const F64 &patch, int bins) {
          return avg_entropy(std::span<const double>(patch.data(), patch.size()), bins);
        },
        py::arg("patch"), py::arg("bins") = 32);
  m.def("edge_ratio",
        [](const U8 &label) {
          const auto l = to_grid<std::uint8_t>(label);
          return edge_ratio(l, 0, 0, l.height, l.width);
        },
        py::arg("label"));
  m.def("mask_values", &mask_values, py::arg("m"), py::arg("tau"));
  m.def(
      "patch_scores",
      [](const F64 &image, const U8 &label, std::size_t patch, int bins) {
        Sample s;
        s.label = to_grid<std::uint8_t>(label);
        s.clean_label = s.label;
        s.noise_mask = Mask(s.label.height, s.label.width, 0);
        s.image = Tensor({1, s.label.height, s.label.width},
                         std::vector<double>(image.data(), image.data() + image.size()));
        PartitionConfig pc;
        pc.patch_h = pc.patch_w = patch;
        pc.bins = bins;
        const auto sc = score_patches(s, pc);
        py::dict d;
        d["rows"] = sc.rows;
        d["cols"] = sc.cols;
        d["r"] = sc.r;
        d["e"] = sc.e;
        d["m"] = sc.m;
        return d;
      },
      py::arg("image"), py::arg("label"), py::arg("patch") = 16, py::arg("bins") = 32);

  m.def("dice", [](const U8 &a, const U8 &b) { return dice(to_grid<std::uint8_t>(a), to_grid<std::uint8_t>(b)); });
  m.def("miou", [](const U8 &a, const U8 &b, std::size_t classes) {
    return miou(to_grid<std::uint8_t>(a), to_grid<std::uint8_t>(b), classes);
  }, py::arg("pred"), py::arg("gt"), py::arg("classes") = 2);
  m.def("hd95", [](const U8 &a, const U8 &b) { return hd95(to_grid<std::uint8_t>(a), to_grid<std::uint8_t>(b)); });
  m.def("asd", [](const U8 &a, const U8 &b) { return asd(to_grid<std::uint8_t>(a), to_grid<std::uint8_t>(b)); });

  m.def(
      "bures_w2",
      [](const std::vector<double> &m1, const F64 &c1, const std::vector<double> &m2,
         const F64 &c2) { return bures_w2(m1, to_tensor(c1), m2, to_tensor(c2)); },
      py::arg("mean1"), py::arg("cov1"), py::arg("mean2"), py::arg("cov2"));

  m.def("default_config", [] { return config_to_json(RunConfig{}); });
  m.def(
      "train",
      [](const std::string &data_dir, const std::string &config_json,
         const std::string &out_dir) {
        const auto cfg = config_from_json(config_json);
        auto ds = load_dataset(data_dir);
        Trainer tr(cfg, std::move(ds.train), std::move(ds.test));
        if (!out_dir.empty())
          tr.set_output(out_dir);
        {
          py::gil_scoped_release release;
          tr.run();
        }
        return tr.metrics_csv();
      },
      py::arg("data_dir"), py::arg("config_json") = "{}", py::arg("out_dir") = "");
  m.def(
      "evaluate_checkpoint",
      [](const std::string &ckpt, const std::string &data_dir, bool clean) {
        const auto [cfg, st] = decode_checkpoint(read_file(ckpt));
        const auto ds = load_dataset(data_dir);
        return row_dict(evaluate(st.params, ds.test, cfg.C, clean));
      },
      py::arg("ckpt"), py::arg("data_dir"), py::arg("clean") = true);
}
