// Python bindings for the core operations: tensor kernels, network
// construction, replicated training and synthetic data generation.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ptrain/bench.hpp"
#include "ptrain/datapipe.hpp"
#include "ptrain/model.hpp"
#include "ptrain/replicasync.hpp"

namespace py = pybind11;
using namespace ptrain;

namespace {

Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw std::invalid_argument("expected a 4-D float32 array (n,c,h,w)");
  Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
           static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
  std::memcpy(t.data.data(), a.data(), t.size() * sizeof(float));
  return t;
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  py::array_t<float> a({t.n, t.c, t.h, t.w});
  std::memcpy(a.mutable_data(), t.data.data(), t.size() * sizeof(float));
  return a;
}

std::vector<float> vec_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  return std::vector<float>(a.data(), a.data() + a.size());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "data-parallel ConvNet training engine";

  py::class_<NetworkSpec>(m, "NetworkSpec")
      .def_property_readonly("classes", &NetworkSpec::classes)
      .def_property_readonly("state_float_count", &NetworkSpec::state_float_count)
      .def_property_readonly("layer_count",
                             [](const NetworkSpec& s) { return s.layers.size(); });

  py::class_<ParamState>(m, "ParamState")
      .def("flatten", [](const ParamState& s) {
        const std::vector<std::uint8_t> wire = flatten_state(s);
        return py::bytes(reinterpret_cast<const char*>(wire.data()), wire.size());
      });

  m.def("unflatten_state", [](const py::bytes& wire, const NetworkSpec& spec) {
    const std::string_view sv = wire;
    return unflatten_state(
        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(sv.data()),
                                      sv.size()),
        spec);
  });

  m.def(
      "conv2d_forward",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& input,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& weights,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& bias,
         int stride, int pad) {
        const Tensor in = tensor_from_array(input), w = tensor_from_array(weights);
        const std::vector<float> b = vec_from_array(bias);
        const ConvSpec spec{w.n, w.h, w.w, stride, pad};
        return array_from_tensor(conv2d_forward(in, w, b, spec));
      },
      py::arg("input"), py::arg("weights"), py::arg("bias"), py::arg("stride") = 1,
      py::arg("pad") = 0);

  m.def(
      "maxpool_forward",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& input, int ph,
         int pw, int stride) {
        const PoolResult r = maxpool_forward(tensor_from_array(input), PoolSpec{ph, pw, stride});
        return py::make_tuple(array_from_tensor(r.output), r.argmax);
      },
      py::arg("input"), py::arg("ph") = 2, py::arg("pw") = 2, py::arg("stride") = 2);

  m.def("relu", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x) {
    return array_from_tensor(relu(tensor_from_array(x)));
  });

  m.def("softmax_xent",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& logits,
           const std::vector<int>& labels) {
          const SoftmaxResult r = softmax_xent(tensor_from_array(logits), labels);
          return py::make_tuple(r.loss, array_from_tensor(r.probs),
                                array_from_tensor(r.grad_logits));
        });

  m.def(
      "build_alexnet_scaled",
      [](int c, int h, int w, int classes, float width_scale) {
        return build_alexnet_scaled(Shape3{c, h, w}, classes, width_scale);
      },
      py::arg("c"), py::arg("h"), py::arg("w"), py::arg("classes"),
      py::arg("width_scale") = 0.25f);

  m.def("init_params", &init_params, py::arg("spec"), py::arg("seed") = 0);

  m.def(
      "generate_synthetic",
      [](std::uint32_t n, std::uint32_t classes, std::uint32_t c, std::uint32_t h,
         std::uint32_t w, std::uint64_t seed) {
        const RawDataset ds = generate_synthetic(n, classes, c, h, w, seed);
        py::array_t<std::uint8_t> pixels({static_cast<int>(n), static_cast<int>(c),
                                          static_cast<int>(h), static_cast<int>(w)});
        std::memcpy(pixels.mutable_data(), ds.pixels.data(), ds.pixels.size());
        py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(n));
        std::memcpy(labels.mutable_data(), ds.labels.data(), ds.labels.size() * 4);
        return py::make_tuple(pixels, labels);
      },
      py::arg("n"), py::arg("classes"), py::arg("c"), py::arg("h"), py::arg("w"),
      py::arg("seed") = 0);

  m.def(
      "train_replicated",
      [](const NetworkSpec& spec,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& pixels,
         const py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>& labels,
         std::uint32_t classes, int workers, int global_batch, int iterations,
         bool parallel_loading, const std::string& transport, float lr, float momentum,
         std::uint64_t seed, int crop) {
        if (pixels.ndim() != 4) throw std::invalid_argument("pixels must be (n,c,h,w) uint8");
        RawDataset ds;
        ds.n = static_cast<std::uint32_t>(pixels.shape(0));
        ds.c = static_cast<std::uint32_t>(pixels.shape(1));
        ds.h = static_cast<std::uint32_t>(pixels.shape(2));
        ds.w = static_cast<std::uint32_t>(pixels.shape(3));
        ds.classes = classes;
        ds.pixels.assign(pixels.data(), pixels.data() + pixels.size());
        ds.labels.assign(labels.data(), labels.data() + labels.size());
        const MeanImage mean = compute_mean_image(ds);

        if (global_batch % workers != 0)
          throw std::invalid_argument("global batch must be divisible by workers");
        TrainOptions opt;
        opt.workers = workers;
        opt.per_replica_batch = global_batch / workers;
        opt.iterations = iterations;
        opt.parallel_loading = parallel_loading;
        opt.transport = transport_from_name(transport);
        opt.hyper.learning_rate = lr;
        opt.hyper.momentum = momentum;
        opt.seed = seed;
        opt.preproc.crop_h = opt.preproc.crop_w = crop;
        opt.preproc.aug_seed = seed;

        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_replicated(spec, ds, mean, opt);
        }
        py::dict out;
        out["loss_trace"] = r.loss_trace;
        out["params"] = py::cast(std::move(r.params));
        out["sync_rounds"] = r.sync.rounds;
        out["sync_bytes_per_round"] = r.sync.bytes_per_round;
        out["loop_seconds"] = r.loop_seconds;
        return out;
      },
      py::arg("spec"), py::arg("pixels"), py::arg("labels"), py::arg("classes"),
      py::arg("workers") = 1, py::arg("global_batch") = 64, py::arg("iterations") = 20,
      py::arg("parallel_loading") = true, py::arg("transport") = "direct",
      py::arg("lr") = 0.01f, py::arg("momentum") = 0.9f, py::arg("seed") = 0,
      py::arg("crop") = 32);

  m.def("forward_logits",
        [](const NetworkSpec& spec, const ParamState& params,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& images) {
          return array_from_tensor(forward_logits(spec, params, tensor_from_array(images)));
        });
}
