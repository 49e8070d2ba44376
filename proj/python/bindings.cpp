// Python bindings: model construction and inference, parameter counts, the scalar
// recursion, the synthetic dataset, gradient checks and the experiment drivers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "cfrpn/checkpoint.hpp"
#include "cfrpn/experiment.hpp"

namespace py = pybind11;
using namespace cfrpn;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& a) {
    if (a.ndim() != 4) throw ShapeError("expected a 4-d array [N, C, H, W]");
    const Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                  static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
    return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
    const Shape& s = t.shape();
    py::array_t<T> out({s.n, s.c, s.h, s.w});
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

ArchitectureConfig make_arch(const std::string& mode, std::size_t width, std::size_t num_classes,
                             std::size_t image_size) {
    auto a = ArchitectureConfig::uniform(parse_mode(mode), width);
    a.num_classes = num_classes;
    a.in_height = image_size;
    a.in_width = image_size;
    return a;
}

py::dict trace_dict(const SampleTrace& t) {
    py::dict d;
    d["t_star"] = t.t_star;
    d["distances"] = t.distances;
    d["reason"] = stop_reason_name(t.reason);
    return d;
}

class PyModel {
public:
    PyModel(const std::string& mode, std::size_t width, std::size_t num_classes, std::size_t image_size,
            std::uint64_t seed)
        : model_(Model<float>::build(make_arch(mode, width, num_classes, image_size), seed)) {}

    std::size_t parameter_count() const { return model_.params().element_count(); }
    std::string mode() const { return mode_name(model_.config().mode); }

    /// Inference-mode logits plus per-stage, per-sample traces of the recursive stages.
    py::tuple forward(const FloatArray& images) const {
        Tape<float> tape;
        const auto fwd = model_.forward(tape, tape.constant(to_tensor<float>(images)));
        py::list stages;
        for (std::size_t s = 0; s < kStages; ++s) {
            if (!fwd.traces.stages[s]) {
                stages.append(py::none());
                continue;
            }
            py::list samples;
            for (const auto& t : fwd.traces.stages[s]->samples) samples.append(trace_dict(t));
            stages.append(samples);
        }
        return py::make_tuple(to_array(tape.value(fwd.logits)), stages);
    }

    void save(const std::string& path) const { save_checkpoint(path, model_.params(), nullptr); }
    void load(const std::string& path) { apply_checkpoint(load_checkpoint(path), model_.params()); }

    py::dict parameters() const {
        py::dict d;
        for (const auto& p : model_.params()) d[py::str(p.name)] = to_array(p.value);
        return d;
    }

private:
    Model<float> model_;
};

py::list rows_to_dicts(const std::vector<ParamRow>& rows) {
    py::list out;
    for (const auto& r : rows) {
        py::dict d;
        d["baseline_width"] = r.baseline_width;
        d["baseline_params"] = r.baseline_params;
        d["cfrpn_width"] = r.reference_cfrpn_width;
        d["cfrpn_params"] = r.reference_cfrpn_params;
        d["relative_gap"] = r.relative_gap;
        d["matched_width"] = r.matched_width;
        d["matched_params"] = r.matched_params;
        out.append(d);
    }
    return out;
}

FlatConfig flat_from(const py::dict& overrides) {
    FlatConfig f;
    for (const auto& [k, v] : overrides) f.set(py::str(k), py::str(v));
    return f;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Convolutional fully recursive perceptron networks";
    m.attr("__version__") = CFRPN_VERSION;

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_IOError);
    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::string&, std::size_t, std::size_t, std::size_t, std::uint64_t>(), py::arg("mode"),
             py::arg("width"), py::arg("num_classes") = 10, py::arg("image_size") = 32, py::arg("seed") = 0)
        .def_property_readonly("parameter_count", &PyModel::parameter_count)
        .def_property_readonly("mode", &PyModel::mode)
        .def("forward", &PyModel::forward, py::arg("images"))
        .def("parameters", &PyModel::parameters)
        .def("save", &PyModel::save, py::arg("path"))
        .def("load", &PyModel::load, py::arg("path"));

    m.def(
        "count_parameters",
        [](const std::string& mode, std::size_t width, std::size_t num_classes) {
            return count_parameters(make_arch(mode, width, num_classes, 32));
        },
        py::arg("mode"), py::arg("width"), py::arg("num_classes") = 10);
    m.def(
        "match_width", [](std::size_t n, std::size_t num_classes) { return match_width(n, make_arch("cfrpn", 1, num_classes, 32)); },
        py::arg("baseline_width"), py::arg("num_classes") = 10);
    m.def("params_table", [] { return rows_to_dicts(params_table(ArchitectureConfig{})); });

    m.def(
        "scalar_recursion",
        [](double alpha, double beta, double bias, double u, const std::string& activation, double epsilon,
           std::size_t max_iterations) {
            FrpnDenseLayer<double> l;
            l.alpha = Tensor<double>(Shape{1, 1, 1, 1}, alpha);
            l.beta = Tensor<double>(Shape{1, 1, 1, 1}, beta);
            l.bias = Tensor<double>(Shape{1, 1, 1, 1}, bias);
            l.activation = activation == "identity" ? Activation::identity
                           : activation == "sigmoid" ? Activation::sigmoid
                           : activation == "relu"    ? Activation::relu
                                                     : throw ConfigError("unknown activation '" + activation + "'");
            const std::vector<double> uv{u}, x0{0.0};
            const auto r = frpn_dense_forward(l, std::span<const double>(uv), std::span<const double>(x0),
                                              ConvergenceConfig{epsilon, max_iterations});
            return py::make_tuple(r.state[0], trace_dict(r.trace));
        },
        py::arg("alpha"), py::arg("beta"), py::arg("bias"), py::arg("u") = 0.0, py::arg("activation") = "relu",
        py::arg("epsilon") = 0.1, py::arg("max_iterations") = 8);

    m.def(
        "conv2d",
        [](const DoubleArray& x, const DoubleArray& k, const std::vector<double>& bias, std::size_t stride,
           std::size_t padding) {
            ConvSpec s;
            s.kernel_h = static_cast<std::size_t>(k.shape(2));
            s.kernel_w = static_cast<std::size_t>(k.shape(3));
            s.stride = stride;
            s.pad_top = s.pad_bottom = s.pad_left = s.pad_right = padding;
            return to_array(kernels::conv2d<double>(to_tensor<double>(x), to_tensor<double>(k), bias, s));
        },
        py::arg("x"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1, py::arg("padding") = 0);

    m.def(
        "synth_shapes",
        [](std::size_t count, std::uint64_t seed) {
            const Dataset d = synth_shapes(count, seed);
            py::array_t<float> images({d.size(), d.channels, d.height, d.width});
            std::copy(d.pixels.begin(), d.pixels.end(), images.mutable_data());
            py::array_t<int> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.size())});
            std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
            return py::make_tuple(images, labels);
        },
        py::arg("count"), py::arg("seed") = 0);

    m.def(
        "gradcheck",
        [](double tolerance) {
            py::list out;
            for (const auto& r : run_gradchecks(tolerance)) {
                py::dict d;
                d["layer"] = r.layer;
                d["max_rel_error"] = r.max_rel_error;
                d["checked"] = r.checked;
                d["passed"] = r.passed;
                out.append(d);
            }
            return out;
        },
        py::arg("tolerance") = 1e-5);

    m.def(
        "train",
        [](const py::dict& overrides, const std::string& out) {
            const auto cfg = ExperimentConfig::from_flat(flat_from(overrides));
            std::ostringstream log;
            std::vector<RunResult> runs;
            {
                py::gil_scoped_release release;
                runs = run_training(cfg, out, log);
            }
            py::list result;
            for (const auto& r : runs) {
                py::dict d;
                d["seed"] = r.seed;
                d["mode"] = mode_name(r.mode);
                d["width"] = r.width;
                d["parameters"] = r.parameters;
                d["train_acc"] = r.final_train_acc();
                d["val_acc"] = r.final_val_acc();
                d["stopping_rule_ok"] = !r.trace_violation.has_value();
                result.append(d);
            }
            return result;
        },
        py::arg("config"), py::arg("out"),
        "Trains one model per seed from flat config keys; writes metrics under `out`.");
}
