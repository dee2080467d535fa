#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "solens/applications.hpp"
#include "solens/cli.hpp"
#include "solens/container.hpp"
#include "solens/effects.hpp"
#include "solens/errors.hpp"
#include "solens/eval_harness.hpp"
#include "solens/model.hpp"
#include "solens/rank1.hpp"
#include "solens/sparse_decomp.hpp"
#include "solens/vit_engine.hpp"

namespace py = pybind11;
using namespace solens;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_of(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray array_of(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    FloatArray out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

py::object json_to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

WeightBundle load_weights(const std::filesystem::path& dir) {
    const Container c = read_container(dir);
    if (!c.manifest.attributes.contains("model_spec"))
        throw ValidationError("weights container has no model_spec attribute");
    return WeightBundle::from_tensors(c.tensors, c.manifest.attributes.at("model_spec").get<ModelSpec>());
}

std::vector<ImageTrace> traces_of(const WeightBundle& w, const FloatArray& images, int jobs) {
    const ModelSpec& s = w.spec;
    if (images.ndim() != 4 || images.shape(1) != 3 || images.shape(2) != s.image_size ||
        images.shape(3) != s.image_size)
        throw ValidationError("images must have shape (n, 3, " + std::to_string(s.image_size) + ", " +
                              std::to_string(s.image_size) + ")");
    return trace_images(w, tensor_of(images), jobs);
}

TextPool pool_of(const Eigen::MatrixXf& embeddings) {
    std::vector<std::string> phrases;
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i) phrases.push_back("phrase_" + std::to_string(i));
    return TextPool::make(std::move(phrases), embeddings);
}

}  // namespace

PYBIND11_MODULE(_solens, m) {
    m.doc() = "Second-order neuron effects for CLIP-style ViT encoders";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

    m.attr("FORMAT_TAG") = kFormatTag;
    m.attr("FORMAT_VERSION") = kFormatVersion;

    m.def("read_container", [](const std::filesystem::path& dir) {
        const Container c = read_container(dir);
        py::dict tensors;
        for (const auto& [name, t] : c.tensors) tensors[py::str(name)] = array_of(t);
        py::dict strings;
        for (const auto& [name, s] : c.strings) strings[py::str(name)] = s;
        return py::make_tuple(json_to_py(manifest_to_json(c.manifest)), tensors, strings);
    }, py::arg("path"), "Returns (manifest dict, {name: float32 array}, {name: list of str}).");

    m.def("write_container",
          [](const std::filesystem::path& dir, const std::map<std::string, FloatArray>& tensors,
             const std::map<std::string, std::string>& roles, bool overwrite) {
              Container c;
              for (const auto& [name, a] : tensors) {
                  auto it = roles.find(name);
                  c.put(name, it == roles.end() ? std::string("unspecified") : it->second, tensor_of(a));
              }
              write_container(c, dir, WriteOptions{overwrite});
          },
          py::arg("path"), py::arg("tensors"), py::arg("roles") = std::map<std::string, std::string>{},
          py::arg("overwrite") = false);

    py::class_<ModelSpec>(m, "ModelSpec")
        .def_readonly("layers", &ModelSpec::layers)
        .def_readonly("heads", &ModelSpec::heads)
        .def_readonly("width", &ModelSpec::width)
        .def_readonly("d_model", &ModelSpec::d_model)
        .def_readonly("d_out", &ModelSpec::d_out)
        .def_readonly("patch_size", &ModelSpec::patch_size)
        .def_readonly("image_size", &ModelSpec::image_size)
        .def_property_readonly("patches", &ModelSpec::patches)
        .def("__repr__", [](const ModelSpec& s) {
            nlohmann::json j = s;
            return "ModelSpec(" + j.dump() + ")";
        });

    py::class_<WeightBundle>(m, "Model")
        .def_static("toy", [](std::uint64_t seed) { return generate_toy(seed, toy_spec()); }, py::arg("seed") = 0)
        .def_static("load", &load_weights, py::arg("path"))
        .def_readonly("spec", &WeightBundle::spec)
        .def("representations",
             [](const WeightBundle& w, const FloatArray& images, int jobs) {
                 return Eigen::MatrixXf(representations(traces_of(w, images, jobs)));
             },
             py::arg("images"), py::arg("jobs") = 0, "Image representations, (n, d_out).")
        .def("post_gelu",
             [](const WeightBundle& w, const FloatArray& image, int layer) {
                 const ImageTrace t = forward(w, std::span<const float>(image.data(), image.size()));
                 if (layer < 0 || layer >= w.spec.layers) throw ValidationError("layer out of range");
                 return Eigen::MatrixXf(t.post_gelu[static_cast<std::size_t>(layer)]);
             },
             py::arg("image"), py::arg("layer"), "Post-GELU activations of one image, (tokens, N).")
        .def("second_order",
             [](const WeightBundle& w, const FloatArray& images, int layer, std::optional<std::vector<int>> neurons,
                bool bias_shares, int jobs) {
                 const auto traces = traces_of(w, images, jobs);
                 std::vector<int> ns;
                 if (neurons) ns = *neurons;
                 else
                     for (int n = 0; n < w.spec.width; ++n) ns.push_back(n);
                 EffectOptions opt;
                 opt.bias_shares = bias_shares;
                 opt.jobs = jobs;
                 const SecondOrderField f = second_order(w, traces, layer, ns, opt);
                 FloatArray out({static_cast<py::ssize_t>(f.n_images), static_cast<py::ssize_t>(ns.size()),
                                 static_cast<py::ssize_t>(f.d_out)});
                 std::copy(f.phi.begin(), f.phi.end(), out.mutable_data());
                 return out;
             },
             py::arg("images"), py::arg("layer"), py::arg("neurons") = py::none(), py::arg("bias_shares") = true,
             py::arg("jobs") = 0, "Second-order effects, (images, neurons, d_out).")
        .def("indirect_effect",
             [](const WeightBundle& w, const FloatArray& image, int layer, int neuron,
                const Eigen::VectorXf& token_means) {
                 return Eigen::VectorXf(
                     indirect_effect(w, std::span<const float>(image.data(), image.size()), layer, neuron, token_means));
             },
             py::arg("image"), py::arg("layer"), py::arg("neuron"), py::arg("token_means"));

    m.def("fit_direction",
          [](const Eigen::MatrixXd& support, std::optional<Eigen::VectorXd> center) {
              const Eigen::VectorXd c = center ? *center : Eigen::VectorXd(support.colwise().mean().transpose());
              const NeuronDirection d = fit_direction_from(support, c, c);
              return py::make_tuple(Eigen::VectorXf(d.r), d.variance_explained, d.degenerate);
          },
          py::arg("support"), py::arg("center") = py::none(),
          "Leading direction of the rows of `support` about `center` (default: their mean). "
          "Returns (r, variance_explained, degenerate).");

    m.def("omp",
          [](const Eigen::VectorXd& r, const Eigen::MatrixXf& embeddings, int k) {
              const SparseCode c = omp(r, pool_of(embeddings), k);
              return py::make_tuple(c.indices, c.gamma, Eigen::VectorXd(c.r_hat), c.residual_norm);
          },
          py::arg("r"), py::arg("embeddings"), py::arg("m"),
          "Orthogonal matching pursuit over the unit-normalized rows of `embeddings`. "
          "Returns (indices, gamma, r_hat, residual_norm).");

    m.def("upsample_bilinear",
          [](const FloatArray& grid, int size) {
              if (grid.ndim() != 2 || grid.shape(0) != grid.shape(1))
                  throw ValidationError("grid must be square");
              const auto v = upsample_bilinear(std::span<const float>(grid.data(), grid.size()),
                                               static_cast<int>(grid.shape(0)), size);
              return array_of(Tensor({size, size}, v));
          },
          py::arg("grid"), py::arg("size"));

    m.def("average_precision",
          [](const std::vector<float>& scores, const std::vector<std::uint8_t>& labels) {
              return average_precision(scores, labels);
          },
          py::arg("scores"), py::arg("labels"), "Average precision in percent.");

    m.def("segmentation_metrics",
          [](const std::vector<FloatArray>& heatmaps, const std::vector<py::array_t<std::uint8_t>>& masks,
             float threshold) {
              if (heatmaps.size() != masks.size()) throw ValidationError("heatmaps and masks differ in count");
              std::vector<Heatmap> pred;
              std::vector<BinaryMask> truth;
              for (std::size_t i = 0; i < heatmaps.size(); ++i) {
                  const auto& h = heatmaps[i];
                  const auto& t = masks[i];
                  if (h.ndim() != 2 || t.ndim() != 2 || h.shape(0) != t.shape(0) || h.shape(1) != t.shape(1))
                      throw ValidationError("heatmap and mask " + std::to_string(i) + " differ in shape");
                  Heatmap p;
                  p.size = static_cast<int>(h.shape(0));
                  p.upsampled.assign(h.data(), h.data() + h.size());
                  for (float v : p.upsampled) p.mask.push_back(v >= threshold ? 1 : 0);
                  pred.push_back(std::move(p));
                  BinaryMask b;
                  b.height = static_cast<int>(t.shape(0));
                  b.width = static_cast<int>(t.shape(1));
                  b.data.assign(t.data(), t.data() + t.size());
                  truth.push_back(std::move(b));
              }
              const SegmentationMetrics s = segmentation_metrics(pred, truth);
              py::dict d;
              d["pixel_acc"] = s.pixel_accuracy;
              d["miou"] = s.miou;
              d["map"] = s.map;
              d["images_without_foreground"] = s.images_without_foreground;
              return d;
          },
          py::arg("heatmaps"), py::arg("masks"), py::arg("threshold") = 0.5f,
          "Pixel accuracy, mIoU and mAP in percent.");

    m.def("cli",
          [](const std::vector<std::string>& args) {
              std::ostringstream out, err;
              int code;
              {
                  py::gil_scoped_release release;
                  code = dispatch(args, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"), "Runs a solens subcommand. Returns (exit code, stdout, stderr).");
}
