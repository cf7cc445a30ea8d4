#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "advseg/commands.hpp"
#include "advseg/encodings.hpp"
#include "advseg/gradcheck_suite.hpp"
#include "advseg/layers.hpp"
#include "advseg/losses.hpp"
#include "advseg/metrics.hpp"
#include "advseg/networks.hpp"
#include "advseg/scenes.hpp"

namespace py = pybind11;
using namespace advseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
    Shape s(a.shape(), a.shape() + a.ndim());
    return Tensor(s, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> s(t.shape().begin(), t.shape().end());
    py::array_t<double> out(s);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

LabelMap to_labels(const U8& a) {
    if (a.ndim() != 2) throw std::invalid_argument("label map must be 2-D");
    return LabelMap(a.shape(0), a.shape(1), std::vector<Label>(a.data(), a.data() + a.size()));
}

std::vector<LabelMap> to_label_batch(const U8& a) {
    if (a.ndim() == 2) return {to_labels(a)};
    if (a.ndim() != 3) throw std::invalid_argument("labels must be H x W or N x H x W");
    std::vector<LabelMap> out;
    const std::size_t n = a.shape(0), h = a.shape(1), w = a.shape(2);
    for (std::size_t i = 0; i < n; ++i)
        out.emplace_back(h, w, std::vector<Label>(a.data() + i * h * w, a.data() + (i + 1) * h * w));
    return out;
}

py::array_t<std::uint8_t> to_array(const LabelMap& m) {
    py::array_t<std::uint8_t> out({m.height, m.width});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    d["per_class_acc"] = r.per_class_acc;
    d["mean_class_acc"] = r.mean_class_acc;
    d["pixel_acc"] = r.pixel_acc;
    d["iou"] = r.iou;
    d["mean_iou"] = r.mean_iou;
    d["mean_bf"] = r.mean_bf;
    d["bf_std"] = r.bf_std;
    d["bf_images"] = r.bf_images;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Adversarial semantic segmentation core";
    m.attr("VOID") = static_cast<int>(kVoid);

    m.def(
        "generate_scene",
        [](std::size_t index, std::uint64_t seed, std::size_t height, std::size_t width, std::size_t classes) {
            SceneSpec s;
            s.seed = seed;
            s.height = height;
            s.width = width;
            s.classes = classes;
            const Sample smp = generate_scene(s, index);
            return py::make_tuple(to_array(smp.image), to_array(smp.labels), smp.id);
        },
        py::arg("index"), py::arg("seed") = 1, py::arg("height") = 64, py::arg("width") = 64, py::arg("classes") = 4);

    m.def(
        "conv2d",
        [](const F64& x, const F64& k, const F64& b, std::size_t stride, std::size_t dilation, std::size_t padding) {
            return to_array(conv2d(to_tensor(x), ConvParams{to_tensor(k), to_tensor(b), stride, dilation, padding}));
        },
        py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1, py::arg("dilation") = 1,
        py::arg("padding") = 0);
    m.def("maxpool2", [](const F64& x) { return to_array(maxpool2(to_tensor(x))); });
    m.def("channel_softmax", [](const F64& x) { return to_array(channel_softmax(to_tensor(x))); });
    m.def("sigmoid", [](const F64& x) { return to_array(sigmoid(to_tensor(x))); });
    m.def(
        "local_contrast_normalize",
        [](const F64& x, std::size_t window) { return to_array(local_contrast_normalize(to_tensor(x), window)); },
        py::arg("image"), py::arg("window") = 9);

    m.def("one_hot", [](const U8& labels, std::size_t classes) {
        return to_array(one_hot(to_label_batch(labels), classes));
    });
    m.def("encode_scaling", [](const F64& pred, const U8& labels, double tau) {
        return to_array(encode_scaling(to_tensor(pred), to_label_batch(labels), tau));
    }, py::arg("pred"), py::arg("labels"), py::arg("tau") = 0.9);
    m.def("encode_product", [](const F64& image, const F64& prob, const U8& labels) {
        const auto l = to_label_batch(labels);
        return to_array(encode_product(to_tensor(image), to_tensor(prob), VoidMask::from_labels(l)).channels);
    });

    m.def("mce_loss", [](const F64& pred, const U8& labels) {
        const auto l = to_label_batch(labels);
        const Tensor p = to_tensor(pred);
        return mce_loss(p, one_hot(l, p.dim(1)), VoidMask::from_labels(l)).item();
    });
    m.def("bce_loss", [](const F64& pred, int target) { return bce_loss(to_tensor(pred), target).item(); });

    m.def("confusion", [](const U8& pred, const U8& gt, std::size_t classes) {
        const ConfusionMatrix cm = confusion(to_labels(pred), to_labels(gt), classes);
        py::array_t<std::uint64_t> out({classes, classes});
        for (std::size_t g = 0; g < classes; ++g)
            for (std::size_t p = 0; p < classes; ++p) out.mutable_at(g, p) = cm.at(g, p);
        return out;
    });
    m.def("evaluate", [](const U8& preds, const U8& gts, std::size_t classes, double tolerance_px) {
        const auto p = to_label_batch(preds), g = to_label_batch(gts);
        const double diag = image_diagonal(g.front().height, g.front().width);
        return report_dict(evaluate_predictions(p, g, classes, BFConfig{tolerance_px, diag}));
    }, py::arg("preds"), py::arg("gts"), py::arg("classes"), py::arg("tolerance_px") = 5.0);

    m.def("receptive_field", [](const std::string& net, const std::string& fov) {
        NetSpec spec;
        if (net == "segmenter") {
            spec = build_segmenter(4);
        } else if (net == "adversary") {
            AdversaryOptions o;
            o.fov = fov == "small" ? FieldOfView::Small : FieldOfView::Large;
            spec = build_adversary(o);
        } else {
            throw std::invalid_argument("net must be 'segmenter' or 'adversary'");
        }
        const ReceptiveField rf = receptive_field(spec);
        return py::make_tuple(rf.rf_h, rf.rf_w, rf.stride);
    }, py::arg("net"), py::arg("fov") = "large");

    m.def("gradcheck_suite", [](std::uint64_t seed) {
        py::list out;
        for (const auto& c : run_gradcheck_suite(seed)) out.append(py::make_tuple(c.group, c.name, c.max_rel_error));
        return out;
    }, py::arg("seed") = 7);

    m.def(
        "run_command",
        [](const std::string& name, const std::map<std::string, std::string>& config,
           const std::filesystem::path& output_dir, std::size_t jobs) {
            CommandContext ctx;
            for (const auto& [k, v] : config) ctx.config.set(k, v);
            ctx.output_dir = output_dir;
            ctx.jobs = jobs;
            std::ostringstream out, err;
            ctx.out = &out;
            ctx.err = &err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_command(name, ctx);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("name"), py::arg("config") = std::map<std::string, std::string>{}, py::arg("output_dir") = "out",
        py::arg("jobs") = 1);
}
