#include "advseg/encodings.hpp"

#include <stdexcept>
#include <string>

#include "advseg/layers.hpp"
#include "advseg/losses.hpp"

namespace advseg {

std::string_view encoding_name(Encoding e) {
    switch (e) {
        case Encoding::Basic: return "basic";
        case Encoding::Product: return "product";
        case Encoding::Scaling: return "scaling";
    }
    return "basic";
}

Encoding parse_encoding(std::string_view name) {
    if (name == "basic") return Encoding::Basic;
    if (name == "product") return Encoding::Product;
    if (name == "scaling") return Encoding::Scaling;
    throw std::invalid_argument("unknown encoding '" + std::string(name) + "'");
}

std::size_t encoded_channels(const EncodingKind& enc, std::size_t classes) {
    return enc.kind == Encoding::Product ? 3 * classes : classes;
}

Tensor one_hot(const LabelMap& labels, std::size_t classes) {
    return one_hot(std::span<const LabelMap>(&labels, 1), classes);
}

Tensor one_hot(std::span<const LabelMap> labels, std::size_t classes) {
    if (labels.empty()) throw std::invalid_argument("one_hot: empty batch");
    const std::size_t h = labels[0].height, w = labels[0].width, plane = h * w;
    std::vector<double> out(labels.size() * classes * plane, 0.0);
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b].height != h || labels[b].width != w) {
            throw std::invalid_argument("one_hot: label maps differ in size");
        }
        for (std::size_t i = 0; i < plane; ++i) {
            const Label l = labels[b].values[i];
            if (l == kVoid) continue;
            if (l >= classes) {
                throw std::invalid_argument("one_hot: label " + std::to_string(l) +
                                            " >= class count " + std::to_string(classes));
            }
            out[(b * classes + l) * plane + i] = 1.0;
        }
    }
    return Tensor({labels.size(), classes, h, w}, std::move(out));
}

LabelMap downsample_labels(const LabelMap& labels, std::size_t stride) {
    if (stride == 0 || labels.height % stride != 0 || labels.width % stride != 0) {
        throw std::invalid_argument("downsample_labels: extents " + std::to_string(labels.height) +
                                    "x" + std::to_string(labels.width) +
                                    " not divisible by stride " + std::to_string(stride));
    }
    LabelMap out(labels.height / stride, labels.width / stride);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c) out.at(r, c) = labels.at(r * stride, c * stride);
    return out;
}

Tensor downsample_image(const Tensor& image, std::size_t stride) {
    if (image.rank() != 4) throw std::invalid_argument("downsample_image: expected rank 4");
    const std::size_t planes = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
    if (stride == 0 || h % stride != 0 || w % stride != 0) {
        throw std::invalid_argument("downsample_image: extents not divisible by stride");
    }
    if (stride == 1) return image.detach();
    const std::size_t ho = h / stride, wo = w / stride;
    auto x = image.data();
    std::vector<double> out(planes * ho * wo);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t c = 0; c < wo; ++c)
                out[(p * ho + r) * wo + c] = x[(p * h + r * stride) * w + c * stride];
    return Tensor({image.dim(0), image.dim(1), ho, wo}, std::move(out));
}

AdvInput encode_basic(const Tensor& prob, const VoidMask& mask, Provenance provenance) {
    return {apply_void_zeroing(prob, mask), provenance};
}

AdvInput encode_product(const Tensor& image, const Tensor& prob, const VoidMask& mask,
                        Provenance provenance) {
    if (image.rank() != 4 || prob.rank() != 4) {
        throw std::invalid_argument("encode_product: expected rank-4 image and prob");
    }
    Tensor img = image;
    if (image.dim(2) != prob.dim(2)) {
        if (image.dim(2) % prob.dim(2) != 0) {
            throw std::invalid_argument("encode_product: image " + shape_to_string(image.shape()) +
                                        " is not a stride multiple of prob " +
                                        shape_to_string(prob.shape()));
        }
        img = downsample_image(image, image.dim(2) / prob.dim(2));
    }
    return {channel_product(apply_void_zeroing(prob, mask), img), provenance};
}

Tensor encode_scaling(const Tensor& pred, std::span<const LabelMap> labels, double tau) {
    if (pred.rank() != 4) throw std::invalid_argument("encode_scaling: expected N x C x H x W");
    const std::size_t n = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
    if (labels.size() != n) throw std::invalid_argument("encode_scaling: batch size mismatch");
    if (!(tau > 1.0 / static_cast<double>(c)) || tau > 1.0) {
        throw std::invalid_argument("encode_scaling: tau must lie in (1/C, 1]");
    }
    const std::size_t plane = h * w;
    auto s = pred.data();
    std::vector<double> out(s.size(), 0.0);
    for (std::size_t b = 0; b < n; ++b) {
        if (labels[b].height != h || labels[b].width != w) {
            throw std::invalid_argument("encode_scaling: label map does not match prediction");
        }
        for (std::size_t i = 0; i < plane; ++i) {
            const Label l = labels[b].values[i];
            if (l == kVoid) continue;
            if (l >= c) throw std::invalid_argument("encode_scaling: label out of range");
            const std::size_t base = b * c * plane + i;
            const double sl = s[base + l * plane];
            if (sl >= 1.0) {
                out[base + l * plane] = 1.0;
                continue;
            }
            const double yl = std::max(tau, sl);
            const double factor = (1.0 - yl) / (1.0 - sl);
            for (std::size_t k = 0; k < c; ++k) {
                out[base + k * plane] = k == l ? yl : s[base + k * plane] * factor;
            }
        }
    }
    return Tensor(pred.shape(), std::move(out));
}

AdvPair build_adv_pair(const Tensor& images, std::span<const LabelMap> labels,
                       const Tensor& seg_out, const EncodingKind& enc) {
    if (seg_out.rank() != 4) throw std::invalid_argument("build_adv_pair: bad segmenter output");
    const std::size_t classes = seg_out.dim(1);
    const VoidMask mask = VoidMask::from_labels(labels);

    AdvPair pair;
    switch (enc.kind) {
        case Encoding::Basic:
            pair.ground_truth = encode_basic(one_hot(labels, classes), mask, Provenance::GroundTruth);
            pair.predicted = encode_basic(seg_out, mask, Provenance::Predicted);
            break;
        case Encoding::Product:
            pair.ground_truth =
                encode_product(images, one_hot(labels, classes), mask, Provenance::GroundTruth);
            pair.predicted = encode_product(images, seg_out, mask, Provenance::Predicted);
            break;
        case Encoding::Scaling:
            pair.ground_truth = encode_basic(encode_scaling(seg_out.detach(), labels, enc.tau), mask,
                                             Provenance::GroundTruth);
            pair.predicted = encode_basic(seg_out, mask, Provenance::Predicted);
            break;
    }
    if (enc.include_image) {
        pair.image = apply_void_zeroing(downsample_image(images, images.dim(2) / seg_out.dim(2)), mask);
    }
    return pair;
}

}  // namespace advseg
