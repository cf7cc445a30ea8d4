// Adversary inputs built from label maps, segmenter outputs and images.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "advseg/label_map.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

enum class Encoding { Basic, Product, Scaling };

std::string_view encoding_name(Encoding e);
Encoding parse_encoding(std::string_view name);

struct EncodingKind {
    Encoding kind = Encoding::Basic;
    double tau = 0.9;            // Scaling only; must lie in (1/C, 1]
    bool include_image = false;  // feed the down-sampled image to a second branch
};

enum class Provenance { GroundTruth, Predicted };

struct AdvInput {
    Tensor channels;  // N x C' x H x W, all-zero at void positions
    Provenance provenance = Provenance::GroundTruth;
};

struct AdvPair {
    AdvInput ground_truth;
    AdvInput predicted;
    Tensor image;  // N x 3 x H x W when include_image (void pixels zeroed), else undefined
};

/// Channel count C' the adversary sees for C classes.
std::size_t encoded_channels(const EncodingKind& enc, std::size_t classes);

/// 1 x C x H x W (or N x C x H x W for a batch). Void pixels are all-zero.
Tensor one_hot(const LabelMap& labels, std::size_t classes);
Tensor one_hot(std::span<const LabelMap> labels, std::size_t classes);

/// Nearest-neighbour: out(i, j) = in(i * stride, j * stride).
LabelMap downsample_labels(const LabelMap& labels, std::size_t stride);

/// Nearest-neighbour subsampling of an N x K x H x W image.
Tensor downsample_image(const Tensor& image, std::size_t stride);

AdvInput encode_basic(const Tensor& prob, const VoidMask& mask,
                      Provenance provenance = Provenance::Predicted);

/// Multiplies each class map with each colour channel (3C channels). The
/// image may be at the probability map's resolution or an integer multiple of
/// it, in which case it is down-sampled first. Void zeroing is applied to prob
/// before the product.
AdvInput encode_product(const Tensor& image, const Tensor& prob, const VoidMask& mask,
                        Provenance provenance = Provenance::Predicted);

/// Ground-truth side of the Scaling scheme: at each labeled pixel with true
/// label l, ybar_l = max(tau, s_l) and the remaining classes keep the
/// proportions of s. Void pixels are all-zero. The result carries no graph.
Tensor encode_scaling(const Tensor& pred, std::span<const LabelMap> labels, double tau);

/// Both adversary inputs for one batch. labels must already match seg_out's
/// resolution; images are at full resolution. Only the predicted side is
/// differentiable.
AdvPair build_adv_pair(const Tensor& images, std::span<const LabelMap> labels,
                       const Tensor& seg_out, const EncodingKind& enc);

}  // namespace advseg
