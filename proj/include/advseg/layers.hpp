// Differentiable layers on N x C x H x W tensors.

#pragma once

#include <cstddef>

#include "advseg/tensor.hpp"

namespace advseg {

struct ConvParams {
    Tensor kernel;  // out_channels x in_channels x kh x kw
    Tensor bias;    // out_channels
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;  // symmetric zero padding
};

/// Output extent of a strided, dilated, zero-padded convolution along one
/// axis, or 0 when the effective kernel does not fit.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t dilation, std::size_t padding);

/// Cross-correlation (no kernel flip) plus per-channel bias.
Tensor conv2d(const Tensor& input, const ConvParams& p);

/// Non-overlapping 2x2 max pooling. Ties route the gradient to the first
/// element of the window in row-major order.
Tensor maxpool2(const Tensor& input);

Tensor relu(const Tensor& x);

/// 1 / (1 + exp(-x)) with x clamped to [-30, 30] first.
Tensor sigmoid(const Tensor& x);

/// Softmax over axis 1 at every (n, h, w). Requires at least two channels.
Tensor channel_softmax(const Tensor& x);

/// Per-class copies of an image: output channel c * K + k equals
/// prob[c] * image[k]. prob is N x C x H x W, image N x K x H x W.
Tensor channel_product(const Tensor& prob, const Tensor& image);

inline constexpr double kSigmoidClamp = 30.0;

/// Per-channel local contrast normalization with a box window:
/// (x - local_mean) / max(local_std, 0.01). Windows are clipped at the
/// borders. Preprocessing only; the result carries no graph.
Tensor local_contrast_normalize(const Tensor& image, std::size_t window = 9);

}  // namespace advseg
