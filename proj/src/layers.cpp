#include "advseg/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace advseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank4(const Tensor& t, std::string_view what) {
    if (t.rank() != 4) {
        throw std::invalid_argument(std::string(what) + ": expected N x C x H x W, got " +
                                    shape_to_string(t.shape()));
    }
}

struct ConvGeometry {
    std::size_t n, cin, h, w, cout, kh, kw, stride, dilation, padding, ho, wo;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t out_plane() const { return ho * wo; }
};

// cols is (cin*kh*kw) x (ho*wo), row-major.
void im2col(const ConvGeometry& g, const double* img, double* cols) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.out_plane();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) -
                                    static_cast<long>(g.padding);
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) -
                                        static_cast<long>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                            ix < static_cast<long>(g.w);
                        row[oy * g.wo + ox] =
                            inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                                         static_cast<std::size_t>(ix)]
                                   : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* img) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.out_plane();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) -
                                    static_cast<long>(g.padding);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) -
                                        static_cast<long>(g.padding);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                            static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t dilation, std::size_t padding) {
    const std::size_t effective = dilation * (kernel - 1) + 1;
    const std::size_t padded = in + 2 * padding;
    if (stride == 0 || kernel == 0 || dilation == 0 || effective > padded) return 0;
    return (padded - effective) / stride + 1;
}

Tensor conv2d(const Tensor& input, const ConvParams& p) {
    require_rank4(input, "conv2d");
    require_rank4(p.kernel, "conv2d kernel");
    ConvGeometry g{};
    g.n = input.dim(0);
    g.cin = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.cout = p.kernel.dim(0);
    g.kh = p.kernel.dim(2);
    g.kw = p.kernel.dim(3);
    g.stride = p.stride;
    g.dilation = p.dilation;
    g.padding = p.padding;
    if (p.kernel.dim(1) != g.cin) {
        throw std::invalid_argument("conv2d: kernel expects " + std::to_string(p.kernel.dim(1)) +
                                    " input channels, input has " + std::to_string(g.cin));
    }
    if (p.bias.numel() != g.cout) throw std::invalid_argument("conv2d: bias size mismatch");
    g.ho = conv_output_extent(g.h, g.kh, g.stride, g.dilation, g.padding);
    g.wo = conv_output_extent(g.w, g.kw, g.stride, g.dilation, g.padding);
    if (g.ho == 0 || g.wo == 0) {
        throw std::invalid_argument("conv2d: non-positive output extent for input " +
                                    shape_to_string(input.shape()));
    }

    const std::size_t patch = g.patch(), plane = g.out_plane();
    auto cols = std::make_shared<std::vector<double>>(g.n * patch * plane);
    std::vector<double> out(g.n * g.cout * plane);
    ConstMapMat kmat(p.kernel.data().data(), static_cast<long>(g.cout), static_cast<long>(patch));
    auto x = input.data();
    auto bias = p.bias.data();
    for (std::size_t b = 0; b < g.n; ++b) {
        double* c = cols->data() + b * patch * plane;
        im2col(g, x.data() + b * g.cin * g.h * g.w, c);
        MapMat o(out.data() + b * g.cout * plane, static_cast<long>(g.cout),
                 static_cast<long>(plane));
        o.noalias() = kmat * ConstMapMat(c, static_cast<long>(patch), static_cast<long>(plane));
        for (std::size_t co = 0; co < g.cout; ++co) o.row(static_cast<long>(co)).array() += bias[co];
    }

    Tensor kernel = p.kernel;
    return Tensor::from_op(
        OpKind::Conv2d, {g.n, g.cout, g.ho, g.wo}, std::move(out), {input, p.kernel, p.bias},
        [g, cols, kernel](auto, std::span<const double> grad, auto in) {
            const std::size_t patch = g.patch(), plane = g.out_plane();
            const long lpatch = static_cast<long>(patch), lplane = static_cast<long>(plane),
                       lcout = static_cast<long>(g.cout);
            ConstMapMat kmat(kernel.data().data(), lcout, lpatch);
            RowMat dcols;
            for (std::size_t b = 0; b < g.n; ++b) {
                ConstMapMat go(grad.data() + b * g.cout * plane, lcout, lplane);
                ConstMapMat c(cols->data() + b * patch * plane, lpatch, lplane);
                if (!in[1].empty()) {
                    MapMat dk(in[1].data(), lcout, lpatch);
                    dk.noalias() += go * c.transpose();
                }
                if (!in[2].empty()) {
                    // Plain loop: Eigen's vectorized sum depends on the buffer's alignment.
                    const double* gp = grad.data() + b * g.cout * plane;
                    for (std::size_t co = 0; co < g.cout; ++co) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) s += gp[co * plane + i];
                        in[2][co] += s;
                    }
                }
                if (!in[0].empty()) {
                    dcols.noalias() = kmat.transpose() * go;
                    col2im_add(g, dcols.data(), in[0].data() + b * g.cin * g.h * g.w);
                }
            }
        });
}

Tensor maxpool2(const Tensor& input) {
    require_rank4(input, "maxpool2");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("maxpool2: odd spatial extents " + shape_to_string(input.shape()));
    }
    const std::size_t ho = h / 2, wo = w / 2;
    std::vector<double> out(n * c * ho * wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    auto x = input.data();
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
                const std::size_t first = base + (2 * oy) * w + 2 * ox;
                const std::size_t cand[4] = {first, first + 1, first + w, first + w + 1};
                std::size_t best = cand[0];
                for (int k = 1; k < 4; ++k) {
                    if (x[cand[k]] > x[best]) best = cand[k];
                }
                out[o] = x[best];
                (*argmax)[o] = best;
            }
        }
    }
    return Tensor::from_op(OpKind::MaxPool2, {n, c, ho, wo}, std::move(out), {input},
                           [argmax](auto, std::span<const double> g, auto in) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   in[0][(*argmax)[i]] += g[i];
                           });
}

Tensor relu(const Tensor& x) {
    auto v = x.data();
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return Tensor::from_op(OpKind::Relu, x.shape(), std::move(out), {x},
                           [](std::span<const double> y, std::span<const double> g, auto in) {
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   if (y[i] > 0.0) in[0][i] += g[i];
                           });
}

Tensor sigmoid(const Tensor& x) {
    auto v = x.data();
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double z = std::clamp(v[i], -kSigmoidClamp, kSigmoidClamp);
        out[i] = 1.0 / (1.0 + std::exp(-z));
    }
    return Tensor::from_op(OpKind::Sigmoid, x.shape(), std::move(out), {x},
                           [x](std::span<const double> y, std::span<const double> g, auto in) {
                               auto v = x.data();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   if (std::abs(v[i]) > kSigmoidClamp) continue;
                                   in[0][i] += g[i] * y[i] * (1.0 - y[i]);
                               }
                           });
}

Tensor channel_softmax(const Tensor& x) {
    require_rank4(x, "channel_softmax");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (c < 2) throw std::invalid_argument("channel_softmax: needs at least 2 channels");
    auto v = x.data();
    std::vector<double> out(v.size());
    for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = b * c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            double m = v[base + i];
            for (std::size_t k = 1; k < c; ++k) m = std::max(m, v[base + k * plane + i]);
            double total = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double e = std::exp(v[base + k * plane + i] - m);
                out[base + k * plane + i] = e;
                total += e;
            }
            for (std::size_t k = 0; k < c; ++k) out[base + k * plane + i] /= total;
        }
    }
    return Tensor::from_op(
        OpKind::ChannelSoftmax, x.shape(), std::move(out), {x},
        [n, c, plane](std::span<const double> y, std::span<const double> g, auto in) {
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t base = b * c * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < c; ++k)
                        dot += y[base + k * plane + i] * g[base + k * plane + i];
                    for (std::size_t k = 0; k < c; ++k) {
                        const std::size_t j = base + k * plane + i;
                        in[0][j] += y[j] * (g[j] - dot);
                    }
                }
            }
        });
}

Tensor channel_product(const Tensor& prob, const Tensor& image) {
    require_rank4(prob, "channel_product");
    require_rank4(image, "channel_product image");
    const std::size_t n = prob.dim(0), c = prob.dim(1), h = prob.dim(2), w = prob.dim(3);
    const std::size_t k = image.dim(1);
    if (image.dim(0) != n || image.dim(2) != h || image.dim(3) != w) {
        throw std::invalid_argument("channel_product: image " + shape_to_string(image.shape()) +
                                    " does not match prob " + shape_to_string(prob.shape()));
    }
    const std::size_t plane = h * w;
    auto p = prob.data(), im = image.data();
    std::vector<double> out(n * c * k * plane);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t cc = 0; cc < c; ++cc)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double* ps = p.data() + (b * c + cc) * plane;
                const double* is = im.data() + (b * k + kk) * plane;
                double* dst = out.data() + ((b * c + cc) * k + kk) * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] = ps[i] * is[i];
            }
    return Tensor::from_op(
        OpKind::ChannelProduct, {n, c * k, h, w}, std::move(out), {prob, image},
        [=](auto, std::span<const double> g, auto in) {
            auto p = prob.data(), im = image.data();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t cc = 0; cc < c; ++cc)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double* gs = g.data() + ((b * c + cc) * k + kk) * plane;
                        const std::size_t pi = (b * c + cc) * plane, ii = (b * k + kk) * plane;
                        if (!in[0].empty())
                            for (std::size_t i = 0; i < plane; ++i) in[0][pi + i] += gs[i] * im[ii + i];
                        if (!in[1].empty())
                            for (std::size_t i = 0; i < plane; ++i) in[1][ii + i] += gs[i] * p[pi + i];
                    }
        });
}

Tensor local_contrast_normalize(const Tensor& image, std::size_t window) {
    require_rank4(image, "local_contrast_normalize");
    if (window % 2 == 0) throw std::invalid_argument("local_contrast_normalize: window must be odd");
    const std::size_t planes = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
    if (window > std::min(h, w)) {
        throw std::invalid_argument("local_contrast_normalize: window exceeds image extent");
    }
    constexpr double kStdFloor = 0.01;
    const long r = static_cast<long>(window / 2);
    auto x = image.data();
    std::vector<double> out(x.size());
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const double* src = x.data() + pl * h * w;
        for (long y = 0; y < static_cast<long>(h); ++y) {
            for (long xx = 0; xx < static_cast<long>(w); ++xx) {
                // Statistics of deviations from the centre pixel: a flat
                // window gives exactly zero.
                const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(xx);
                const double centre = src[i];
                double s = 0.0, s2 = 0.0;
                std::size_t count = 0;
                for (long dy = -r; dy <= r; ++dy) {
                    const long yy = y + dy;
                    if (yy < 0 || yy >= static_cast<long>(h)) continue;
                    for (long dx = -r; dx <= r; ++dx) {
                        const long xc = xx + dx;
                        if (xc < 0 || xc >= static_cast<long>(w)) continue;
                        const double d = src[yy * static_cast<long>(w) + xc] - centre;
                        s += d;
                        s2 += d * d;
                        ++count;
                    }
                }
                const double md = s / static_cast<double>(count);
                const double var = std::max(0.0, s2 / static_cast<double>(count) - md * md);
                out[pl * h * w + i] = -md / std::max(std::sqrt(var), kStdFloor);
            }
        }
    }
    return Tensor(image.shape(), std::move(out));
}

}  // namespace advseg
