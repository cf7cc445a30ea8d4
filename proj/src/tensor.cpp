#include "advseg/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>

namespace advseg {

namespace {

constexpr std::array kDifferentiableOps = {
    OpKind::Add,           OpKind::Sub,      OpKind::Mul,           OpKind::Div,
    OpKind::AddScalar,     OpKind::MulScalar, OpKind::Neg,          OpKind::Log,
    OpKind::Exp,           OpKind::MaxScalar, OpKind::Clamp,        OpKind::Sum,
    OpKind::Mean,          OpKind::Max,       OpKind::ConcatChannels, OpKind::SliceChannels,
    OpKind::Conv2d,        OpKind::MaxPool2,  OpKind::Relu,         OpKind::Sigmoid,
    OpKind::ChannelSoftmax, OpKind::ChannelProduct,
};

// -1 means no corruption.
std::atomic<int> g_corrupted_op{-1};

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    }
}

template <typename Forward, typename Derivative>
Tensor unary(OpKind kind, const Tensor& a, Forward f, Derivative dfdx) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = f(x[i]);
    }
    return Tensor::from_op(
        kind, a.shape(), std::move(out), {a},
        [a, dfdx](std::span<const double> y, std::span<const double> g,
                  std::span<const std::span<double>> in) {
            auto x = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                in[0][i] += g[i] * dfdx(x[i], y[i]);
            }
        });
}

struct AxisMap {
    Shape out_shape;
    std::vector<std::size_t> out_index;  // flat input index -> flat output index
};

AxisMap map_axes(const Shape& shape, std::span<const std::size_t> axes) {
    std::vector<bool> reduced(shape.size(), false);
    for (auto axis : axes) {
        if (axis >= shape.size()) {
            throw std::out_of_range("reduce: axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_to_string(shape));
        }
        reduced[axis] = true;
    }
    AxisMap m;
    std::vector<std::size_t> out_stride(shape.size(), 0);
    std::size_t stride = 1;
    for (std::size_t d = shape.size(); d-- > 0;) {
        if (!reduced[d]) {
            out_stride[d] = stride;
            stride *= shape[d];
        }
    }
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (!reduced[d]) m.out_shape.push_back(shape[d]);
    }
    if (m.out_shape.empty()) m.out_shape = {1};

    const std::size_t n = shape_numel(shape);
    m.out_index.resize(n);
    std::vector<std::size_t> idx(shape.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t o = 0;
        for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
        m.out_index[flat] = o;
        for (std::size_t d = shape.size(); d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    return m;
}

std::vector<std::size_t> all_axes(const Tensor& a) {
    std::vector<std::size_t> axes(a.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return axes;
}

void require_rank4(const Tensor& t, std::string_view what) {
    if (t.rank() != 4) {
        throw std::invalid_argument(std::string(what) + ": expected N x C x H x W, got " +
                                    shape_to_string(t.shape()));
    }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::Neg: return "neg";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::MaxScalar: return "max_with_scalar";
        case OpKind::Clamp: return "clamp";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::Max: return "max";
        case OpKind::ConcatChannels: return "concat_channels";
        case OpKind::SliceChannels: return "slice_channels";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::MaxPool2: return "maxpool2";
        case OpKind::Relu: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::ChannelSoftmax: return "channel_softmax";
        case OpKind::ChannelProduct: return "channel_product";
    }
    return "unknown";
}

std::span<const OpKind> differentiable_ops() { return kDifferentiableOps; }

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorStorage>()) {
    for (auto e : shape) {
        if (e == 0) throw std::invalid_argument("Tensor: zero extent in " + shape_to_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_to_string(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_op(OpKind kind, Shape shape, std::vector<double> values,
                       std::vector<Tensor> inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    const bool track = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        auto node = std::make_shared<GraphNode>();
        node->kind = kind;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        out.impl_->node = std::move(node);
        out.impl_->requires_grad = true;
    }
    return out;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("Tensor: use of undefined tensor");
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw std::out_of_range("Tensor::dim: axis out of range");
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    shape();
    return impl_->values;
}

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw std::logic_error("Tensor::mutable_data: not a leaf");
    return impl_->values;
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not a scalar");
    return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) throw std::logic_error("Tensor::set_requires_grad: not a leaf");
    impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const {
    shape();
    return !impl_->node;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient accumulated");
    return impl_->grad;
}

void Tensor::zero_grad() {
    shape();
    impl_->grad.clear();
}

const GraphNode* Tensor::node() const { return impl_ ? impl_->node.get() : nullptr; }

OpKind Tensor::op() const { return node() ? node()->kind : OpKind::Leaf; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->values, false); }

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(shape(), impl_->values, requires_grad);
}

void Tensor::backward() const { advseg::backward(*this); }

void backward(const Tensor& root) {
    if (root.numel() != 1) {
        throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                    shape_to_string(root.shape()));
    }
    if (!root.requires_grad()) return;

    using Storage = detail::TensorStorage;
    // Iterative post-order DFS gives inputs before consumers.
    std::vector<Storage*> order;
    std::unordered_set<Storage*> visited;
    std::vector<std::pair<Storage*, std::size_t>> stack;
    stack.emplace_back(root.impl_.get(), 0);
    visited.insert(root.impl_.get());
    while (!stack.empty()) {
        auto& [s, next] = stack.back();
        const std::size_t n_inputs = s->node ? s->node->inputs.size() : 0;
        if (next < n_inputs) {
            const Tensor& in = s->node->inputs[next++];
            Storage* child = in.impl_.get();
            if (in.requires_grad() && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(s);
            stack.pop_back();
        }
    }

    std::unordered_map<Storage*, std::vector<double>> scratch;
    auto grad_buffer = [&](Storage* s) -> std::vector<double>& {
        if (!s->node) {
            if (s->grad.empty()) s->grad.assign(s->values.size(), 0.0);
            return s->grad;
        }
        auto& buf = scratch[s];
        if (buf.empty()) buf.assign(s->values.size(), 0.0);
        return buf;
    };

    grad_buffer(root.impl_.get())[0] += 1.0;

    const int corrupted = g_corrupted_op.load(std::memory_order_relaxed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Storage* s = *it;
        if (!s->node) continue;
        auto& node = *s->node;
        const std::vector<double>& g = grad_buffer(s);

        const bool corrupt = corrupted == static_cast<int>(node.kind);
        std::vector<std::vector<double>> temps;
        std::vector<std::span<double>> in_grads(node.inputs.size());
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const Tensor& in = node.inputs[i];
            if (!in.requires_grad()) continue;
            if (corrupt) {
                temps.emplace_back(in.numel(), 0.0);
            } else {
                in_grads[i] = grad_buffer(in.impl_.get());
            }
        }
        if (corrupt) {
            std::size_t t = 0;
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                if (node.inputs[i].requires_grad()) in_grads[i] = temps[t++];
            }
        }
        node.backward(s->values, g, in_grads);
        if (corrupt) {
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                if (!node.inputs[i].requires_grad()) continue;
                auto& dst = grad_buffer(node.inputs[i].impl_.get());
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += 1.5 * in_grads[i][k];
            }
        }
        scratch.erase(s);
    }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::from_op(OpKind::Add, a.shape(), std::move(out), {a, b},
                           [](auto, std::span<const double> g, auto in) {
                               for (auto& dst : in) {
                                   if (dst.empty()) continue;
                                   for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                               }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return Tensor::from_op(OpKind::Sub, a.shape(), std::move(out), {a, b},
                           [](auto, std::span<const double> g, auto in) {
                               if (!in[0].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                               if (!in[1].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) in[1][i] -= g[i];
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return Tensor::from_op(OpKind::Mul, a.shape(), std::move(out), {a, b},
                           [a, b](auto, std::span<const double> g, auto in) {
                               auto x = a.data(), y = b.data();
                               if (!in[0].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * y[i];
                               if (!in[1].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) in[1][i] += g[i] * x[i];
                           });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (y[i] == 0.0) throw std::domain_error("div: division by zero");
        out[i] = x[i] / y[i];
    }
    return Tensor::from_op(OpKind::Div, a.shape(), std::move(out), {a, b},
                           [b](std::span<const double> q, std::span<const double> g, auto in) {
                               auto y = b.data();
                               if (!in[0].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] / y[i];
                               if (!in[1].empty())
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       in[1][i] -= g[i] * q[i] / y[i];
                           });
}

Tensor add(const Tensor& a, double s) {
    return unary(OpKind::AddScalar, a, [s](double x) { return x + s; },
                 [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double s) {
    return unary(OpKind::MulScalar, a, [s](double x) { return x * s; },
                 [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) {
    return unary(OpKind::Neg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor log(const Tensor& a) {
    for (double x : a.data()) {
        if (!(x > 0.0)) throw std::domain_error("log: argument must be positive");
    }
    return unary(OpKind::Log, a, [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
    return unary(OpKind::Exp, a, [](double x) { return std::exp(x); },
                 [](double, double y) { return y; });
}

Tensor max_with_scalar(const Tensor& a, double s) {
    return unary(OpKind::MaxScalar, a, [s](double x) { return x > s ? x : s; },
                 [s](double x, double) { return x > s ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
    return unary(OpKind::Clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto axes = all_axes(a);
    return sum(a, axes);
}

Tensor sum(const Tensor& a, std::span<const std::size_t> axes) {
    auto m = std::make_shared<AxisMap>(map_axes(a.shape(), axes));
    std::vector<double> out(shape_numel(m->out_shape), 0.0);
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[m->out_index[i]] += x[i];
    return Tensor::from_op(OpKind::Sum, m->out_shape, std::move(out), {a},
                           [m](auto, std::span<const double> g, auto in) {
                               for (std::size_t i = 0; i < in[0].size(); ++i)
                                   in[0][i] += g[m->out_index[i]];
                           });
}

Tensor mean(const Tensor& a) {
    auto axes = all_axes(a);
    return mean(a, axes);
}

Tensor mean(const Tensor& a, std::span<const std::size_t> axes) {
    auto m = std::make_shared<AxisMap>(map_axes(a.shape(), axes));
    const double count = static_cast<double>(a.numel()) /
                         static_cast<double>(shape_numel(m->out_shape));
    std::vector<double> out(shape_numel(m->out_shape), 0.0);
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[m->out_index[i]] += x[i];
    for (auto& v : out) v /= count;
    return Tensor::from_op(OpKind::Mean, m->out_shape, std::move(out), {a},
                           [m, count](auto, std::span<const double> g, auto in) {
                               for (std::size_t i = 0; i < in[0].size(); ++i)
                                   in[0][i] += g[m->out_index[i]] / count;
                           });
}

Tensor max(const Tensor& a) {
    auto axes = all_axes(a);
    return max(a, axes);
}

Tensor max(const Tensor& a, std::span<const std::size_t> axes) {
    auto m = map_axes(a.shape(), axes);
    const std::size_t n_out = shape_numel(m.out_shape);
    std::vector<double> out(n_out, 0.0);
    auto argmax = std::make_shared<std::vector<std::size_t>>(n_out, SIZE_MAX);
    auto x = a.data();
    // Row-major scan with strict comparison keeps the first maximum on ties.
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t o = m.out_index[i];
        if ((*argmax)[o] == SIZE_MAX || x[i] > out[o]) {
            out[o] = x[i];
            (*argmax)[o] = i;
        }
    }
    return Tensor::from_op(OpKind::Max, m.out_shape, std::move(out), {a},
                           [argmax](auto, std::span<const double> g, auto in) {
                               for (std::size_t o = 0; o < g.size(); ++o)
                                   in[0][(*argmax)[o]] += g[o];
                           });
}

// ---- channel plumbing ------------------------------------------------------

Tensor concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    for (const auto& p : parts) require_rank4(p, "concat_channels");
    const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
    std::size_t c_total = 0;
    for (const auto& p : parts) {
        if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
            throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                        shape_to_string(parts[0].shape()) + " vs " +
                                        shape_to_string(p.shape()));
        }
        c_total += p.dim(1);
    }
    const std::size_t plane = h * w;
    std::vector<double> out(n * c_total * plane);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t c = p.dim(1);
        auto x = p.data();
        for (std::size_t b = 0; b < n; ++b) {
            std::copy_n(x.begin() + b * c * plane, c * plane,
                        out.begin() + (b * c_total + off) * plane);
        }
        off += c;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    std::vector<std::size_t> channels;
    for (const auto& p : parts) channels.push_back(p.dim(1));
    return Tensor::from_op(
        OpKind::ConcatChannels, {n, c_total, h, w}, std::move(out), std::move(inputs),
        [=](auto, std::span<const double> g, auto in) {
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (in[k].empty()) continue;
                const std::size_t c = channels[k];
                for (std::size_t b = 0; b < n; ++b) {
                    const double* src = g.data() + (b * c_total + offsets[k]) * plane;
                    double* dst = in[k].data() + b * c * plane;
                    for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                }
            }
        });
}

Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
    require_rank4(a, "slice_channels");
    const std::size_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    if (begin >= end || end > c) throw std::out_of_range("slice_channels: bad channel range");
    const std::size_t plane = h * w, k = end - begin;
    std::vector<double> out(n * k * plane);
    auto x = a.data();
    for (std::size_t b = 0; b < n; ++b) {
        std::copy_n(x.begin() + (b * c + begin) * plane, k * plane, out.begin() + b * k * plane);
    }
    return Tensor::from_op(OpKind::SliceChannels, {n, k, h, w}, std::move(out), {a},
                           [=](auto, std::span<const double> g, auto in) {
                               for (std::size_t b = 0; b < n; ++b) {
                                   double* dst = in[0].data() + (b * c + begin) * plane;
                                   const double* src = g.data() + b * k * plane;
                                   for (std::size_t i = 0; i < k * plane; ++i) dst[i] += src[i];
                               }
                           });
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
    Tensor leaf = x.clone(true);
    Tensor root = f(leaf);
    if (root.numel() != 1) {
        throw std::invalid_argument("grad_check: function output is not a scalar");
    }
    root.backward();
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) {
        auto g = leaf.grad();
        analytic.assign(g.begin(), g.end());
    }

    std::vector<double> probe(x.data().begin(), x.data().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double plus = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig - h;
        const double minus = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig;
        const double numeric = (plus - minus) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

// ---- serialization ---------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("read_tensor: truncated");
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write("ADVT", 4);
    out.put(static_cast<char>(kTensorFormatVersion));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        unsigned char b[8];
        for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
        out.write(reinterpret_cast<const char*>(b), 8);
    }
    if (!out) throw std::runtime_error("write_tensor: stream error");
}

Tensor read_tensor(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ADVT", 4) != 0) {
        throw std::runtime_error("read_tensor: bad magic");
    }
    const int version = in.get();
    if (version != kTensorFormatVersion) {
        throw std::runtime_error("read_tensor: unsupported version " + std::to_string(version));
    }
    const std::uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 8) throw std::runtime_error("read_tensor: bad rank");
    Shape shape(rank);
    for (auto& e : shape) e = get_u32(in);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
        unsigned char b[8];
        if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("read_tensor: truncated");
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= std::uint64_t{b[k]} << (8 * k);
        v = std::bit_cast<double>(bits);
    }
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensor: cannot open " + path.string());
    write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensor: cannot open " + path.string());
    return read_tensor(in);
}

namespace debug {

void set_corrupted_op(std::optional<OpKind> kind) {
    g_corrupted_op.store(kind ? static_cast<int>(*kind) : -1);
}

std::optional<OpKind> corrupted_op() {
    const int v = g_corrupted_op.load();
    if (v < 0) return std::nullopt;
    return static_cast<OpKind>(v);
}

}  // namespace debug

}  // namespace advseg
