// Dense double-precision tensors with a dynamically built reverse-mode
// differentiation graph.
//
// A Tensor is a cheap handle onto shared storage. Every differentiable
// operation that receives at least one input with requires_grad() records a
// GraphNode holding its inputs and a backward closure; calling backward() on
// a scalar root walks the graph in reverse topological order and accumulates
// gradients into the requires_grad leaves.
//
// There is no implicit broadcasting: tensor-tensor elementwise operations
// require identical shapes, and scalars are passed as plain doubles.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace advseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class OpKind : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Neg,
    Log,
    Exp,
    MaxScalar,
    Clamp,
    Sum,
    Mean,
    Max,
    ConcatChannels,
    SliceChannels,
    Conv2d,
    MaxPool2,
    Relu,
    Sigmoid,
    ChannelSoftmax,
    ChannelProduct,
};

std::string_view op_name(OpKind kind);

/// All differentiable op kinds (everything except Leaf).
std::span<const OpKind> differentiable_ops();

class Tensor;

/// Receives the output value and gradient; writes into the gradient buffers of
/// the inputs. An input that does not require grad gets an empty span.
using BackwardFn = std::function<void(std::span<const double> out_value,
                                      std::span<const double> out_grad,
                                      std::span<const std::span<double>> in_grads)>;

struct GraphNode {
    OpKind kind = OpKind::Leaf;
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

namespace detail {
struct TensorStorage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until a backward pass reaches this leaf
    bool requires_grad = false;
    std::shared_ptr<GraphNode> node;
};
}  // namespace detail

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    /// Result of an operation. Records a graph node when any input requires grad.
    static Tensor from_op(OpKind kind, Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, BackwardFn backward);

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Mutable view for in-place parameter updates; only valid on leaves.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    const GraphNode* node() const;
    OpKind op() const;

    /// Same values, no graph, no grad tracking.
    Tensor detach() const;
    /// Independent deep copy of the values as a leaf with the given flag.
    Tensor clone(bool requires_grad = false) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    /// Reverse-mode pass from this scalar root. Gradients accumulate.
    void backward() const;

private:
    friend void backward(const Tensor& root);
    std::shared_ptr<detail::TensorStorage> impl_;
};

void backward(const Tensor& root);

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
/// max(a, s); gradient flows where a > s.
Tensor max_with_scalar(const Tensor& a, double s);
/// Gradient flows where lo <= a <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ------------------------------------------------------------
//
// Reduced axes are removed from the shape; reducing every axis yields shape {1}.
// max routes the gradient to the first maximum in row-major order.

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::span<const std::size_t> axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::span<const std::size_t> axes);
Tensor max(const Tensor& a);
Tensor max(const Tensor& a, std::span<const std::size_t> axes);

// ---- channel plumbing on N x C x H x W -------------------------------------

Tensor concat_channels(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end);

// ---- gradient checking -----------------------------------------------------

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Max over elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// with central differences of step h.
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

// ---- serialization ---------------------------------------------------------
//
// "ADVT", version byte, rank, extents (u32 LE each), values (f64 LE).

inline constexpr std::uint8_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

namespace debug {
/// Test fixture: scales the backward contribution of one op kind by 1.5.
void set_corrupted_op(std::optional<OpKind> kind);
std::optional<OpKind> corrupted_op();
}  // namespace debug

}  // namespace advseg
