// Declarative segmenter and adversary networks.
//
// A NetSpec is a flat layer list. Two-branch adversaries carry a second
// (image) layer list whose output is concatenated onto the main (label) branch
// at the ConcatBranches layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

enum class LayerKind { Conv, Relu, MaxPool2, ChannelSoftmax, Sigmoid, SliceChannel, ConcatBranches };

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;  // SliceChannel: index of the kept channel
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;

    /// 'same' padding for odd kernels at stride 1.
    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t dilation = 1);
    static LayerSpec of(LayerKind kind) { return LayerSpec{kind}; }

    bool operator==(const LayerSpec&) const = default;
};

enum class NetRole { Segmenter, Adversary };
enum class FieldOfView { Large, Small };
enum class Capacity { Full, Light };
enum class AdversaryHead { Sigmoid, Softmax2 };

struct NetSpec {
    NetRole role = NetRole::Segmenter;
    std::size_t input_channels = 0;
    std::size_t image_channels = 0;  // 0 for single-branch networks
    std::vector<LayerSpec> layers;
    std::vector<LayerSpec> image_branch;
    std::size_t stride = 1;  // total output stride

    bool two_branch() const { return !image_branch.empty(); }
    std::size_t output_channels() const;
    /// Channel counts chain through every layer; throws otherwise.
    void validate() const;

    bool operator==(const NetSpec&) const = default;
};

struct AdversaryOptions {
    std::size_t input_channels = 4;
    FieldOfView fov = FieldOfView::Large;
    Capacity capacity = Capacity::Full;
    bool two_branch = false;
    std::size_t image_channels = 3;
    AdversaryHead head = AdversaryHead::Sigmoid;
    std::size_t base_width = 16;
};

/// Two conv3x3+ReLU blocks, one 2x2 pooling, `context_layers` dilated
/// conv3x3+ReLU layers (dilation 1, 2, 4, ...), conv1x1 to `classes`, softmax.
NetSpec build_segmenter(std::size_t classes, std::size_t channels_base = 16,
                        std::size_t context_layers = 4, std::size_t input_channels = 3);

NetSpec build_adversary(const AdversaryOptions& opts);

struct ReceptiveField {
    std::size_t rf_h = 1;
    std::size_t rf_w = 1;
    std::size_t stride = 1;  // input pixels between neighbouring outputs
    long offset = 0;         // input coordinate where output 0's window starts
};

/// Receptive field of one output unit along the main branch, in input units.
ReceptiveField receptive_field(const NetSpec& spec);

class ModelParams {
public:
    void add(std::string name, Tensor value);
    const Tensor& get(std::string_view name) const;
    Tensor& get(std::string_view name);
    bool contains(std::string_view name) const;

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }
    std::size_t parameter_count() const;

    /// Deep copy; requires_grad preserved.
    ModelParams clone() const;
    /// Deep copy with no gradient tracking (a frozen player).
    ModelParams frozen() const;
    void zero_grad();
    bool values_equal(const ModelParams& other) const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) for kernels, zero biases.
ModelParams init_params(const NetSpec& spec, std::uint64_t seed);

struct ForwardOptions {
    /// Stop after the last convolution (pre-softmax / pre-sigmoid values).
    bool logits = false;
};

/// Segmenters return an N x C x H x W probability map; adversaries an
/// N x 1 x h x w probability grid. Two-branch adversaries need `image`.
Tensor forward(const NetSpec& spec, const ModelParams& params, const Tensor& input,
               const Tensor& image = {}, ForwardOptions opts = {});

// ---- persistence -------------------------------------------------------------

std::string_view layer_kind_name(LayerKind kind);
void write_netspec(std::ostream& out, const NetSpec& spec);
NetSpec read_netspec(std::istream& in);
void save_netspec(const std::filesystem::path& path, const NetSpec& spec);
NetSpec load_netspec(const std::filesystem::path& path);

/// "ADVC", version byte, entry count (u32 LE), then per entry the name length
/// (u32 LE), name bytes and absolute offset (u64 LE) of its ADVT record;
/// the ADVT records follow the index.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace advseg
