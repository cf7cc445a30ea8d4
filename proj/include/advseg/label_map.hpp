#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace advseg {

using Label = std::uint8_t;

/// Unlabeled ("void") ground-truth pixel.
inline constexpr Label kVoid = 255;

struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<Label> values;  // row-major

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, Label fill = 0) : height(h), width(w), values(h * w, fill) {}
    LabelMap(std::size_t h, std::size_t w, std::vector<Label> v);

    Label at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    Label& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
    std::size_t size() const { return values.size(); }
    bool has_void() const;

    bool operator==(const LabelMap&) const = default;
};

/// Binary labeled/void grid for a batch of label maps: 1 = labeled, 0 = void.
struct VoidMask {
    std::size_t batch = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // batch x height x width

    static VoidMask from_labels(const LabelMap& labels);
    static VoidMask from_labels(std::span<const LabelMap> labels);
    static VoidMask all_labeled(std::size_t batch, std::size_t height, std::size_t width);

    std::size_t labeled_count() const;
};

}  // namespace advseg
