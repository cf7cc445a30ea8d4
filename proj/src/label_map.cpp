#include "advseg/label_map.hpp"

#include <algorithm>
#include <stdexcept>

namespace advseg {

LabelMap::LabelMap(std::size_t h, std::size_t w, std::vector<Label> v)
    : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw std::invalid_argument("LabelMap: size mismatch");
}

bool LabelMap::has_void() const {
    return std::find(values.begin(), values.end(), kVoid) != values.end();
}

VoidMask VoidMask::from_labels(const LabelMap& labels) {
    return from_labels(std::span<const LabelMap>(&labels, 1));
}

VoidMask VoidMask::from_labels(std::span<const LabelMap> labels) {
    if (labels.empty()) throw std::invalid_argument("VoidMask: empty batch");
    VoidMask m;
    m.batch = labels.size();
    m.height = labels[0].height;
    m.width = labels[0].width;
    m.values.reserve(m.batch * m.height * m.width);
    for (const auto& l : labels) {
        if (l.height != m.height || l.width != m.width) {
            throw std::invalid_argument("VoidMask: label maps differ in size");
        }
        for (Label v : l.values) m.values.push_back(v == kVoid ? 0.0 : 1.0);
    }
    return m;
}

VoidMask VoidMask::all_labeled(std::size_t batch, std::size_t height, std::size_t width) {
    VoidMask m;
    m.batch = batch;
    m.height = height;
    m.width = width;
    m.values.assign(batch * height * width, 1.0);
    return m;
}

std::size_t VoidMask::labeled_count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1.0));
}

}  // namespace advseg
