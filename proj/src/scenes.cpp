#include "advseg/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "advseg/image_io.hpp"
#include "advseg/layers.hpp"

namespace advseg {

namespace {

constexpr std::array<std::array<double, 3>, 8> kPalette = {{
    {0.35, 0.65, 0.05},
    {0.95, 0.05, 0.35},
    {0.05, 0.95, 0.65},
    {0.65, 0.35, 0.95},
    {0.80, 0.80, 0.20},
    {0.20, 0.50, 0.50},
    {0.50, 0.20, 0.80},
    {0.95, 0.60, 0.60},
}};

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::array<double, 3> class_color(std::size_t cls) {
    if (cls >= kPalette.size()) throw std::out_of_range("class_color: class index too large");
    return kPalette[cls];
}

std::string scene_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05zu", index);
    return buf;
}

Sample generate_scene(const SceneSpec& spec, std::size_t index) {
    if (spec.classes < 2 || spec.classes > kPalette.size()) {
        throw std::invalid_argument("generate_scene: classes must be in [2, 8]");
    }
    if (spec.height < 8 || spec.width < 8 || spec.min_shapes > spec.max_shapes) {
        throw std::invalid_argument("generate_scene: invalid scene spec");
    }
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    const std::size_t h = spec.height, w = spec.width;
    const auto H = static_cast<long>(h), W = static_cast<long>(w);

    LabelMap labels(h, w, 0);
    std::uniform_int_distribution<std::size_t> n_shapes(spec.min_shapes, spec.max_shapes);
    std::uniform_int_distribution<std::size_t> shape_class(1, spec.classes - 1);
    std::uniform_int_distribution<long> pos_y(0, H - 1), pos_x(0, W - 1);
    std::uniform_int_distribution<long> extent(8, 24), radius(4, 12);
    std::bernoulli_distribution is_circle(0.5);
    const std::size_t count = n_shapes(rng);
    for (std::size_t s = 0; s < count; ++s) {
        const auto cls = static_cast<Label>(shape_class(rng));
        const long cy = pos_y(rng), cx = pos_x(rng);
        if (is_circle(rng)) {
            const long r = radius(rng);
            for (long y = std::max(0L, cy - r); y <= std::min(H - 1, cy + r); ++y)
                for (long x = std::max(0L, cx - r); x <= std::min(W - 1, cx + r); ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                        labels.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
        } else {
            const long eh = extent(rng), ew = extent(rng);
            for (long y = std::max(0L, cy - eh / 2); y < std::min(H, cy - eh / 2 + eh); ++y)
                for (long x = std::max(0L, cx - ew / 2); x < std::min(W, cx - ew / 2 + ew); ++x)
                    labels.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = cls;
        }
    }

    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> img(3 * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const Label cls = labels.at(y, x);
            const auto& color = kPalette[cls];
            // Stripes with a class-specific period and orientation.
            const double period = 4.0 + 2.0 * static_cast<double>(cls);
            const double phase = (cls % 2 == 0 ? static_cast<double>(x) : static_cast<double>(y)) +
                                 0.5 * static_cast<double>(cls % 3 == 0 ? y : x);
            const double tex = spec.texture_amplitude * std::sin(2.0 * std::numbers::pi * phase / period);
            for (std::size_t k = 0; k < 3; ++k) {
                const double v = color[k] + tex + spec.noise_sigma * noise(rng);
                img[(k * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
            }
        }
    }

    std::bernoulli_distribution fully_annotated(std::clamp(spec.full_annotation_fraction, 0.0, 1.0));
    if (!fully_annotated(rng)) {
        LabelMap marked = labels;
        if (spec.void_ribbons) {
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const Label v = labels.at(y, x);
                    if ((x + 1 < w && labels.at(y, x + 1) != v) || (y + 1 < h && labels.at(y + 1, x) != v))
                        marked.at(y, x) = kVoid;
                }
        }
        const std::size_t b = spec.void_border_px;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                if (y < b || x < b || y + b >= h || x + b >= w) marked.at(y, x) = kVoid;
        labels = std::move(marked);
    }

    return Sample{Tensor({3, h, w}, std::move(img)), std::move(labels), scene_id(index)};
}

DatasetSplits make_dataset(const SceneSpec& spec, std::size_t n_train, std::size_t n_val,
                           std::size_t n_test) {
    DatasetSplits d;
    d.classes = spec.classes;
    std::size_t index = 0;
    for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(generate_scene(spec, index++));
    for (std::size_t i = 0; i < n_val; ++i) d.val.push_back(generate_scene(spec, index++));
    for (std::size_t i = 0; i < n_test; ++i) d.test.push_back(generate_scene(spec, index++));
    return d;
}

Tensor stack_images(std::span<const Sample* const> samples) {
    if (samples.empty()) throw std::invalid_argument("stack_images: empty batch");
    const Shape s = samples[0]->image.shape();
    std::vector<double> out;
    out.reserve(samples.size() * samples[0]->image.numel());
    for (const Sample* smp : samples) {
        if (smp->image.shape() != s) throw std::invalid_argument("stack_images: image sizes differ");
        auto d = smp->image.data();
        out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor({samples.size(), s[0], s[1], s[2]}, std::move(out));
}

Tensor stack_images(std::span<const Sample> samples) {
    std::vector<const Sample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    return stack_images(std::span<const Sample* const>(ptrs));
}

Tensor prepare_images(std::span<const Sample* const> samples, std::size_t lcn_window) {
    Tensor batch = stack_images(samples);
    if (lcn_window > 0) return local_contrast_normalize(batch, lcn_window);
    for (auto& v : batch.mutable_data()) v -= 0.5;
    return batch;
}

void save_sample(const std::filesystem::path& dir, const Sample& sample) {
    const std::size_t h = sample.labels.height, w = sample.labels.width;
    if (sample.image.shape() != Shape{3, h, w}) throw std::invalid_argument("save_sample: bad image shape");
    Raster img{h, w, 3, std::vector<std::uint8_t>(3 * h * w)};
    auto v = sample.image.data();
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < 3; ++k) img.data[3 * i + k] = quantize(v[k * h * w + i]);
    write_pnm(dir / (sample.id + ".ppm"), img);
    write_pnm(dir / (sample.id + ".pgm"), Raster{h, w, 1, sample.labels.values});
}

Sample load_sample(const std::filesystem::path& dir, const std::string& id, std::size_t classes) {
    const Raster img = read_pnm(dir / (id + ".ppm"));
    const Raster lab = read_pnm(dir / (id + ".pgm"));
    if (img.channels != 3 || lab.channels != 1) {
        throw std::runtime_error("load_sample: expected a PPM image and a PGM label map for " + id);
    }
    if (img.height != lab.height || img.width != lab.width) {
        throw std::runtime_error("load_sample: image and labels differ in size for " + id);
    }
    for (auto l : lab.data) {
        if (l != kVoid && l >= classes) {
            throw std::runtime_error("load_sample: label value " + std::to_string(l) + " >= " +
                                     std::to_string(classes) + " in " + id);
        }
    }
    const std::size_t h = img.height, w = img.width;
    std::vector<double> v(3 * h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < 3; ++k) v[k * h * w + i] = img.data[3 * i + k] / 255.0;
    return Sample{Tensor({3, h, w}, std::move(v)), LabelMap(h, w, lab.data), id};
}

void save_dataset(const std::filesystem::path& dir, const DatasetSplits& splits) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
    manifest << "# split id\n" << "classes " << splits.classes << '\n';
    auto emit = [&](const char* name, const std::vector<Sample>& samples) {
        for (const auto& s : samples) {
            save_sample(dir, s);
            manifest << name << ' ' << s.id << '\n';
        }
    };
    emit("train", splits.train);
    emit("val", splits.val);
    emit("test", splits.test);
    if (!manifest) throw std::runtime_error("error writing manifest in " + dir.string());
}

DatasetSplits load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw std::runtime_error("no manifest.txt in " + dir.string());
    DatasetSplits d;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream in(line);
        std::string key, value;
        in >> key >> value;
        if (key == "classes") {
            d.classes = std::stoul(value);
            continue;
        }
        if (d.classes == 0) throw std::runtime_error("manifest: 'classes' must precede sample ids");
        auto* split = key == "train" ? &d.train : key == "val" ? &d.val : key == "test" ? &d.test : nullptr;
        if (!split) throw std::runtime_error("manifest: unknown split '" + key + "'");
        split->push_back(load_sample(dir, value, d.classes));
    }
    return d;
}

}  // namespace advseg
