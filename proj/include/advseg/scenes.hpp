// Procedurally generated toy segmentation scenes and their on-disk format.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advseg/label_map.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t classes = 4;  // background + shape classes, at most 8
    std::size_t min_shapes = 2;
    std::size_t max_shapes = 5;
    double noise_sigma = 0.05;
    double texture_amplitude = 0.08;
    std::size_t void_border_px = 1;
    bool void_ribbons = true;
    /// Fraction of scenes annotated on every pixel (no void at all); the
    /// boundary metric is evaluated on these only.
    double full_annotation_fraction = 0.75;
    std::uint64_t seed = 1;
};

struct Sample {
    Tensor image;  // 3 x H x W, values in [0, 1]
    LabelMap labels;
    std::string id;
};

struct DatasetSplits {
    std::size_t classes = 0;
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;
};

/// Base colour of a class. The first four are pairwise >= 0.3 apart in every channel.
std::array<double, 3> class_color(std::size_t cls);

std::string scene_id(std::size_t index);

/// Deterministic in (spec.seed, index).
Sample generate_scene(const SceneSpec& spec, std::size_t index);

/// train = [0, n_train), val = [n_train, n_train + n_val), test follows.
DatasetSplits make_dataset(const SceneSpec& spec, std::size_t n_train, std::size_t n_val,
                           std::size_t n_test);

/// Stacks 3 x H x W images into N x 3 x H x W.
Tensor stack_images(std::span<const Sample* const> samples);
Tensor stack_images(std::span<const Sample> samples);

/// Network input for a batch: stacked images shifted to [-0.5, 0.5], or
/// locally contrast-normalized when lcn_window > 0.
Tensor prepare_images(std::span<const Sample* const> samples, std::size_t lcn_window);

/// <dir>/<id>.ppm (image) and <dir>/<id>.pgm (labels, 255 = void).
void save_sample(const std::filesystem::path& dir, const Sample& sample);
Sample load_sample(const std::filesystem::path& dir, const std::string& id, std::size_t classes);

/// Writes every sample plus manifest.txt listing ids per split.
void save_dataset(const std::filesystem::path& dir, const DatasetSplits& splits);
DatasetSplits load_dataset(const std::filesystem::path& dir);

}  // namespace advseg
