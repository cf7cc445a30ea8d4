// Segmentation metrics: confusion-matrix statistics and the boundary F-measure.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "advseg/label_map.hpp"
#include "advseg/networks.hpp"
#include "advseg/scenes.hpp"

namespace advseg {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

    /// Accumulates one prediction; void ground-truth pixels are skipped.
    void add(const LabelMap& pred, const LabelMap& gt);

    std::size_t classes() const { return classes_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * classes_ + pred]; }
    std::uint64_t total() const;

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;  // row = ground truth, column = prediction
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t classes);

struct SummaryMetrics {
    std::vector<std::optional<double>> per_class_acc;  // empty ground-truth rows are nullopt
    double mean_class_acc = 0.0;
    double pixel_acc = 0.0;
    std::vector<std::optional<double>> iou;  // classes absent from gt and prediction are nullopt
    double mean_iou = 0.0;
};

SummaryMetrics summary_metrics(const ConfusionMatrix& cm);

struct Point {
    int row = 0;
    int col = 0;
    bool operator==(const Point&) const = default;
};

/// Pixels of class `cls` with a 4-neighbour of a different non-void label, or
/// on the image border. Void neighbours do not create boundary points.
std::vector<Point> boundary_points(const LabelMap& labels, Label cls);

struct BFConfig {
    double reference_tolerance_px = 5.0;
    double smallest_diagonal = 1.0;

    /// Fraction of the image diagonal used as the match tolerance.
    double theta() const { return reference_tolerance_px / smallest_diagonal; }
    /// Equals reference_tolerance_px exactly for the smallest diagonal.
    double tolerance(double image_diagonal) const {
        return reference_tolerance_px * (image_diagonal / smallest_diagonal);
    }

    static BFConfig for_images(std::span<const Sample> samples, double reference_tolerance_px = 5.0);
};

double image_diagonal(std::size_t height, std::size_t width);

struct BFClassScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Per-class boundary precision/recall/F1 for one image. A class whose
/// boundary is empty in both maps is nullopt.
std::vector<std::optional<BFClassScore>> bf_score(const LabelMap& pred, const LabelMap& gt,
                                                  std::size_t classes, const BFConfig& cfg,
                                                  double image_diag);

/// Mean F1 over the scored classes, nullopt when no class was scored.
std::optional<double> mean_bf(std::span<const std::optional<BFClassScore>> scores);

struct EvalReport {
    std::size_t classes = 0;
    std::size_t images = 0;
    std::vector<std::optional<double>> per_class_acc;
    double mean_class_acc = 0.0;
    double pixel_acc = 0.0;
    std::vector<std::optional<double>> iou;
    double mean_iou = 0.0;
    std::vector<std::optional<BFClassScore>> per_class_bf;  // averaged over BF images
    std::size_t bf_images = 0;
    std::optional<double> mean_bf;
    std::optional<double> bf_std;  // population standard deviation across images
};

/// Aggregates confusion over all images; BF only on images whose ground truth
/// has no void pixel.
EvalReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                                std::size_t classes, const BFConfig& bf);

/// Per-pixel argmax (smallest class index on ties) of an N x C x h x w map.
std::vector<LabelMap> argmax_labels(const Tensor& prob);

/// Nearest-neighbour up-sampling by an integer factor.
LabelMap upsample_labels(const LabelMap& labels, std::size_t factor);

struct EvalOptions {
    BFConfig bf;
    std::size_t lcn_window = 0;  // 0 disables local contrast normalization
};

/// Full-resolution label predictions of a segmenter for a set of samples.
std::vector<LabelMap> predict_labels(const NetSpec& spec, const ModelParams& params,
                                     std::span<const Sample> samples, std::size_t lcn_window = 0);

EvalReport evaluate_split(const NetSpec& spec, const ModelParams& params,
                          std::span<const Sample> samples, const EvalOptions& opts);

/// One row per class, then aggregate rows.
void write_report_csv(std::ostream& out, const EvalReport& report);
void write_report_summary(std::ostream& out, const EvalReport& report);

}  // namespace advseg
