#include "advseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace advseg {

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw std::invalid_argument("confusion: prediction and ground truth differ in size");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const Label g = gt.values[i];
        if (g == kVoid) continue;
        const Label p = pred.values[i];
        if (g >= classes_ || p >= classes_) {
            throw std::invalid_argument("confusion: label out of range (prediction must not be void)");
        }
        ++at(g, p);
    }
}

std::uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
    ConfusionMatrix cm(classes);
    cm.add(pred, gt);
    return cm;
}

SummaryMetrics summary_metrics(const ConfusionMatrix& cm) {
    const std::size_t c = cm.classes();
    const auto total = cm.total();
    if (c == 0 || total == 0) throw std::invalid_argument("summary_metrics: empty confusion matrix");
    SummaryMetrics m;
    m.per_class_acc.resize(c);
    m.iou.resize(c);
    std::uint64_t trace = 0;
    double acc_sum = 0.0, iou_sum = 0.0;
    std::size_t acc_n = 0, iou_n = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < c; ++j) {
            row += cm.at(k, j);
            col += cm.at(j, k);
        }
        const std::uint64_t tp = cm.at(k, k);
        trace += tp;
        if (row > 0) {
            m.per_class_acc[k] = static_cast<double>(tp) / static_cast<double>(row);
            acc_sum += *m.per_class_acc[k];
            ++acc_n;
        }
        const std::uint64_t denom = row + col - tp;  // TP + FN + FP
        if (denom > 0) {
            m.iou[k] = static_cast<double>(tp) / static_cast<double>(denom);
            iou_sum += *m.iou[k];
            ++iou_n;
        }
    }
    m.mean_class_acc = acc_sum / static_cast<double>(acc_n);
    m.pixel_acc = static_cast<double>(trace) / static_cast<double>(total);
    m.mean_iou = iou_sum / static_cast<double>(iou_n);
    return m;
}

std::vector<Point> boundary_points(const LabelMap& labels, Label cls) {
    std::vector<Point> pts;
    const std::size_t h = labels.height, w = labels.width;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (labels.at(r, c) != cls) continue;
            bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            auto differs = [&](std::size_t rr, std::size_t cc) {
                const Label v = labels.at(rr, cc);
                return v != kVoid && v != cls;
            };
            if (!edge) edge = differs(r - 1, c) || differs(r + 1, c) || differs(r, c - 1) || differs(r, c + 1);
            if (edge) pts.push_back({static_cast<int>(r), static_cast<int>(c)});
        }
    }
    return pts;
}

double image_diagonal(std::size_t height, std::size_t width) {
    return std::hypot(static_cast<double>(height), static_cast<double>(width));
}

BFConfig BFConfig::for_images(std::span<const Sample> samples, double reference_tolerance_px) {
    if (samples.empty()) throw std::invalid_argument("BFConfig::for_images: no images");
    double smallest = image_diagonal(samples[0].labels.height, samples[0].labels.width);
    for (const auto& s : samples) smallest = std::min(smallest, image_diagonal(s.labels.height, s.labels.width));
    return BFConfig{reference_tolerance_px, smallest};
}

namespace {

// Fraction of `from` points within `tol2` squared distance of some `to` point.
double matched_fraction(const std::vector<Point>& from, const std::vector<Point>& to, double tol2) {
    if (from.empty() || to.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& p : from) {
        for (const auto& q : to) {
            const double dr = p.row - q.row, dc = p.col - q.col;
            if (dr * dr + dc * dc <= tol2) {
                ++hit;
                break;
            }
        }
    }
    return static_cast<double>(hit) / static_cast<double>(from.size());
}

}  // namespace

std::vector<std::optional<BFClassScore>> bf_score(const LabelMap& pred, const LabelMap& gt,
                                                  std::size_t classes, const BFConfig& cfg,
                                                  double image_diag) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw std::invalid_argument("bf_score: prediction and ground truth differ in size");
    }
    const double tol = cfg.tolerance(image_diag);
    const double tol2 = tol * tol;
    std::vector<std::optional<BFClassScore>> out(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        const auto pb = boundary_points(pred, static_cast<Label>(c));
        const auto gb = boundary_points(gt, static_cast<Label>(c));
        if (pb.empty() && gb.empty()) continue;
        BFClassScore s;
        s.precision = matched_fraction(pb, gb, tol2);
        s.recall = matched_fraction(gb, pb, tol2);
        s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
        out[c] = s;
    }
    return out;
}

std::optional<double> mean_bf(std::span<const std::optional<BFClassScore>> scores) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : scores) {
        if (!s) continue;
        total += s->f1;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

EvalReport evaluate_predictions(std::span<const LabelMap> preds, std::span<const LabelMap> gts,
                                std::size_t classes, const BFConfig& bf) {
    if (preds.empty()) throw std::invalid_argument("evaluate: empty split");
    if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
    EvalReport r;
    r.classes = classes;
    r.images = preds.size();

    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
    const SummaryMetrics s = summary_metrics(cm);
    r.per_class_acc = s.per_class_acc;
    r.mean_class_acc = s.mean_class_acc;
    r.pixel_acc = s.pixel_acc;
    r.iou = s.iou;
    r.mean_iou = s.mean_iou;

    std::vector<BFClassScore> class_sum(classes);
    std::vector<std::size_t> class_n(classes, 0);
    std::vector<double> per_image;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (gts[i].has_void()) continue;
        const auto scores = bf_score(preds[i], gts[i], classes, bf, image_diagonal(gts[i].height, gts[i].width));
        const auto m = mean_bf(scores);
        if (!m) continue;
        per_image.push_back(*m);
        for (std::size_t c = 0; c < classes; ++c) {
            if (!scores[c]) continue;
            class_sum[c].precision += scores[c]->precision;
            class_sum[c].recall += scores[c]->recall;
            class_sum[c].f1 += scores[c]->f1;
            ++class_n[c];
        }
    }
    r.per_class_bf.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        if (class_n[c] == 0) continue;
        const double n = static_cast<double>(class_n[c]);
        r.per_class_bf[c] = BFClassScore{class_sum[c].precision / n, class_sum[c].recall / n, class_sum[c].f1 / n};
    }
    r.bf_images = per_image.size();
    if (!per_image.empty()) {
        const double n = static_cast<double>(per_image.size());
        const double mean = std::accumulate(per_image.begin(), per_image.end(), 0.0) / n;
        double var = 0.0;
        for (double v : per_image) var += (v - mean) * (v - mean);
        r.mean_bf = mean;
        r.bf_std = std::sqrt(var / n);
    }
    return r;
}

std::vector<LabelMap> argmax_labels(const Tensor& prob) {
    if (prob.rank() != 4) throw std::invalid_argument("argmax_labels: expected N x C x H x W");
    const std::size_t n = prob.dim(0), c = prob.dim(1), h = prob.dim(2), w = prob.dim(3), plane = h * w;
    auto p = prob.data();
    std::vector<LabelMap> out;
    for (std::size_t b = 0; b < n; ++b) {
        LabelMap m(h, w);
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < c; ++k)
                if (p[(b * c + k) * plane + i] > p[(b * c + best) * plane + i]) best = k;
            m.values[i] = static_cast<Label>(best);
        }
        out.push_back(std::move(m));
    }
    return out;
}

LabelMap upsample_labels(const LabelMap& labels, std::size_t factor) {
    if (factor == 0) throw std::invalid_argument("upsample_labels: zero factor");
    LabelMap out(labels.height * factor, labels.width * factor);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c) out.at(r, c) = labels.at(r / factor, c / factor);
    return out;
}

std::vector<LabelMap> predict_labels(const NetSpec& spec, const ModelParams& params,
                                     std::span<const Sample> samples, std::size_t lcn_window) {
    const ModelParams frozen = params.frozen();
    std::vector<LabelMap> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const Sample* one[1] = {&s};
        const Tensor prob = forward(spec, frozen, prepare_images(one, lcn_window));
        const std::size_t factor = s.labels.height / prob.dim(2);
        if (factor * prob.dim(2) != s.labels.height || factor * prob.dim(3) != s.labels.width) {
            throw std::invalid_argument("predict_labels: output resolution does not divide label resolution");
        }
        out.push_back(upsample_labels(argmax_labels(prob).front(), factor));
    }
    return out;
}

EvalReport evaluate_split(const NetSpec& spec, const ModelParams& params,
                          std::span<const Sample> samples, const EvalOptions& opts) {
    if (samples.empty()) throw std::invalid_argument("evaluate_split: empty split");
    const auto preds = predict_labels(spec, params, samples, opts.lcn_window);
    std::vector<LabelMap> gts;
    gts.reserve(samples.size());
    for (const auto& s : samples) gts.push_back(s.labels);
    return evaluate_predictions(preds, gts, spec.output_channels(), opts.bf);
}

namespace {

std::string fmt(std::optional<double> v) {
    if (!v) return {};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

}  // namespace

void write_report_csv(std::ostream& out, const EvalReport& r) {
    out << "row,accuracy,iou,bf_precision,bf_recall,bf_f1,pixel_acc,bf_std\n";
    for (std::size_t c = 0; c < r.classes; ++c) {
        const auto& bf = r.per_class_bf[c];
        out << "class_" << c << ',' << fmt(r.per_class_acc[c]) << ',' << fmt(r.iou[c]) << ','
            << fmt(bf ? std::optional(bf->precision) : std::nullopt) << ','
            << fmt(bf ? std::optional(bf->recall) : std::nullopt) << ','
            << fmt(bf ? std::optional(bf->f1) : std::nullopt) << ",,\n";
    }
    out << "aggregate," << fmt(r.mean_class_acc) << ',' << fmt(r.mean_iou) << ",,," << fmt(r.mean_bf) << ','
        << fmt(r.pixel_acc) << ',' << fmt(r.bf_std) << '\n';
}

void write_report_summary(std::ostream& out, const EvalReport& r) {
    out << "images = " << r.images << '\n'
        << "bf_images = " << r.bf_images << '\n'
        << "per_class_acc = " << fmt(r.mean_class_acc) << '\n'
        << "pixel_acc = " << fmt(r.pixel_acc) << '\n'
        << "mean_iou = " << fmt(r.mean_iou) << '\n'
        << "mean_bf = " << fmt(r.mean_bf) << '\n'
        << "bf_std = " << fmt(r.bf_std) << '\n';
}

}  // namespace advseg
