#include "advseg/training.hpp"
#include "advseg/layers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <thread>

namespace advseg {

std::string_view player_name(Player p) { return p == Player::Segmenter ? "segmenter" : "adversary"; }

void TrainConfig::validate() const {
    if (!(slr > 0.0) || !(alr > 0.0)) throw std::invalid_argument("learning rates must be > 0");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (block_len == 0) throw std::invalid_argument("block_len must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    if (eval_every == 0) throw std::invalid_argument("eval_every must be >= 1");
    if (lcn_window != 0 && lcn_window % 2 == 0) throw std::invalid_argument("lcn_window must be odd");
    if (seg_channels == 0 || adv_base_width == 0) throw std::invalid_argument("channel widths must be >= 1");
}

Player scheduled_player(std::size_t iter, std::size_t block_len) {
    if (block_len == 0) throw std::invalid_argument("block_len must be >= 1");
    return (iter / block_len) % 2 == 0 ? Player::Segmenter : Player::Adversary;
}

Player player_at(const TrainConfig& cfg, std::size_t iter) {
    if (iter < cfg.pretrain_adversary_iters) return Player::Adversary;
    if (!cfg.train_adversary) return Player::Segmenter;
    return scheduled_player(iter - cfg.pretrain_adversary_iters, cfg.block_len);
}

Networks build_networks(const TrainConfig& cfg, std::size_t classes) {
    Networks n;
    n.seg_spec = build_segmenter(classes, cfg.seg_channels, cfg.seg_context_layers);
    AdversaryOptions o;
    o.input_channels = encoded_channels(cfg.encoding, classes);
    o.fov = cfg.adv_fov;
    o.capacity = cfg.adv_capacity;
    o.two_branch = cfg.adv_two_branch || cfg.encoding.include_image;
    o.head = cfg.adv_head;
    o.base_width = cfg.adv_base_width;
    n.adv_spec = build_adversary(o);
    return n;
}

TrainState init_state(const Networks& nets, const TrainConfig& cfg) {
    TrainState s;
    s.seg = init_params(nets.seg_spec, cfg.seed);
    s.adv = init_params(nets.adv_spec, cfg.seed + 0x9e3779b97f4a7c15ULL);
    s.rng_state = cfg.seed;
    return s;
}

Batch make_batch(std::span<const Sample* const> samples, std::size_t stride, std::size_t lcn_window) {
    Batch b;
    b.raw = stack_images(samples);
    b.input = prepare_images(samples, lcn_window);
    for (const Sample* s : samples) b.labels.push_back(downsample_labels(s->labels, stride));
    return b;
}

void sgd_step(ModelParams& params, double lr) {
    for (auto& [name, t] : params) {
        if (!t.has_grad()) throw std::runtime_error("sgd_step: no gradient for " + name);
    }
    for (auto& [name, t] : params) {
        auto v = t.mutable_data();
        auto g = t.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        t.zero_grad();
    }
}

namespace {

bool uses_adversary(const TrainConfig& cfg) { return cfg.train_adversary && cfg.lambda > 0.0; }

Tensor adversary_forward(const Networks& nets, const ModelParams& adv, const AdvInput& in,
                         const Tensor& image) {
    return forward(nets.adv_spec, adv, in.channels, nets.adv_spec.two_branch() ? image : Tensor{});
}

// The clamp keeps the objective finite; the guard looks at the unclamped
// cross-entropy, which is infinite once a labeled pixel's true class underflows to 0.
bool cross_entropy_finite(const Tensor& seg_out, std::span<const LabelMap> labels) {
    const std::size_t c = seg_out.dim(1), h = seg_out.dim(2), w = seg_out.dim(3);
    auto p = seg_out.data();
    for (std::size_t n = 0; n < labels.size(); ++n)
        for (std::size_t i = 0; i < h * w; ++i) {
            const Label l = labels[n].values[i];
            if (l == kVoid) continue;
            const double v = p[(n * c + l) * h * w + i];
            if (!(v > 0.0) || !std::isfinite(v)) return false;
        }
    return true;
}

bool params_finite(const ModelParams& params) {
    for (const auto& [name, t] : params)
        for (double v : t.data())
            if (!std::isfinite(v)) return false;
    return true;
}

Tensor segmenter_objective_from(const Tensor& seg_out, const TrainState& state, const Networks& nets,
                                const Batch& batch, const TrainConfig& cfg) {
    const std::size_t classes = seg_out.dim(1);
    const VoidMask mask = VoidMask::from_labels(batch.labels);
    const Tensor target = one_hot(batch.labels, classes);
    Tensor adv_on_pred;
    if (uses_adversary(cfg)) {
        const AdvPair pair = build_adv_pair(batch.raw, batch.labels, seg_out, cfg.encoding);
        adv_on_pred = adversary_forward(nets, state.adv.frozen(), pair.predicted, pair.image);
    }
    const Tensor obj =
        segmenter_objective(seg_out, target, mask, adv_on_pred, ObjectiveConfig{cfg.lambda, cfg.modified_update});
    return mul(obj, 1.0 / static_cast<double>(batch.labels.size()));
}

}  // namespace

Tensor segmenter_batch_objective(const TrainState& state, const Networks& nets, const Batch& batch,
                                 const TrainConfig& cfg) {
    return segmenter_objective_from(forward(nets.seg_spec, state.seg, batch.input), state, nets, batch, cfg);
}

Tensor adversary_batch_objective(const TrainState& state, const Networks& nets, const Batch& batch,
                                 const TrainConfig& cfg) {
    const Tensor seg_out = forward(nets.seg_spec, state.seg.frozen(), batch.input);
    const AdvPair pair = build_adv_pair(batch.raw, batch.labels, seg_out, cfg.encoding);
    const Tensor on_gt = adversary_forward(nets, state.adv, pair.ground_truth, pair.image);
    const Tensor on_pred = adversary_forward(nets, state.adv, pair.predicted, pair.image);
    return mul(adversary_objective(on_gt, on_pred), 1.0 / static_cast<double>(batch.labels.size()));
}

IterationResult train_iteration(TrainState& state, const Networks& nets, const Batch& batch,
                                const TrainConfig& cfg) {
    const Player p = player_at(cfg, state.iter);
    state.player = p;

    IterationResult r{p, 0.0};
    if (p == Player::Segmenter) {
        const Tensor seg_out = forward(nets.seg_spec, state.seg, batch.input);
        const Tensor obj = segmenter_objective_from(seg_out, state, nets, batch, cfg);
        r.loss = cross_entropy_finite(seg_out, batch.labels) ? obj.item() : std::numeric_limits<double>::infinity();
        if (std::isfinite(r.loss)) {
            obj.backward();
            sgd_step(state.seg, cfg.slr);
            if (!params_finite(state.seg)) r.loss = std::numeric_limits<double>::quiet_NaN();
        }
        state.seg_loss.push_back(r.loss);
    } else {
        const Tensor obj = adversary_batch_objective(state, nets, batch, cfg);
        r.loss = obj.item();
        if (std::isfinite(r.loss)) {
            obj.backward();
            sgd_step(state.adv, cfg.alr);
            if (!params_finite(state.adv)) r.loss = std::numeric_limits<double>::quiet_NaN();
        }
        state.adv_loss.push_back(r.loss);
    }
    state.updated.push_back(p);
    ++state.iter;
    return r;
}

AdversaryAccuracy adversary_accuracy(const TrainState& state, const Networks& nets,
                                     std::span<const Sample> samples, const TrainConfig& cfg) {
    const ModelParams seg = state.seg.frozen();
    const ModelParams adv = state.adv.frozen();
    std::size_t gt_hit = 0, pred_hit = 0, cells = 0;
    for (const auto& s : samples) {
        const Sample* one[1] = {&s};
        const Batch b = make_batch(one, nets.seg_spec.stride, cfg.lcn_window);
        const Tensor seg_out = forward(nets.seg_spec, seg, b.input);
        const AdvPair pair = build_adv_pair(b.raw, b.labels, seg_out, cfg.encoding);
        const auto on_gt = adversary_forward(nets, adv, pair.ground_truth, pair.image);
        const auto on_pred = adversary_forward(nets, adv, pair.predicted, pair.image);
        for (double v : on_gt.data()) gt_hit += v > 0.5;
        for (double v : on_pred.data()) pred_hit += v < 0.5;
        cells += on_gt.numel();
    }
    if (cells == 0) throw std::invalid_argument("adversary_accuracy: no samples");
    return {static_cast<double>(gt_hit) / static_cast<double>(cells),
            static_cast<double>(pred_hit) / static_cast<double>(cells)};
}

const EvalRow* RunRecord::best_val_row() const {
    for (const auto& r : rows)
        if (r.split == "val" && r.iter == best_iter) return &r;
    return nullptr;
}

RunRecord train_run(const TrainConfig& cfg, const DatasetSplits& data) {
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train_run: empty train or val split");
    RunRecord rec;
    rec.config = cfg;
    rec.nets = build_networks(cfg, data.classes);
    const Networks& nets = rec.nets;
    TrainState state = init_state(nets, cfg);

    std::vector<Sample> all(data.train);
    all.insert(all.end(), data.val.begin(), data.val.end());
    const EvalOptions eval_opts{BFConfig::for_images(all), cfg.lcn_window};

    auto evaluate = [&](std::size_t iter) {
        const double prev_best = rec.best_val_miou;
        for (const char* split : {"train", "val"}) {
            const auto& samples = std::string_view(split) == "train" ? data.train : data.val;
            EvalRow row{iter, split, evaluate_split(nets.seg_spec, state.seg, samples, eval_opts), std::nullopt};
            if (cfg.train_adversary) row.adv_accuracy = adversary_accuracy(state, nets, samples, cfg);
            if (row.split == "val" && row.report.mean_iou > rec.best_val_miou) {
                rec.best_val_miou = row.report.mean_iou;
                rec.best_val_mbf = row.report.mean_bf;
                rec.best_iter = iter;
            }
            rec.rows.push_back(std::move(row));
        }
        if (rec.best_val_miou > prev_best) rec.best_seg = state.seg.frozen();
    };

    const std::size_t total = cfg.pretrain_adversary_iters + cfg.max_iters;
    const std::size_t n = std::min(cfg.batch_size, data.train.size());
    // One sampling stream per player, so the segmenter sees the same batches
    // whether or not an adversary is being trained alongside it.
    struct Stream {
        std::vector<std::size_t> order;
        std::mt19937_64 rng;
    };
    std::vector<std::size_t> identity(data.train.size());
    std::iota(identity.begin(), identity.end(), std::size_t{0});
    std::seed_seq adv_seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0xad7u};
    Stream seg_stream{identity, std::mt19937_64(cfg.seed)};
    Stream adv_stream{identity, std::mt19937_64(adv_seq)};

    evaluate(0);
    for (std::size_t it = 0; it < total; ++it) {
        Stream& st = player_at(cfg, it) == Player::Segmenter ? seg_stream : adv_stream;
        // Partial Fisher-Yates: the first n entries form the batch.
        for (std::size_t k = 0; k < n; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, st.order.size() - 1);
            std::swap(st.order[k], st.order[pick(st.rng)]);
        }
        std::vector<const Sample*> chosen;
        for (std::size_t k = 0; k < n; ++k) chosen.push_back(&data.train[st.order[k]]);
        const Batch batch = make_batch(chosen, nets.seg_spec.stride, cfg.lcn_window);
        const IterationResult r = train_iteration(state, nets, batch, cfg);
        rec.iterations_run = it + 1;
        if (!std::isfinite(r.loss)) {
            rec.diverged = true;
            char buf[160];
            std::snprintf(buf, sizeof buf, "non-finite %s loss at iteration %zu",
                          std::string(player_name(r.player)).c_str(), it);
            rec.diagnostic = buf;
            break;
        }
        if ((it + 1) % cfg.eval_every == 0 || it + 1 == total) evaluate(it + 1);
    }
    state.rng_state = seg_stream.rng();
    rec.seg_loss = std::move(state.seg_loss);
    rec.adv_loss = std::move(state.adv_loss);
    rec.updated = std::move(state.updated);
    rec.final_seg = state.seg.frozen();
    rec.final_adv = state.adv.frozen();
    return rec;
}

namespace {

std::string cell(std::optional<double> v) {
    if (!v) return {};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

}  // namespace

void write_run_log(std::ostream& out, const RunRecord& record) {
    out << "iter,split,pixel_acc,per_class_acc,mean_iou,mean_bf,bf_std,adv_acc_gt,adv_acc_pred\n";
    for (const auto& r : record.rows) {
        const auto& e = r.report;
        out << r.iter << ',' << r.split << ',' << cell(e.pixel_acc) << ',' << cell(e.mean_class_acc) << ','
            << cell(e.mean_iou) << ',' << cell(e.mean_bf) << ',' << cell(e.bf_std) << ','
            << cell(r.adv_accuracy ? std::optional(r.adv_accuracy->on_ground_truth) : std::nullopt) << ','
            << cell(r.adv_accuracy ? std::optional(r.adv_accuracy->on_predicted) : std::nullopt) << '\n';
    }
}

void write_loss_log(std::ostream& out, const RunRecord& record) {
    out << "iter,player,loss\n";
    std::size_t si = 0, ai = 0;
    char buf[32];
    for (std::size_t i = 0; i < record.updated.size(); ++i) {
        const Player p = record.updated[i];
        const double loss = p == Player::Segmenter ? record.seg_loss[si++] : record.adv_loss[ai++];
        std::snprintf(buf, sizeof buf, "%.9g", loss);
        out << i << ',' << player_name(p) << ',' << buf << '\n';
    }
}

bool grid_better(const RunRecord& a, const RunRecord& b) {
    if (a.diverged != b.diverged) return !a.diverged;
    if (a.best_val_miou != b.best_val_miou) return a.best_val_miou > b.best_val_miou;
    const double abf = a.best_val_mbf.value_or(-1.0), bbf = b.best_val_mbf.value_or(-1.0);
    if (abf != bbf) return abf > bbf;
    const auto& x = a.config;
    const auto& y = b.config;
    if (x.slr != y.slr) return x.slr < y.slr;
    if (x.alr != y.alr) return x.alr < y.alr;
    return x.lambda < y.lambda;
}

GridResult grid_search(const TrainConfig& base, const GridSpace& space, const DatasetSplits& data,
                       std::size_t jobs) {
    std::vector<TrainConfig> configs;
    for (double s : space.slr)
        for (double a : space.alr)
            for (double l : space.lambda) {
                TrainConfig c = base;
                c.slr = s;
                c.alr = a;
                c.lambda = l;
                configs.push_back(c);
            }
    if (configs.empty()) throw std::invalid_argument("grid_search: empty configuration space");
    for (const auto& c : configs) c.validate();

    GridResult result;
    result.runs.resize(configs.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(configs.size());
    auto worker = [&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                result.runs[i] = train_run(configs[i], data);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, configs.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (std::size_t i = 1; i < result.runs.size(); ++i)
        if (grid_better(result.runs[i], result.runs[result.best])) result.best = i;
    return result;
}

}  // namespace advseg
