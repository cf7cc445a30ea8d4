// Alternating SGD for the segmenter and adversary, training runs with periodic
// evaluation, and the hyper-parameter grid search.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advseg/encodings.hpp"
#include "advseg/losses.hpp"
#include "advseg/metrics.hpp"
#include "advseg/networks.hpp"
#include "advseg/scenes.hpp"

namespace advseg {

enum class Player { Segmenter, Adversary };

std::string_view player_name(Player p);

struct TrainConfig {
    double slr = 2e-4;
    double alr = 1e-2;
    double lambda = 1.0;
    /// Iterations per player turn; 1 is the fast scheme.
    std::size_t block_len = 500;
    std::size_t batch_size = 4;
    std::size_t max_iters = 1000;
    std::uint64_t seed = 1;
    EncodingKind encoding;
    bool modified_update = true;
    std::size_t eval_every = 100;
    /// When false only the segmenter is trained (the cross-entropy baseline).
    bool train_adversary = true;
    /// Adversary-only iterations before alternation starts.
    std::size_t pretrain_adversary_iters = 0;
    std::size_t lcn_window = 0;

    std::size_t seg_channels = 16;
    std::size_t seg_context_layers = 4;
    FieldOfView adv_fov = FieldOfView::Large;
    Capacity adv_capacity = Capacity::Full;
    bool adv_two_branch = false;
    AdversaryHead adv_head = AdversaryHead::Sigmoid;
    std::size_t adv_base_width = 16;

    /// Throws std::invalid_argument on out-of-range values.
    void validate() const;
};

/// Player updated at 0-indexed iteration `iter` (after any pre-training).
Player scheduled_player(std::size_t iter, std::size_t block_len);
/// Player updated at absolute iteration `iter` of a run with `cfg`.
Player player_at(const TrainConfig& cfg, std::size_t iter);

struct Networks {
    NetSpec seg_spec;
    NetSpec adv_spec;
};

Networks build_networks(const TrainConfig& cfg, std::size_t classes);

struct TrainState {
    std::size_t iter = 0;
    Player player = Player::Segmenter;
    ModelParams seg;
    ModelParams adv;
    std::vector<double> seg_loss;  // one entry per segmenter iteration
    std::vector<double> adv_loss;  // one entry per adversary iteration
    std::vector<Player> updated;   // player updated at each iteration
    std::uint64_t rng_state = 0;
};

TrainState init_state(const Networks& nets, const TrainConfig& cfg);

/// One training batch at the segmenter's output resolution.
struct Batch {
    Tensor input;                  // N x 3 x H x W network input
    Tensor raw;                    // the same images before normalization
    std::vector<LabelMap> labels;  // down-sampled to the output resolution
};

Batch make_batch(std::span<const Sample* const> samples, std::size_t stride, std::size_t lcn_window);

/// p <- p - lr * grad for every parameter, then zeroes the gradients.
void sgd_step(ModelParams& params, double lr);

struct IterationResult {
    Player player = Player::Segmenter;
    double loss = 0.0;
};

/// Updates exactly one player on `batch`. Objectives are divided by the batch
/// size. The reported loss is infinite when the unclamped cross-entropy is
/// (a labeled pixel's true class has probability 0), and NaN when an update
/// leaves a non-finite parameter; no update is applied in the first case.
IterationResult train_iteration(TrainState& state, const Networks& nets, const Batch& batch,
                                const TrainConfig& cfg);

/// Segmenter objective on a batch with the adversary held fixed (gradients
/// land on state.seg only).
Tensor segmenter_batch_objective(const TrainState& state, const Networks& nets, const Batch& batch,
                                 const TrainConfig& cfg);
/// Adversary objective on a batch with the segmenter detached.
Tensor adversary_batch_objective(const TrainState& state, const Networks& nets, const Batch& batch,
                                 const TrainConfig& cfg);

/// Fraction of adversary grid outputs on the correct side of 0.5, per
/// provenance.
struct AdversaryAccuracy {
    double on_ground_truth = 0.0;
    double on_predicted = 0.0;
    double mean() const { return 0.5 * (on_ground_truth + on_predicted); }
};

AdversaryAccuracy adversary_accuracy(const TrainState& state, const Networks& nets,
                                     std::span<const Sample> samples, const TrainConfig& cfg);

struct EvalRow {
    std::size_t iter = 0;
    std::string split;
    EvalReport report;
    std::optional<AdversaryAccuracy> adv_accuracy;
};

struct RunRecord {
    TrainConfig config;
    std::vector<EvalRow> rows;  // iteration order
    std::vector<double> seg_loss;
    std::vector<double> adv_loss;
    std::vector<Player> updated;
    bool diverged = false;
    std::string diagnostic;
    std::size_t iterations_run = 0;
    std::size_t best_iter = 0;
    double best_val_miou = -1.0;
    std::optional<double> best_val_mbf;
    ModelParams best_seg;
    ModelParams final_seg;
    ModelParams final_adv;
    Networks nets;

    /// Validation row at the best checkpoint, if any.
    const EvalRow* best_val_row() const;
};

/// Runs cfg.max_iters iterations (plus pre-training), evaluating train and
/// val every cfg.eval_every iterations and at the end. A non-finite loss stops
/// the run and marks it diverged.
RunRecord train_run(const TrainConfig& cfg, const DatasetSplits& data);

/// One line per evaluation row.
void write_run_log(std::ostream& out, const RunRecord& record);
/// One line per iteration: iter, player, loss.
void write_loss_log(std::ostream& out, const RunRecord& record);

struct GridSpace {
    std::vector<double> slr;
    std::vector<double> alr;
    std::vector<double> lambda;
};

struct GridResult {
    std::vector<RunRecord> runs;  // cross-product order: slr, then alr, then lambda
    std::size_t best = 0;
};

/// True when a should be ranked before b.
bool grid_better(const RunRecord& a, const RunRecord& b);

GridResult grid_search(const TrainConfig& base, const GridSpace& space, const DatasetSplits& data,
                       std::size_t jobs = 1);

}  // namespace advseg
