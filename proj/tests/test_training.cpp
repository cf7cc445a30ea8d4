#include <cmath>
#include <sstream>

#include "advseg/training.hpp"
#include "doctest.h"

using namespace advseg;

namespace {

SceneSpec tiny_scenes() {
    SceneSpec s;
    s.height = s.width = 16;
    s.min_shapes = 1;
    s.max_shapes = 2;
    return s;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.seg_channels = 4;
    c.seg_context_layers = 1;
    c.adv_base_width = 4;
    c.adv_fov = FieldOfView::Small;
    c.batch_size = 2;
    c.max_iters = 12;
    c.eval_every = 6;
    c.block_len = 3;
    return c;
}

const DatasetSplits& tiny_data() {
    static const DatasetSplits d = make_dataset(tiny_scenes(), 6, 2, 0);
    return d;
}

Batch first_batch(const Networks& nets) {
    const auto& d = tiny_data();
    const Sample* s[] = {&d.train[0], &d.train[1]};
    return make_batch(s, nets.seg_spec.stride, 0);
}

std::vector<double> all_grads(const ModelParams& p) {
    std::vector<double> g;
    for (const auto& [n, t] : p)
        if (t.has_grad()) g.insert(g.end(), t.grad().begin(), t.grad().end());
    return g;
}

bool any_grad(const ModelParams& p) {
    for (const auto& [n, t] : p)
        if (t.has_grad())
            for (double v : t.grad())
                if (v != 0.0) return true;
    return false;
}

}  // namespace

TEST_CASE("sgd_step") {
    ModelParams p;
    p.add("w", Tensor({2}, {1.0, 2.0}, true));
    sum(p.get("w") * p.get("w")).backward();
    sgd_step(p, 0.1);
    CHECK(p.get("w").data()[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(p.get("w").data()[1] == doctest::Approx(1.6).epsilon(1e-15));
    CHECK_FALSE(any_grad(p));

    ModelParams untouched;
    untouched.add("c", Tensor({1}, {1.0}, true));
    CHECK_THROWS_AS(sgd_step(untouched, 0.1), std::runtime_error);
}

TEST_CASE("alternation schedule") {
    auto pattern = [](std::size_t block, std::size_t n) {
        std::string s;
        for (std::size_t i = 0; i < n; ++i) s += scheduled_player(i, block) == Player::Segmenter ? 'S' : 'A';
        return s;
    };
    CHECK(pattern(1, 6) == "SASASA");
    CHECK(pattern(5, 12) == "SSSSSAAAAASS");
    CHECK(pattern(50, 101) == std::string(50, 'S') + std::string(50, 'A') + "S");
    CHECK_THROWS_AS(scheduled_player(0, 0), std::invalid_argument);

    TrainConfig c = tiny_config();
    c.pretrain_adversary_iters = 2;
    c.block_len = 2;
    std::string s;
    for (std::size_t i = 0; i < 8; ++i) s += player_at(c, i) == Player::Segmenter ? 'S' : 'A';
    CHECK(s == "AASSAASS");
    c.train_adversary = false;
    c.pretrain_adversary_iters = 0;
    for (std::size_t i = 0; i < 8; ++i) CHECK(player_at(c, i) == Player::Segmenter);
}

TEST_CASE("config validation") {
    TrainConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    auto bad = [&](auto edit) {
        TrainConfig b = tiny_config();
        edit(b);
        CHECK_THROWS_AS(b.validate(), std::invalid_argument);
    };
    bad([](TrainConfig& b) { b.slr = 0; });
    bad([](TrainConfig& b) { b.alr = -1; });
    bad([](TrainConfig& b) { b.lambda = -0.5; });
    bad([](TrainConfig& b) { b.block_len = 0; });
    bad([](TrainConfig& b) { b.batch_size = 0; });
    bad([](TrainConfig& b) { b.lcn_window = 4; });
}

TEST_CASE("with lambda 0 the adversary has no influence") {
    TrainConfig c = tiny_config();
    c.lambda = 0.0;
    const Networks nets = build_networks(c, 4);
    const Batch batch = first_batch(nets);
    TrainState a = init_state(nets, c);
    TrainState b = init_state(nets, c);
    b.adv = init_params(nets.adv_spec, 999);

    const Tensor la = segmenter_batch_objective(a, nets, batch, c);
    const Tensor lb = segmenter_batch_objective(b, nets, batch, c);
    CHECK(la.item() == lb.item());
    la.backward();
    lb.backward();
    CHECK(all_grads(a.seg) == all_grads(b.seg));
}

TEST_CASE("each iteration touches one player only") {
    TrainConfig c = tiny_config();
    c.block_len = 1;
    const Networks nets = build_networks(c, 4);
    const Batch batch = first_batch(nets);
    TrainState st = init_state(nets, c);

    const ModelParams seg0 = st.seg.clone(), adv0 = st.adv.clone();
    CHECK(train_iteration(st, nets, batch, c).player == Player::Segmenter);
    CHECK_FALSE(st.seg.values_equal(seg0));
    CHECK(st.adv.values_equal(adv0));

    const ModelParams seg1 = st.seg.clone(), adv1 = st.adv.clone();
    CHECK(train_iteration(st, nets, batch, c).player == Player::Adversary);
    CHECK(st.seg.values_equal(seg1));
    CHECK_FALSE(st.adv.values_equal(adv1));
    CHECK(st.seg_loss.size() == 1);
    CHECK(st.adv_loss.size() == 1);
    CHECK(st.updated == std::vector<Player>{Player::Segmenter, Player::Adversary});
}

TEST_CASE("objectives are detached from the other player") {
    TrainConfig c = tiny_config();
    const Networks nets = build_networks(c, 4);
    const Batch batch = first_batch(nets);
    TrainState st = init_state(nets, c);

    adversary_batch_objective(st, nets, batch, c).backward();
    CHECK_FALSE(any_grad(st.seg));
    CHECK(any_grad(st.adv));
    st.adv.zero_grad();

    segmenter_batch_objective(st, nets, batch, c).backward();
    CHECK_FALSE(any_grad(st.adv));
    CHECK(any_grad(st.seg));
}

TEST_CASE("adversary starts undecided") {
    TrainConfig c = tiny_config();
    const Networks nets = build_networks(c, 4);
    const TrainState st = init_state(nets, c);
    const Batch batch = first_batch(nets);
    const Tensor seg_out = forward(nets.seg_spec, st.seg, batch.input);
    const AdvPair pair = build_adv_pair(batch.raw, batch.labels, seg_out, c.encoding);
    for (const auto* in : {&pair.ground_truth, &pair.predicted}) {
        const Tensor out = forward(nets.adv_spec, st.adv, in->channels);
        for (double v : out.data()) CHECK(std::abs(v - 0.5) < 0.2);
    }
}

TEST_CASE("training runs are reproducible") {
    const TrainConfig c = tiny_config();
    const RunRecord a = train_run(c, tiny_data());
    const RunRecord b = train_run(c, tiny_data());
    CHECK(a.seg_loss == b.seg_loss);
    CHECK(a.adv_loss == b.adv_loss);
    CHECK(a.final_seg.values_equal(b.final_seg));
    CHECK(a.final_adv.values_equal(b.final_adv));
    std::ostringstream la, lb;
    write_run_log(la, a);
    write_run_log(lb, b);
    CHECK(la.str() == lb.str());

    CHECK(a.iterations_run == 12);
    CHECK(a.seg_loss.size() == 6);
    CHECK(a.adv_loss.size() == 6);
    // evaluations at 0, 6 and 12 on train and val
    CHECK(a.rows.size() == 6);
    REQUIRE(a.best_val_row() != nullptr);
    CHECK(a.best_val_row()->report.mean_iou == a.best_val_miou);

    std::ostringstream loss;
    write_loss_log(loss, a);
    std::size_t lines = 0;
    for (char ch : loss.str()) lines += ch == '\n';
    CHECK(lines == 13);
}

TEST_CASE("the segmenter sees the same batches with or without an adversary") {
    TrainConfig base = tiny_config();
    base.lambda = 0.0;
    base.train_adversary = false;
    base.max_iters = 6;
    TrainConfig alt = base;
    alt.train_adversary = true;
    alt.max_iters = 12;
    const RunRecord a = train_run(base, tiny_data());
    const RunRecord b = train_run(alt, tiny_data());
    CHECK(a.seg_loss == b.seg_loss);
    CHECK(a.final_seg.values_equal(b.final_seg));
}

TEST_CASE("a diverging run stops with a diagnostic") {
    TrainConfig c = tiny_config();
    c.slr = 1e3;
    c.max_iters = 200;
    const RunRecord r = train_run(c, tiny_data());
    CHECK(r.diverged);
    CHECK(r.iterations_run < 200);
    CHECK(r.diagnostic.find("non-finite") != std::string::npos);
}

TEST_CASE("grid search ranking") {
    TrainConfig base = tiny_config();
    base.max_iters = 6;
    GridSpace space{{1e-3, 1e3}, {1e-2}, {0.0, 1.0}};
    const GridResult g = grid_search(base, space, tiny_data(), 1);
    REQUIRE(g.runs.size() == 4);
    CHECK(g.runs[1].config.lambda == 1.0);
    CHECK(g.runs[2].config.slr == 1e3);

    // brute force: the best run is ranked before every other run
    for (std::size_t i = 0; i < g.runs.size(); ++i)
        if (i != g.best) CHECK_FALSE(grid_better(g.runs[i], g.runs[g.best]));
    for (const auto& r : g.runs)
        if (r.diverged) CHECK(grid_better(g.runs[g.best], r));

    const GridResult par = grid_search(base, space, tiny_data(), 2);
    CHECK(par.best == g.best);
    for (std::size_t i = 0; i < 4; ++i) CHECK(par.runs[i].seg_loss == g.runs[i].seg_loss);

    CHECK_THROWS_AS(grid_search(base, GridSpace{{}, {1e-2}, {1.0}}, tiny_data()), std::invalid_argument);
}

TEST_CASE("grid_better ordering") {
    RunRecord a, b;
    a.best_val_miou = 0.5;
    b.best_val_miou = 0.9;
    b.diverged = true;
    CHECK(grid_better(a, b));
    b.diverged = false;
    CHECK(grid_better(b, a));
    b.best_val_miou = 0.5;
    a.best_val_mbf = 0.7;
    b.best_val_mbf = 0.6;
    CHECK(grid_better(a, b));
    b.best_val_mbf = 0.7;
    a.config.slr = 1e-4;
    b.config.slr = 1e-3;
    CHECK(grid_better(a, b));
    CHECK_FALSE(grid_better(b, a));
}
