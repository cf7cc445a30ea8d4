#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "advseg/image_io.hpp"
#include "advseg/scenes.hpp"
#include "advseg/training.hpp"
#include "doctest.h"
#include "void_probe.hpp"

using namespace advseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("advseg_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("no shapes gives background inside the void border") {
    SceneSpec spec;
    spec.min_shapes = spec.max_shapes = 0;
    spec.full_annotation_fraction = 0.0;
    const Sample s = generate_scene(spec, 3);
    for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
            const bool border = y == 0 || x == 0 || y + 1 == spec.height || x + 1 == spec.width;
            CHECK(s.labels.at(y, x) == (border ? kVoid : 0));
        }

    spec.full_annotation_fraction = 1.0;
    const Sample full = generate_scene(spec, 3);
    CHECK(std::all_of(full.labels.values.begin(), full.labels.values.end(), [](Label l) { return l == 0; }));
}

TEST_CASE("scene generation is deterministic") {
    SceneSpec spec;
    const Sample a = generate_scene(spec, 17), b = generate_scene(spec, 17);
    CHECK(a.id == "scene_00017");
    CHECK(a.labels == b.labels);
    CHECK(values(a.image) == values(b.image));
    CHECK(a.labels != generate_scene(spec, 18).labels);
    spec.seed = 2;
    CHECK(a.labels != generate_scene(spec, 17).labels);
}

TEST_CASE("samples hold valid labels and images") {
    SceneSpec spec;
    for (std::size_t i = 0; i < 20; ++i) {
        const Sample s = generate_scene(spec, i);
        CHECK(s.image.shape() == Shape{3, spec.height, spec.width});
        for (double v : s.image.data()) CHECK((v >= 0.0 && v <= 1.0));
        for (Label l : s.labels.values) CHECK((l < spec.classes || l == kVoid));
    }
}

TEST_CASE("class pixel fractions over 100 samples") {
    SceneSpec spec;
    std::vector<std::size_t> counts(spec.classes, 0);
    for (std::size_t i = 0; i < 100; ++i)
        for (Label l : generate_scene(spec, i).labels.values)
            if (l != kVoid) ++counts[l];
    for (std::size_t c = 1; c < spec.classes; ++c) {
        CHECK(counts[c] > 0);
        CHECK(counts[0] > counts[c]);
    }
    std::size_t total = 0;
    for (auto n : counts) total += n;
    CHECK(2 * counts[0] > total);
}

TEST_CASE("about three quarters of the scenes are fully annotated") {
    SceneSpec spec;
    std::size_t full = 0;
    for (std::size_t i = 0; i < 200; ++i) full += generate_scene(spec, i).labels.has_void() ? 0 : 1;
    CHECK(full > 120);
    CHECK(full < 180);
}

TEST_CASE("dataset splits") {
    SceneSpec spec;
    spec.height = spec.width = 16;
    const DatasetSplits d = make_dataset(spec, 6, 3, 2);
    CHECK(d.classes == spec.classes);
    CHECK(d.train.size() == 6);
    CHECK(d.val.size() == 3);
    CHECK(d.test.size() == 2);
    std::set<std::string> ids;
    for (const auto* split : {&d.train, &d.val, &d.test})
        for (const auto& s : *split) ids.insert(s.id);
    CHECK(ids.size() == 11);
    CHECK(d.train[0].id == scene_id(0));
    CHECK(d.val[0].id == scene_id(6));
    CHECK(d.test[1].id == scene_id(10));

    const DatasetSplits again = make_dataset(spec, 6, 3, 2);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(again.val[i].labels == d.val[i].labels);
        CHECK(values(again.val[i].image) == values(d.val[i].image));
    }
}

TEST_CASE("train and validation class presence agree") {
    // chi-square homogeneity on per-scene class presence, 3 degrees of freedom
    SceneSpec spec;
    const DatasetSplits d = make_dataset(spec, 200, 200, 0);
    std::vector<double> tr(spec.classes, 0), va(spec.classes, 0);
    auto count = [&](const std::vector<Sample>& split, std::vector<double>& out) {
        for (const auto& s : split) {
            std::set<Label> present(s.labels.values.begin(), s.labels.values.end());
            for (std::size_t c = 0; c < spec.classes; ++c) out[c] += present.count(static_cast<Label>(c));
        }
    };
    count(d.train, tr);
    count(d.val, va);
    double nt = 0, nv = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) nt += tr[c], nv += va[c];
    double chi2 = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        const double col = tr[c] + va[c];
        const double et = col * nt / (nt + nv), ev = col * nv / (nt + nv);
        chi2 += (tr[c] - et) * (tr[c] - et) / et + (va[c] - ev) * (va[c] - ev) / ev;
    }
    INFO("chi2 = " << chi2);
    CHECK(chi2 < 16.27);  // 0.999 quantile
}

TEST_CASE("palette") {
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = a + 1; b < 4; ++b)
            for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(class_color(a)[k] - class_color(b)[k]) >= 0.3 - 1e-12);
    CHECK_THROWS_AS(class_color(8), std::out_of_range);
}

TEST_CASE("sample round trip") {
    TempDir dir("scenes_rt");
    SceneSpec spec;
    spec.full_annotation_fraction = 0.0;
    const Sample s = generate_scene(spec, 5);
    REQUIRE(s.labels.has_void());
    save_sample(dir.path, s);

    const Raster pgm = read_pnm(dir.path / (s.id + ".pgm"));
    CHECK(pgm.data[0] == 255);

    const Sample back = load_sample(dir.path, s.id, spec.classes);
    CHECK(back.id == s.id);
    CHECK(back.labels == s.labels);
    CHECK(back.labels.at(0, 0) == kVoid);
    CHECK(back.image.shape() == s.image.shape());
    double worst = 0;
    for (std::size_t i = 0; i < s.image.numel(); ++i)
        worst = std::max(worst, std::abs(back.image.data()[i] - s.image.data()[i]));
    CHECK(worst <= 1.0 / 255.0);
}

TEST_CASE("dataset round trip") {
    TempDir dir("scenes_ds");
    SceneSpec spec;
    spec.height = spec.width = 16;
    const DatasetSplits d = make_dataset(spec, 3, 2, 1);
    save_dataset(dir.path, d);
    CHECK(fs::exists(dir.path / "manifest.txt"));
    const DatasetSplits back = load_dataset(dir.path);
    CHECK(back.classes == d.classes);
    REQUIRE(back.val.size() == 2);
    CHECK(back.test.size() == 1);
    CHECK(back.val[1].labels == d.val[1].labels);
    CHECK(back.train[2].id == d.train[2].id);
}

TEST_CASE("load errors") {
    TempDir dir("scenes_err");
    SceneSpec spec;
    spec.height = spec.width = 8;
    const Sample s = generate_scene(spec, 0);
    save_sample(dir.path, s);

    SUBCASE("label value out of range") {
        Raster r = read_pnm(dir.path / (s.id + ".pgm"));
        r.data[10] = 7;
        write_pnm(dir.path / (s.id + ".pgm"), r);
        CHECK_THROWS(load_sample(dir.path, s.id, 4));
        CHECK_NOTHROW(load_sample(dir.path, s.id, 8));
    }
    SUBCASE("malformed header") {
        std::ofstream(dir.path / (s.id + ".pgm"), std::ios::binary) << "P2\n8 8\n255\n";
        CHECK_THROWS(load_sample(dir.path, s.id, 4));
    }
    SUBCASE("bad maxval") {
        std::ofstream(dir.path / (s.id + ".pgm"), std::ios::binary) << "P5\n8 8\n65535\n";
        CHECK_THROWS(load_sample(dir.path, s.id, 4));
    }
    SUBCASE("missing manifest") { CHECK_THROWS(load_dataset(dir.path)); }
}

TEST_CASE("input preparation") {
    SceneSpec spec;
    spec.height = spec.width = 16;
    const Sample s = generate_scene(spec, 0);
    const Sample* ptr[] = {&s};
    const Tensor centred = prepare_images(ptr, 0);
    for (std::size_t i = 0; i < s.image.numel(); ++i) CHECK(centred.data()[i] == s.image.data()[i] - 0.5);
    CHECK(prepare_images(ptr, 5).shape() == Shape{1, 3, 16, 16});
}

TEST_CASE("void pixels never reach a loss or a metric") {
    const probe::VoidProbe p = probe::run_void_probe(4, 21);
    INFO("loss " << p.max_loss_delta << " grad " << p.max_grad_delta << " void grad " << p.max_void_grad);
    CHECK(p.void_pixels > 0);
    CHECK(p.cases == 24);
    CHECK(p.exact());
}

TEST_CASE("a baseline segmenter can fit the scenes") {
    SceneSpec spec;
    const DatasetSplits d = make_dataset(spec, 64, 8, 0);
    TrainConfig cfg;
    cfg.lambda = 0.0;
    cfg.train_adversary = false;
    cfg.max_iters = 2000;
    cfg.eval_every = 250;
    const RunRecord r = train_run(cfg, d);
    REQUIRE_FALSE(r.diverged);
    double best = 0;
    for (const auto& row : r.rows)
        if (row.split == "train") best = std::max(best, row.report.mean_iou);
    INFO("best train mIoU " << best);
    CHECK(best >= 0.85);
}
