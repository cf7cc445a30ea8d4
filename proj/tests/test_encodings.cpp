#include <cmath>
#include <random>

#include "advseg/encodings.hpp"
#include "advseg/layers.hpp"
#include "advseg/losses.hpp"
#include "advseg/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advseg;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_prob(const Shape& s, std::mt19937_64& rng) {
    return channel_softmax(oracle::random_tensor(s, rng, -3, 3));
}

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t classes, std::mt19937_64& rng, double void_rate) {
    std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
    std::uniform_real_distribution<double> u(0, 1);
    LabelMap m(h, w);
    for (auto& v : m.values) v = u(rng) < void_rate ? kVoid : static_cast<Label>(cls(rng));
    return m;
}

}  // namespace

TEST_CASE("one_hot") {
    CHECK(values(one_hot(LabelMap(1, 1, 0), 2)) == std::vector<double>{1, 0});
    CHECK(values(one_hot(LabelMap(1, 1, kVoid), 2)) == std::vector<double>{0, 0});
    CHECK_THROWS_AS(one_hot(LabelMap(1, 1, 2), 2), std::invalid_argument);

    std::mt19937_64 rng(3);
    const LabelMap lab = random_labels(5, 6, 4, rng, 0.2);
    const LabelMap back = argmax_labels(one_hot(lab, 4)).front();
    for (std::size_t i = 0; i < lab.size(); ++i)
        if (lab.values[i] != kVoid) CHECK(back.values[i] == lab.values[i]);
}

TEST_CASE("downsample_labels") {
    std::mt19937_64 rng(1);
    const LabelMap lab = random_labels(6, 4, 3, rng, 0.2);
    CHECK(downsample_labels(lab, 1) == lab);

    const LabelMap board(4, 4, std::vector<Label>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3});
    const LabelMap small = downsample_labels(board, 2);
    CHECK(small == LabelMap(2, 2, std::vector<Label>{0, 1, 2, 3}));

    LabelMap v(4, 4, 1);
    v.at(2, 0) = kVoid;
    CHECK(downsample_labels(v, 2).at(1, 0) == kVoid);
    CHECK_THROWS_AS(downsample_labels(LabelMap(5, 4, 0), 2), std::invalid_argument);

    // index arithmetic oracle
    const LabelMap big = random_labels(12, 9, 4, rng, 0.1);
    const LabelMap d = downsample_labels(big, 3);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) CHECK(d.at(r, c) == big.at(3 * r, 3 * c));
}

TEST_CASE("encode_basic") {
    std::mt19937_64 rng(5);
    const LabelMap lab = random_labels(3, 3, 3, rng, 0.0);
    const Tensor oh = one_hot(lab, 3);
    CHECK(values(encode_basic(oh, VoidMask::from_labels(lab), Provenance::GroundTruth).channels) == values(oh));

    LabelMap holes = lab;
    holes.at(1, 1) = kVoid;
    const Tensor p = random_prob({1, 3, 3, 3}, rng);
    const AdvInput in = encode_basic(p, VoidMask::from_labels(holes));
    CHECK(in.channels.dim(1) == 3);
    CHECK(in.provenance == Provenance::Predicted);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 9; ++i) CHECK(in.channels.at(c * 9 + i) == (i == 4 ? 0.0 : p.at(c * 9 + i)));
}

TEST_CASE("encode_product") {
    const Tensor img({1, 3, 1, 1}, {0.2, 0.4, 0.6});
    const VoidMask m = VoidMask::all_labeled(1, 1, 1);
    CHECK(values(encode_product(img, Tensor({1, 2, 1, 1}, {1, 0}), m).channels) ==
          std::vector<double>{0.2, 0.4, 0.6, 0, 0, 0});
    CHECK(values(encode_product(img, Tensor({1, 2, 1, 1}, {0.5, 0.5}), m).channels) ==
          std::vector<double>{0.1, 0.2, 0.3, 0.1, 0.2, 0.3});
    CHECK(encode_product(img, Tensor({1, 2, 1, 1}, {0.5, 0.5}), m).channels.dim(1) == 6);

    // the full-resolution image is sub-sampled to the map's resolution first
    std::mt19937_64 rng(2);
    const Tensor big = oracle::random_tensor({1, 3, 8, 8}, rng, 0, 1);
    const Tensor p = random_prob({1, 4, 4, 4}, rng);
    const Tensor out = encode_product(big, p, VoidMask::all_labeled(1, 4, 4)).channels;
    REQUIRE(out.shape() == Shape{1, 12, 4, 4});
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x)
                    CHECK(out.at(((c * 3 + k) * 4 + y) * 4 + x) ==
                          doctest::Approx(p.at((c * 4 + y) * 4 + x) * big.at((k * 8 + 2 * y) * 8 + 2 * x)).epsilon(1e-15));
}

TEST_CASE("encode_product is linear in the probability map") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor img = oracle::random_tensor({2, 3, 6, 6}, rng, 0, 1);
        const Tensor p = random_prob({2, 3, 6, 6}, rng), q = random_prob({2, 3, 6, 6}, rng);
        const double a = std::uniform_real_distribution<double>(0, 1)(rng);
        const VoidMask m = VoidMask::from_labels(std::vector<LabelMap>{random_labels(6, 6, 3, rng, 0.2),
                                                                       random_labels(6, 6, 3, rng, 0.2)});
        const Tensor lhs = encode_product(img, p * a + q * (1 - a), m).channels;
        const Tensor ep = encode_product(img, p, m).channels, eq = encode_product(img, q, m).channels;
        for (std::size_t i = 0; i < lhs.numel(); ++i)
            CHECK(std::abs(lhs.at(i) - (a * ep.at(i) + (1 - a) * eq.at(i))) <= 1e-12);
    }
}

TEST_CASE("encode_scaling examples") {
    const LabelMap zero(1, 1, 0);
    const Tensor keep = encode_scaling(Tensor({1, 3, 1, 1}, {0.95, 0.03, 0.02}), std::span(&zero, 1), 0.9);
    CHECK(values(keep) == std::vector<double>{0.95, 0.03, 0.02});

    const Tensor moved = encode_scaling(Tensor({1, 3, 1, 1}, {0.5, 0.3, 0.2}), std::span(&zero, 1), 0.9);
    CHECK(moved.at(0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(moved.at(1) == doctest::Approx(0.06).epsilon(1e-14));
    CHECK(moved.at(2) == doctest::Approx(0.04).epsilon(1e-14));

    const Tensor limit = encode_scaling(Tensor({1, 3, 1, 1}, {1.0, 0.0, 0.0}), std::span(&zero, 1), 0.9);
    CHECK(values(limit) == std::vector<double>{1, 0, 0});

    const LabelMap v(1, 1, kVoid);
    CHECK(values(encode_scaling(Tensor({1, 3, 1, 1}, {0.5, 0.3, 0.2}), std::span(&v, 1), 0.9)) ==
          std::vector<double>{0, 0, 0});

    CHECK_THROWS_AS(encode_scaling(Tensor({1, 3, 1, 1}, {0.5, 0.3, 0.2}), std::span(&zero, 1), 0.3),
                    std::invalid_argument);
    CHECK_THROWS_AS(encode_scaling(Tensor({1, 3, 1, 1}, {0.5, 0.3, 0.2}), std::span(&zero, 1), 1.1),
                    std::invalid_argument);
}

TEST_CASE("encode_scaling sums to one, keeps tau mass and is identity above tau") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const Tensor p = random_prob({1, 4, 5, 5}, rng);
        const std::vector<LabelMap> labs{random_labels(5, 5, 4, rng, 0.2)};
        const Tensor y = encode_scaling(p, labs, 0.9);
        for (std::size_t i = 0; i < 25; ++i) {
            const Label l = labs[0].values[i];
            double total = 0.0;
            for (std::size_t c = 0; c < 4; ++c) total += y.at(c * 25 + i);
            if (l == kVoid) {
                CHECK(total == 0.0);
                continue;
            }
            CHECK(std::abs(total - 1.0) <= 1e-12);
            CHECK(y.at(l * 25 + i) >= 0.9);
            if (p.at(l * 25 + i) >= 0.9)
                for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(c * 25 + i) == p.at(c * 25 + i));
        }
    }
}

TEST_CASE("encode_scaling minimizes KL under the tau constraint") {
    std::mt19937_64 rng(6);
    std::exponential_distribution<double> ex(1.0);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t c = 2 + trial % 3;
        oracle::Vec s(c);
        double total = 0.0;
        for (auto& v : s) total += (v = ex(rng) + 1e-9);
        for (auto& v : s) v /= total;
        const std::size_t l = trial % c;
        Tensor p({1, c, 1, 1}, s);
        const LabelMap lab(1, 1, static_cast<Label>(l));
        const Tensor y = encode_scaling(p, std::span(&lab, 1), 0.9);
        double best = 0.0;
        oracle::scaling_minimizer(s, l, 0.9, &best);
        CHECK(oracle::kl(values(y), s) <= best + 1e-6);
        CHECK(oracle::kl(values(y), s) >= best - 1e-6);
    }
}

TEST_CASE("build_adv_pair") {
    std::mt19937_64 rng(8);
    std::vector<LabelMap> labs{random_labels(4, 4, 3, rng, 0.25), random_labels(4, 4, 3, rng, 0.25)};
    const Tensor images = oracle::random_tensor({2, 3, 8, 8}, rng, 0, 1);
    const VoidMask m = VoidMask::from_labels(labs);
    Tensor logits = oracle::random_tensor({2, 3, 4, 4}, rng, -2, 2, true);
    const Tensor seg = channel_softmax(logits);

    const AdvPair basic = build_adv_pair(images, labs, seg, EncodingKind{Encoding::Basic, 0.9, false});
    CHECK(values(basic.ground_truth.channels) == values(one_hot(labs, 3)));
    CHECK(values(basic.predicted.channels) == values(apply_void_zeroing(seg, m)));
    CHECK(basic.ground_truth.provenance == Provenance::GroundTruth);
    CHECK(basic.predicted.provenance == Provenance::Predicted);
    CHECK_FALSE(basic.ground_truth.channels.requires_grad());
    CHECK(basic.predicted.channels.requires_grad());
    CHECK_FALSE(basic.image.defined());

    const Tensor exact = one_hot(labs, 3);
    const AdvPair limit = build_adv_pair(images, labs, exact, EncodingKind{Encoding::Scaling, 0.9, false});
    CHECK(values(limit.ground_truth.channels) == values(exact));

    const AdvPair prod = build_adv_pair(images, labs, seg, EncodingKind{Encoding::Product, 0.9, true});
    CHECK(prod.ground_truth.channels.dim(1) == 9);
    CHECK(prod.predicted.channels.dim(1) == 9);
    CHECK(prod.image.shape() == Shape{2, 3, 4, 4});
    CHECK(encoded_channels(EncodingKind{Encoding::Product, 0.9, false}, 5) == 15);
    CHECK(encoded_channels(EncodingKind{Encoding::Scaling, 0.9, false}, 5) == 5);

    // void positions carry nothing and receive no gradient on either side
    for (const AdvPair* pr : {&basic, &prod}) {
        const std::size_t cc = pr->predicted.channels.dim(1);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 16; ++i) {
                if (labs[n].values[i] != kVoid) continue;
                for (std::size_t c = 0; c < cc; ++c) {
                    CHECK(pr->ground_truth.channels.at((n * cc + c) * 16 + i) == 0.0);
                    CHECK(pr->predicted.channels.at((n * cc + c) * 16 + i) == 0.0);
                }
            }
    }
    const Tensor w = oracle::random_tensor(prod.predicted.channels.shape(), rng);
    sum(mul(prod.predicted.channels, w)).backward();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 16; ++i)
            if (labs[n].values[i] == kVoid)
                for (std::size_t c = 0; c < 3; ++c) CHECK(logits.grad()[(n * 3 + c) * 16 + i] == 0.0);
}

TEST_CASE("encodings commute with void zeroing") {
    std::mt19937_64 rng(10);
    const std::vector<LabelMap> labs{random_labels(6, 6, 3, rng, 0.3)};
    const VoidMask m = VoidMask::from_labels(labs);
    const Tensor p = random_prob({1, 3, 6, 6}, rng);
    const Tensor img = oracle::random_tensor({1, 3, 6, 6}, rng, 0, 1);
    const Tensor zp = apply_void_zeroing(p, m);
    CHECK(values(encode_basic(zp, m).channels) == values(encode_basic(p, m).channels));
    CHECK(values(encode_product(img, zp, m).channels) == values(encode_product(img, p, m).channels));
    CHECK(values(apply_void_zeroing(encode_scaling(p, labs, 0.9), m)) == values(encode_scaling(p, labs, 0.9)));
    CHECK(values(encode_scaling(zp, labs, 0.9)) == values(encode_scaling(p, labs, 0.9)));
}
