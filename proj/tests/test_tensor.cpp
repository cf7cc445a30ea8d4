#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "advseg/gradcheck_suite.hpp"
#include "advseg/layers.hpp"
#include "advseg/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace advseg;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
std::vector<double> grads(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST_CASE("elementwise examples") {
    const Tensor x({3}, {1, 2, 3});
    CHECK(values(mul(x, 2.0)) == std::vector<double>{2, 4, 6});
    CHECK(values(add(x, neg(x))) == std::vector<double>{0, 0, 0});
    CHECK(add(x, neg(x)).shape() == x.shape());

    // d/dx log(x) at 0.5 against a central difference with h = 1e-6.
    Tensor p = Tensor::scalar(0.5, true);
    sum(log(p)).backward();
    const double fd = (std::log(0.5 + 1e-6) - std::log(0.5 - 1e-6)) / 2e-6;
    CHECK(p.grad()[0] == doctest::Approx(fd).epsilon(1e-8));
    CHECK(p.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("elementwise errors") {
    const Tensor a({2}, {1, 2}), b({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(log(Tensor({2}, {1.0, 0.0})), std::domain_error);
    CHECK_THROWS_AS(log(Tensor({1}, {-1.0})), std::domain_error);
    CHECK_THROWS_AS(div(a, Tensor({2}, {1.0, 0.0})), std::domain_error);
    // clamping upstream makes the same values legal
    CHECK(std::isfinite(log(clamp(Tensor({2}, {1.0, 0.0}), 1e-7, 1.0)).data()[1]));
}

TEST_CASE("reductions") {
    CHECK(sum(Tensor::full({2, 2}, 1.0)).item() == 4.0);
    CHECK(mean(Tensor({2}, {1, 3})).item() == 2.0);
    CHECK(sum(Tensor::full({2, 2}, 1.0)).shape() == Shape{1});

    Tensor x = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    CHECK(grads(x) == std::vector<double>(6, 1.0));

    const std::size_t ax1[] = {1};
    const Tensor rows = sum(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), ax1);
    CHECK(rows.shape() == Shape{2});
    CHECK(values(rows) == std::vector<double>{6, 15});
    const std::size_t ax0[] = {0};
    CHECK(values(max(Tensor({2, 3}, {1, 7, 3, 4, 5, 6}), ax0)) == std::vector<double>{4, 7, 6});

    const std::size_t bad[] = {2};
    CHECK_THROWS_AS(sum(x, bad), std::out_of_range);
    CHECK_THROWS_AS(mean(x, bad), std::out_of_range);
    CHECK_THROWS_AS(max(x, bad), std::out_of_range);
}

TEST_CASE("max routes ties to the first maximum") {
    Tensor x = Tensor({4}, {1, 3, 3, 2}, true);
    max(x).backward();
    CHECK(grads(x) == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("concat_channels") {
    std::mt19937_64 rng(3);
    Tensor a = oracle::random_tensor({1, 3, 4, 4}, rng, -2, 2, true);
    Tensor b = oracle::random_tensor({1, 3, 4, 4}, rng, -2, 2, true);
    const Tensor parts[] = {a, b};
    const Tensor c = concat_channels(parts);
    CHECK(c.shape() == Shape{1, 6, 4, 4});
    for (std::size_t i = 0; i < 48; ++i) {
        CHECK(c.at(i) == a.at(i));
        CHECK(c.at(48 + i) == b.at(i));
    }
    sum(c).backward();
    CHECK(grads(a) == std::vector<double>(48, 1.0));
    CHECK(grads(b) == std::vector<double>(48, 1.0));

    // C per-class products give 3C channels.
    std::vector<Tensor> per_class;
    for (int k = 0; k < 5; ++k) per_class.push_back(oracle::random_tensor({1, 3, 4, 4}, rng));
    CHECK(concat_channels(per_class).dim(1) == 15);

    const Tensor odd[] = {a, oracle::random_tensor({1, 3, 4, 5}, rng)};
    CHECK_THROWS_AS(concat_channels(odd), std::invalid_argument);
}

TEST_CASE("backward examples") {
    Tensor x = Tensor({2}, {1, 2}, true);
    sum(x * x).backward();
    CHECK(grads(x) == std::vector<double>{2, 4});

    Tensor y = Tensor({2}, {1, 2}, true);
    Tensor other = Tensor({2}, {3, 4}, true);
    sum(other * other + y * 0.0).backward();
    CHECK(grads(y) == std::vector<double>{0, 0});

    // repeated calls accumulate until reset
    Tensor z = Tensor({2}, {1, 2}, true);
    const Tensor root = sum(z * z);
    root.backward();
    root.backward();
    CHECK(grads(z) == std::vector<double>{4, 8});
    z.zero_grad();
    root.backward();
    CHECK(grads(z) == std::vector<double>{2, 4});

    CHECK_THROWS_AS((z * z).backward(), std::invalid_argument);
}

TEST_CASE("backward on a composed graph matches finite differences") {
    std::mt19937_64 rng(11);
    const Shape s{1, 2, 3, 3};
    const oracle::Vec x0 = oracle::random_values(18, rng, 0.5, 2.0);
    auto value = [&](const oracle::Vec& v) {
        const Tensor x(s, v);
        return sum(log(sigmoid(x) + 1.0) * exp(x * 0.3) / (x + 3.0)).item();
    };
    Tensor x(s, x0, true);
    sum(log(sigmoid(x) + 1.0) * exp(x * 0.3) / (x + 3.0)).backward();
    const oracle::Vec g = oracle::numeric_gradient(value, x0, 1e-5);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double a = x.grad()[i];
        CHECK(std::abs(a - g[i]) / std::max(1e-8, std::abs(a) + std::abs(g[i])) < 1e-4);
    }
}

TEST_CASE("grad_check examples") {
    std::mt19937_64 rng(5);
    const Tensor x = oracle::random_tensor({3, 4}, rng);
    CHECK(grad_check([](const Tensor& t) { return sum(t); }, x) < 1e-9);
    CHECK(grad_check([](const Tensor& t) { return sum(sigmoid(t)); }, x) < 1e-4);
    const Tensor inside = oracle::random_tensor({3, 4}, rng, -0.9, 0.9);
    CHECK(grad_check([](const Tensor& t) { return sum(clamp(t, -1.0, 1.0) * t); }, inside) < 1e-4);
    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return t * 2.0; }, x), std::invalid_argument);
}

TEST_CASE("every differentiable op passes the gradient oracle") {
    const auto cases = run_gradcheck_suite(7);
    std::set<std::string> covered;
    for (const auto& c : cases) {
        INFO(c.group << "/" << c.name << " " << c.max_rel_error);
        CHECK(c.passed());
        if (c.group == "op") covered.insert(c.name);
    }
    for (OpKind k : differentiable_ops()) CHECK(covered.count(std::string(op_name(k))) == 1);
}

TEST_CASE("a corrupted backward rule is caught") {
    debug::set_corrupted_op(OpKind::Sigmoid);
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({5}, rng);
    const double err = grad_check([](const Tensor& t) { return sum(sigmoid(t)); }, x);
    debug::set_corrupted_op(std::nullopt);
    CHECK(err > 1e-2);
}

TEST_CASE("determinism and graph reset") {
    auto run = [] {
        std::mt19937_64 rng(9);
        Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng, -2, 2, true);
        Tensor k = oracle::random_tensor({2, 3, 3, 3}, rng, -1, 1, true);
        const Tensor b = oracle::random_tensor({2}, rng, -1, 1, true);
        const Tensor w = oracle::random_tensor({2, 2, 4, 4}, rng);
        const Tensor root = sum(channel_softmax(conv2d(x, ConvParams{k, b, 1, 1, 1})) * w);
        root.backward();
        return std::make_pair(root.item(), grads(k));
    };
    const auto a = run(), b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);

    std::mt19937_64 rng(4);
    Tensor w = oracle::random_tensor({6}, rng, -2, 2, true);
    const Tensor root = sum(exp(w) * w);
    root.backward();
    const auto first = grads(w);
    w.zero_grad();
    root.backward();
    CHECK(grads(w) == first);
}

TEST_CASE("tensor serialization") {
    std::mt19937_64 rng(1);
    const Tensor t = oracle::random_tensor({2, 3, 5}, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "ADVT");
    CHECK(static_cast<std::uint8_t>(bytes[4]) == kTensorFormatVersion);
    CHECK(bytes.size() == 4 + 1 + 4 + 3 * 4 + 30 * 8);
    const Tensor back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    CHECK(values(back) == values(t));

    std::stringstream bad("ADVX\x01");
    CHECK_THROWS(read_tensor(bad));
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS(read_tensor(truncated));
}
