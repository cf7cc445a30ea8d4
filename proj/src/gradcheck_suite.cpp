#include "advseg/gradcheck_suite.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "advseg/encodings.hpp"
#include "advseg/layers.hpp"
#include "advseg/losses.hpp"
#include "advseg/networks.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

namespace {

constexpr double kMargin = 1e-3;

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

    Tensor values(const Shape& s, double lo = -2.0, double hi = 2.0) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = uniform(lo, hi);
        return Tensor(s, std::move(v));
    }

    /// Values in [lo, hi] at least kMargin away from every kink.
    Tensor away_from(const Shape& s, std::initializer_list<double> kinks, double lo = -2.0, double hi = 2.0) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) {
            do {
                x = uniform(lo, hi);
            } while (std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) < kMargin; }));
        }
        return Tensor(s, std::move(v));
    }

    /// Pairwise distinct values (gaps >= 0.01) in a random order, so maxima are unique.
    Tensor distinct(const Shape& s) {
        const std::size_t n = shape_numel(s);
        std::vector<double> v(n);
        const double step = n > 1 ? std::min(0.2, 4.0 / static_cast<double>(n)) : 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = -2.0 + step * static_cast<double>(i) + uniform(0.0, step / 4);
        std::shuffle(v.begin(), v.end(), rng_);
        return Tensor(s, std::move(v));
    }

    /// Random signs, magnitudes in [0.5, 1.5].
    Tensor weights(const Shape& s) {
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) x = (uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(0.5, 1.5);
        return Tensor(s, std::move(v));
    }

    LabelMap labels(std::size_t h, std::size_t w, std::size_t classes, double void_fraction) {
        LabelMap m(h, w);
        for (auto& l : m.values)
            l = uniform(0.0, 1.0) < void_fraction
                    ? kVoid
                    : static_cast<Label>(std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng_));
        return m;
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

/// Scalar probe: random weighted sum, so no gradient is trivially symmetric.
struct Probe {
    Tensor w;
    Tensor operator()(const Tensor& t) const { return sum(mul(t, w)); }
};

double check(const ScalarFn& f, const Tensor& x) { return grad_check(f, x, kGradCheckStep); }

template <class F>
double check2(F f, const Tensor& a, const Tensor& b) {
    return std::max(check([&](const Tensor& t) { return f(t, b); }, a),
                    check([&](const Tensor& t) { return f(a, t); }, b));
}

void op_cases(Gen& g, std::vector<GradCheckCase>& out) {
    auto add_case = [&](OpKind k, double err) { out.push_back({"op", std::string(op_name(k)), err}); };
    const Shape s{2, 3, 4};
    const Probe p{g.weights(s)};

    add_case(OpKind::Add, check2([&](const Tensor& a, const Tensor& b) { return p(add(a, b)); }, g.values(s), g.values(s)));
    add_case(OpKind::Sub, check2([&](const Tensor& a, const Tensor& b) { return p(sub(a, b)); }, g.values(s), g.values(s)));
    add_case(OpKind::Mul, check2([&](const Tensor& a, const Tensor& b) { return p(mul(a, b)); }, g.values(s), g.values(s)));
    {
        Tensor den = g.values(s, 0.5, 2.0);
        auto d = den.mutable_data();
        for (std::size_t i = 0; i < d.size(); i += 2) d[i] = -d[i];
        add_case(OpKind::Div, check2([&](const Tensor& a, const Tensor& b) { return p(div(a, b)); }, g.values(s), den));
    }
    add_case(OpKind::AddScalar, check([&](const Tensor& x) { return p(add(x, 0.7)); }, g.values(s)));
    add_case(OpKind::MulScalar, check([&](const Tensor& x) { return p(mul(x, -1.3)); }, g.values(s)));
    add_case(OpKind::Neg, check([&](const Tensor& x) { return p(neg(x)); }, g.values(s)));
    add_case(OpKind::Log, check([&](const Tensor& x) { return p(log(x)); }, g.values(s, 0.2, 2.0)));
    add_case(OpKind::Exp, check([&](const Tensor& x) { return p(exp(x)); }, g.values(s)));
    add_case(OpKind::MaxScalar, check([&](const Tensor& x) { return p(max_with_scalar(x, 0.3)); }, g.away_from(s, {0.3})));
    add_case(OpKind::Clamp, check([&](const Tensor& x) { return p(clamp(x, -0.5, 0.5)); }, g.away_from(s, {-0.5, 0.5})));

    const std::array<std::size_t, 2> axes{0, 2};
    const Probe pr{g.weights({3})};
    add_case(OpKind::Sum, std::max(check([&](const Tensor& x) { return mul(sum(x), 0.8); }, g.values(s)),
                                   check([&](const Tensor& x) { return pr(sum(x, axes)); }, g.values(s))));
    add_case(OpKind::Mean, std::max(check([&](const Tensor& x) { return mul(mean(x), 0.8); }, g.values(s)),
                                    check([&](const Tensor& x) { return pr(mean(x, axes)); }, g.values(s))));
    add_case(OpKind::Max, std::max(check([&](const Tensor& x) { return max(x); }, g.distinct(s)),
                                   check([&](const Tensor& x) { return pr(max(x, axes)); }, g.distinct(s))));

    const Shape a4{2, 2, 3, 3}, b4{2, 3, 3, 3};
    const Probe pc{g.weights({2, 5, 3, 3})};
    add_case(OpKind::ConcatChannels, check2(
                                         [&](const Tensor& a, const Tensor& b) {
                                             const Tensor parts[2] = {a, b};
                                             return pc(concat_channels(parts));
                                         },
                                         g.values(a4), g.values(b4)));
    const Probe ps{g.weights({2, 2, 3, 3})};
    add_case(OpKind::SliceChannels, check([&](const Tensor& x) { return ps(slice_channels(x, 1, 3)); }, g.values(b4)));

    {
        // 'same' 3x3 and strided dilated variants, every input.
        double err = 0.0;
        struct Geo { std::size_t stride, dilation, padding; };
        for (Geo geo : {Geo{1, 1, 1}, Geo{2, 2, 1}}) {
            const Tensor x = g.values({2, 3, 5, 5});
            const Tensor k = g.values({2, 3, 3, 3}, -1.0, 1.0);
            const Tensor b = g.values({2}, -0.5, 0.5);
            const std::size_t ho = conv_output_extent(5, 3, geo.stride, geo.dilation, geo.padding);
            const Probe pw{g.weights({2, 2, ho, ho})};
            auto conv = [&](const Tensor& xi, const Tensor& ki, const Tensor& bi) {
                return pw(conv2d(xi, ConvParams{ki, bi, geo.stride, geo.dilation, geo.padding}));
            };
            err = std::max(err, check([&](const Tensor& t) { return conv(t, k, b); }, x));
            err = std::max(err, check([&](const Tensor& t) { return conv(x, t, b); }, k));
            err = std::max(err, check([&](const Tensor& t) { return conv(x, k, t); }, b));
        }
        add_case(OpKind::Conv2d, err);
    }
    const Probe pp{g.weights({2, 2, 2, 2})};
    add_case(OpKind::MaxPool2, check([&](const Tensor& x) { return pp(maxpool2(x)); }, g.distinct({2, 2, 4, 4})));
    const Probe p4{g.weights({2, 3, 3, 3})};
    add_case(OpKind::Relu, check([&](const Tensor& x) { return p4(relu(x)); }, g.away_from(b4, {0.0})));
    add_case(OpKind::Sigmoid, check([&](const Tensor& x) { return p4(sigmoid(x)); }, g.values(b4)));
    add_case(OpKind::ChannelSoftmax, check([&](const Tensor& x) { return p4(channel_softmax(x)); }, g.values(b4)));
    const Probe p6{g.weights({2, 6, 3, 3})};
    add_case(OpKind::ChannelProduct,
             check2([&](const Tensor& a, const Tensor& b) { return p6(channel_product(a, b)); }, g.values(a4),
                    g.values(b4)));
}

void loss_cases(Gen& g, std::vector<GradCheckCase>& out) {
    const std::size_t n = 2, c = 3, h = 3, w = 3;
    std::vector<LabelMap> labels{g.labels(h, w, c, 0.3), g.labels(h, w, c, 0.3)};
    const VoidMask mask = VoidMask::from_labels(labels);
    const Tensor target = one_hot(labels, c);
    const Tensor logits = g.values({n, c, h, w});
    auto soft = [](const Tensor& x) { return channel_softmax(x); };

    out.push_back({"loss", "mce_loss", check([&](const Tensor& x) { return mce_loss(soft(x), target, mask); }, logits)});
    out.push_back({"loss", "bce_loss scalar",
                   std::max(check([](const Tensor& x) { return bce_loss(sigmoid(x), 1); }, g.values({1})),
                            check([](const Tensor& x) { return bce_loss(sigmoid(x), 0); }, g.values({1})))});
    const Tensor grid_logits = g.values({n, 1, 2, 2});
    out.push_back({"loss", "bce_loss grid",
                   std::max(check([](const Tensor& x) { return bce_loss(sigmoid(x), 1); }, grid_logits),
                            check([](const Tensor& x) { return bce_loss(sigmoid(x), 0); }, grid_logits))});
    const Probe pz{g.weights({n, c, h, w})};
    out.push_back({"loss", "apply_void_zeroing",
                   check([&](const Tensor& x) { return pz(apply_void_zeroing(soft(x), mask)); }, logits)});

    const Tensor a_gt = g.values({n, 1, 2, 2}), a_pred = g.values({n, 1, 2, 2});
    out.push_back({"loss", "adversary_objective",
                   check2([](const Tensor& x, const Tensor& y) { return adversary_objective(sigmoid(x), sigmoid(y)); },
                          a_gt, a_pred)});
    for (bool modified : {true, false}) {
        const ObjectiveConfig cfg{0.7, modified};
        out.push_back({"loss", modified ? "segmenter_objective modified" : "segmenter_objective original",
                       check2(
                           [&](const Tensor& x, const Tensor& y) {
                               return segmenter_objective(soft(x), target, mask, sigmoid(y), cfg);
                           },
                           logits, a_pred)});
    }
    const ObjectiveConfig cfg{0.7, true};
    double err = check2(
        [&](const Tensor& x, const Tensor& y) { return hybrid_loss(soft(x), target, mask, sigmoid(a_gt), sigmoid(y), cfg); },
        logits, a_pred);
    err = std::max(err, check([&](const Tensor& y) { return hybrid_loss(soft(logits), target, mask, sigmoid(y), sigmoid(a_pred), cfg); },
                              a_gt));
    out.push_back({"loss", "hybrid_loss", err});
}

void encoding_cases(Gen& g, std::vector<GradCheckCase>& out) {
    const std::size_t n = 2, c = 3, h = 4, w = 4;
    std::vector<LabelMap> labels{g.labels(h, w, c, 0.25), g.labels(h, w, c, 0.25)};
    const VoidMask mask = VoidMask::from_labels(labels);
    const Tensor logits = g.values({n, c, h, w});
    const Tensor image = g.values({n, 3, 2 * h, 2 * w}, 0.0, 1.0);
    auto soft = [](const Tensor& x) { return channel_softmax(x); };

    const Probe pb{g.weights({n, c, h, w})};
    out.push_back({"encoding", "encode_basic",
                   check([&](const Tensor& x) { return pb(encode_basic(soft(x), mask).channels); }, logits)});
    const Probe pp{g.weights({n, 3 * c, h, w})};
    out.push_back({"encoding", "encode_product",
                   check([&](const Tensor& x) { return pp(encode_product(image, soft(x), mask).channels); }, logits)});
    for (Encoding e : {Encoding::Basic, Encoding::Product, Encoding::Scaling}) {
        const EncodingKind kind{e, 0.9, false};
        const Probe pe{g.weights({n, encoded_channels(kind, c), h, w})};
        out.push_back({"encoding", "build_adv_pair " + std::string(encoding_name(e)) + " predicted side",
                       check([&](const Tensor& x) { return pe(build_adv_pair(image, labels, soft(x), kind).predicted.channels); },
                             logits)});
    }
}

ModelParams random_params(const NetSpec& spec, Gen& g) {
    ModelParams p = init_params(spec, 11);
    for (auto& [name, t] : p) {
        // Nonzero biases keep pre-activations off the relu kink.
        const bool bias = name.ends_with(".bias");
        t = bias ? g.values(t.shape(), -0.2, 0.2) : g.values(t.shape(), -0.6, 0.6);
    }
    return p;
}

/// Hybrid loss of a segmenter + adversary pair, differentiated w.r.t. the
/// image and every parameter tensor of both networks.
double end_to_end(Gen& g, const EncodingKind& enc, const AdversaryOptions& adv_opts) {
    const std::size_t classes = 2, size = 8;
    const NetSpec seg = build_segmenter(classes, 4, 2);
    AdversaryOptions o = adv_opts;
    o.input_channels = encoded_channels(enc, classes);
    o.base_width = 4;
    const NetSpec adv = build_adversary(o);
    const ModelParams seg_p = random_params(seg, g);
    const ModelParams adv_p = random_params(adv, g);
    const Tensor image = g.values({1, 3, size, size}, 0.0, 1.0);
    const std::vector<LabelMap> labels{g.labels(size / seg.stride, size / seg.stride, classes, 0.2)};
    const VoidMask mask = VoidMask::from_labels(labels);
    const Tensor target = one_hot(labels, classes);

    auto loss = [&](const Tensor& img, const ModelParams& sp, const ModelParams& ap) {
        const Tensor out = forward(seg, sp, img);
        // The adversary sees the image as data; only the segmenter path is differentiated.
        const AdvPair pair = build_adv_pair(image, labels, out, enc);
        const Tensor side = adv.two_branch() ? pair.image : Tensor{};
        const Tensor on_gt = forward(adv, ap, pair.ground_truth.channels, side);
        const Tensor on_pred = forward(adv, ap, pair.predicted.channels, side);
        return hybrid_loss(out, target, mask, on_gt, on_pred, ObjectiveConfig{1.0, true});
    };

    double err = check([&](const Tensor& x) { return loss(x, seg_p, adv_p); }, image);
    for (const auto& [name, value] : seg_p) {
        err = std::max(err, check(
                                [&, key = name](const Tensor& x) {
                                    ModelParams sp = seg_p;
                                    sp.get(key) = x;
                                    return loss(image, sp, adv_p);
                                },
                                value));
    }
    for (const auto& [name, value] : adv_p) {
        err = std::max(err, check(
                                [&, key = name](const Tensor& x) {
                                    ModelParams ap = adv_p;
                                    ap.get(key) = x;
                                    return loss(image, seg_p, ap);
                                },
                                value));
    }
    return err;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
    Gen g(seed);
    std::vector<GradCheckCase> out;
    op_cases(g, out);
    loss_cases(g, out);
    encoding_cases(g, out);

    AdversaryOptions large;
    large.fov = FieldOfView::Large;
    out.push_back({"end_to_end", "segmenter + LargeFOV adversary, Basic",
                   end_to_end(g, EncodingKind{Encoding::Basic, 0.9, false}, large)});
    AdversaryOptions small;
    small.fov = FieldOfView::Small;
    small.capacity = Capacity::Light;
    small.two_branch = true;
    out.push_back({"end_to_end", "segmenter + two-branch SmallFOV light adversary, Product",
                   end_to_end(g, EncodingKind{Encoding::Product, 0.9, true}, small)});
    AdversaryOptions soft2;
    soft2.head = AdversaryHead::Softmax2;
    out.push_back({"end_to_end", "segmenter + Softmax2-head adversary, Scaling",
                   end_to_end(g, EncodingKind{Encoding::Scaling, 0.9, false}, soft2)});
    return out;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
    return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.passed(); });
}

void write_gradcheck_table(std::ostream& out, const std::vector<GradCheckCase>& cases) {
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %-58s %12s  %s\n", "group", "case", "max_rel_err", "status");
    out << line;
    for (const auto& c : cases) {
        std::snprintf(line, sizeof line, "%-12s %-58s %12.3e  %s\n", c.group.c_str(), c.name.c_str(),
                      c.max_rel_error, c.passed() ? "ok" : "FAIL");
        out << line;
    }
}

}  // namespace advseg
