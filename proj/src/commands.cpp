#include "advseg/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "advseg/gradcheck_suite.hpp"
#include "advseg/image_io.hpp"
#include "advseg/metrics.hpp"

namespace advseg {

namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<std::string_view, std::string_view>>& defaults() {
    static const std::vector<std::pair<std::string_view, std::string_view>> d = {
        // data
        {"data_dir", "data"},
        {"height", "64"},
        {"width", "64"},
        {"classes", "4"},
        {"min_shapes", "2"},
        {"max_shapes", "5"},
        {"noise_sigma", "0.05"},
        {"texture_amplitude", "0.08"},
        {"void_border_px", "1"},
        {"void_ribbons", "true"},
        {"full_annotation_fraction", "0.75"},
        {"data_seed", "1"},
        {"n_train", "64"},
        {"n_val", "16"},
        {"n_test", "16"},
        // training
        {"slr", "0.0002"},
        {"alr", "0.01"},
        {"lambda", "1"},
        {"scheme", "slow"},
        {"block_len", "500"},
        {"batch_size", "4"},
        {"max_iters", "1000"},
        {"seed", "1"},
        {"encoding", "basic"},
        {"tau", "0.9"},
        {"include_image", "false"},
        {"modified_update", "true"},
        {"eval_every", "100"},
        {"train_adversary", "true"},
        {"pretrain_adversary_iters", "0"},
        {"lcn_window", "0"},
        {"seg_channels", "16"},
        {"seg_context_layers", "4"},
        {"adv_fov", "large"},
        {"adv_capacity", "full"},
        {"adv_two_branch", "false"},
        {"adv_head", "sigmoid"},
        {"adv_base_width", "16"},
        // evaluation and export
        {"run_dir", "run"},
        {"checkpoint", "best"},
        {"splits", "val"},
        {"oracle_recheck", "false"},
        {"bf_tolerance_px", "5"},
        {"export_split", "val"},
        {"export_images", "4"},
        // grid search
        {"grid_slr", "0.0001,0.0003"},
        {"grid_alr", "0.01,0.1"},
        {"grid_lambda", "0.1,1"},
    };
    return d;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

template <class E>
E pick(const Config& c, std::string_view key, std::initializer_list<std::pair<std::string_view, E>> options) {
    const std::string v = lower(c.get_string(key, ""));
    for (const auto& [name, value] : options)
        if (v == name) return value;
    throw std::invalid_argument("config: unknown " + std::string(key) + " '" + v + "'");
}

void check_known(const Config& c) {
    const auto unknown = c.unknown_keys(known_config_keys());
    if (!unknown.empty()) throw std::invalid_argument("config: unknown key '" + unknown.front() + "'");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item.erase(0, item.find_first_not_of(' '));
        item.erase(item.find_last_not_of(' ') + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

const std::vector<Sample>& split_of(const DatasetSplits& d, const std::string& name) {
    if (name == "train") return d.train;
    if (name == "val") return d.val;
    if (name == "test") return d.test;
    throw std::invalid_argument("unknown split '" + name + "'");
}

DatasetSplits load_data(const Config& eff) {
    const fs::path dir = eff.get_string("data_dir", "data");
    if (!fs::exists(dir / "manifest.txt")) throw std::runtime_error("no dataset at " + dir.string());
    return load_dataset(dir);
}

BFConfig bf_config_for(const DatasetSplits& d, double tolerance_px) {
    std::vector<Sample> all;
    for (const auto* s : {&d.train, &d.val, &d.test}) all.insert(all.end(), s->begin(), s->end());
    return BFConfig::for_images(all, tolerance_px);
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("error writing " + path.string());
}

template <class F>
void write_with(const fs::path& path, F f) {
    std::ostringstream s;
    f(s);
    write_file(path, s.str());
}

/// The configuration a run directory was trained with, overridden by `user`.
Config run_config(const Config& user) {
    Config c;
    const fs::path dir = user.get_string("run_dir", "run");
    if (fs::exists(dir / "config.txt")) c = Config::load(dir / "config.txt");
    c.merge(user);
    return effective_config(c);
}

struct LoadedModel {
    NetSpec spec;
    ModelParams params;
};

LoadedModel load_segmenter(const Config& eff) {
    const fs::path dir = eff.get_string("run_dir", "run");
    const std::string which = eff.get_string("checkpoint", "best");
    if (which != "best" && which != "final") throw std::invalid_argument("checkpoint must be best or final");
    if (!fs::exists(dir / "segmenter.netspec")) throw std::runtime_error("no segmenter.netspec in " + dir.string());
    return {load_netspec(dir / "segmenter.netspec"), load_checkpoint(dir / ("segmenter_" + which + ".advc"))};
}

std::string report_csv(const EvalReport& r) {
    std::ostringstream s;
    write_report_csv(s, r);
    return s.str();
}

void print_aggregate(std::ostream& out, const std::string& split, const EvalReport& r) {
    char buf[200];
    const double nan = std::nan("");
    std::snprintf(buf, sizeof buf, "%-6s per_class_acc %.4f  pixel_acc %.4f  mIoU %.4f  mBF %.4f  sigma %.4f\n",
                  split.c_str(), r.mean_class_acc, r.pixel_acc, r.mean_iou, r.mean_bf.value_or(nan),
                  r.bf_std.value_or(nan));
    out << buf;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

const std::vector<std::string_view>& known_config_keys() {
    static const std::vector<std::string_view> keys = [] {
        std::vector<std::string_view> k;
        for (const auto& [key, v] : defaults()) k.push_back(key);
        return k;
    }();
    return keys;
}

Config effective_config(const Config& c) {
    check_known(c);
    Config eff;
    for (const auto& [k, v] : defaults()) eff.set(std::string(k), std::string(v));
    eff.merge(c);
    return eff;
}

SceneSpec scene_spec_from(const Config& c) {
    SceneSpec s;
    s.height = c.get_size("height", s.height);
    s.width = c.get_size("width", s.width);
    s.classes = c.get_size("classes", s.classes);
    s.min_shapes = c.get_size("min_shapes", s.min_shapes);
    s.max_shapes = c.get_size("max_shapes", s.max_shapes);
    s.noise_sigma = c.get_double("noise_sigma", s.noise_sigma);
    s.texture_amplitude = c.get_double("texture_amplitude", s.texture_amplitude);
    s.void_border_px = c.get_size("void_border_px", s.void_border_px);
    s.void_ribbons = c.get_bool("void_ribbons", s.void_ribbons);
    s.full_annotation_fraction = c.get_double("full_annotation_fraction", s.full_annotation_fraction);
    s.seed = c.get_size("data_seed", s.seed);
    return s;
}

TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.slr = c.get_double("slr", t.slr);
    t.alr = c.get_double("alr", t.alr);
    t.lambda = c.get_double("lambda", t.lambda);
    t.block_len = c.get_size("block_len", t.block_len);
    if (c.contains("scheme")) {
        const std::string scheme = lower(c.get_string("scheme", "slow"));
        if (scheme == "fast") {
            t.block_len = 1;
        } else if (scheme != "slow") {
            throw std::invalid_argument("config: scheme must be fast or slow");
        }
    }
    t.batch_size = c.get_size("batch_size", t.batch_size);
    t.max_iters = c.get_size("max_iters", t.max_iters);
    t.seed = c.get_size("seed", t.seed);
    if (c.contains("encoding")) t.encoding.kind = parse_encoding(lower(c.get_string("encoding", "basic")));
    t.encoding.tau = c.get_double("tau", t.encoding.tau);
    t.encoding.include_image = c.get_bool("include_image", t.encoding.include_image);
    t.modified_update = c.get_bool("modified_update", t.modified_update);
    t.eval_every = c.get_size("eval_every", t.eval_every);
    t.train_adversary = c.get_bool("train_adversary", t.train_adversary);
    t.pretrain_adversary_iters = c.get_size("pretrain_adversary_iters", t.pretrain_adversary_iters);
    t.lcn_window = c.get_size("lcn_window", t.lcn_window);
    t.seg_channels = c.get_size("seg_channels", t.seg_channels);
    t.seg_context_layers = c.get_size("seg_context_layers", t.seg_context_layers);
    if (c.contains("adv_fov"))
        t.adv_fov = pick<FieldOfView>(c, "adv_fov", {{"large", FieldOfView::Large}, {"small", FieldOfView::Small}});
    if (c.contains("adv_capacity"))
        t.adv_capacity = pick<Capacity>(c, "adv_capacity", {{"full", Capacity::Full}, {"light", Capacity::Light}});
    t.adv_two_branch = c.get_bool("adv_two_branch", t.adv_two_branch);
    if (c.contains("adv_head"))
        t.adv_head = pick<AdversaryHead>(c, "adv_head",
                                         {{"sigmoid", AdversaryHead::Sigmoid}, {"softmax2", AdversaryHead::Softmax2}});
    t.adv_base_width = c.get_size("adv_base_width", t.adv_base_width);
    t.validate();
    return t;
}

int cmd_gen_data(const CommandContext& ctx) {
    const Config eff = effective_config(ctx.config);
    const SceneSpec spec = scene_spec_from(eff);
    const DatasetSplits d =
        make_dataset(spec, eff.get_size("n_train", 64), eff.get_size("n_val", 16), eff.get_size("n_test", 16));
    fs::create_directories(ctx.output_dir);
    save_dataset(ctx.output_dir, d);
    eff.save(ctx.output_dir / "config.txt");

    const DatasetSplits back = load_dataset(ctx.output_dir);
    if (back.train.size() != d.train.size() || back.val.size() != d.val.size() || back.test.size() != d.test.size()) {
        throw std::runtime_error("gen-data: manifest does not match the generated counts");
    }
    *ctx.out << "wrote " << d.train.size() << " train, " << d.val.size() << " val, " << d.test.size()
             << " test scenes to " << ctx.output_dir.string() << '\n';
    return kExitOk;
}

int cmd_train(const CommandContext& ctx) {
    const Config eff = effective_config(ctx.config);
    const TrainConfig cfg = train_config_from(eff);
    const DatasetSplits data = load_data(eff);
    fs::create_directories(ctx.output_dir);
    eff.save(ctx.output_dir / "config.txt");

    const RunRecord rec = train_run(cfg, data);
    write_with(ctx.output_dir / "run_log.csv", [&](std::ostream& o) { write_run_log(o, rec); });
    write_with(ctx.output_dir / "loss_log.csv", [&](std::ostream& o) { write_loss_log(o, rec); });
    save_netspec(ctx.output_dir / "segmenter.netspec", rec.nets.seg_spec);
    save_netspec(ctx.output_dir / "adversary.netspec", rec.nets.adv_spec);
    save_checkpoint(ctx.output_dir / "segmenter_best.advc", rec.best_seg.size() ? rec.best_seg : rec.final_seg);
    save_checkpoint(ctx.output_dir / "segmenter_final.advc", rec.final_seg);
    save_checkpoint(ctx.output_dir / "adversary_final.advc", rec.final_adv);
    write_with(ctx.output_dir / "summary.txt", [&](std::ostream& o) {
        o << "iterations = " << rec.iterations_run << '\n'
          << "diverged = " << (rec.diverged ? "true" : "false") << '\n'
          << "best_iter = " << rec.best_iter << '\n'
          << "best_val_miou = " << format_double(rec.best_val_miou) << '\n'
          << "best_val_mbf = " << (rec.best_val_mbf ? format_double(*rec.best_val_mbf) : "") << '\n';
        if (rec.diverged) o << "diagnostic = " << rec.diagnostic << '\n';
    });

    if (rec.diverged) {
        *ctx.err << "training diverged: " << rec.diagnostic << '\n';
        return kExitDiverged;
    }
    for (const auto& row : rec.rows)
        if (row.iter == rec.iterations_run) print_aggregate(*ctx.out, row.split, row.report);
    *ctx.out << "best val mIoU " << rec.best_val_miou << " at iteration " << rec.best_iter << '\n';
    return kExitOk;
}

int cmd_eval(const CommandContext& ctx) {
    const Config eff = run_config(ctx.config);
    const DatasetSplits data = load_data(eff);
    const LoadedModel model = load_segmenter(eff);
    const EvalOptions opts{bf_config_for(data, eff.get_double("bf_tolerance_px", 5.0)), eff.get_size("lcn_window", 0)};
    const bool recheck = eff.get_bool("oracle_recheck", false);
    fs::create_directories(ctx.output_dir);
    eff.save(ctx.output_dir / "config.txt");

    int status = kExitOk;
    for (const std::string& split : split_list(eff.get_string("splits", "val"))) {
        const auto& samples = split_of(data, split);
        if (samples.empty()) throw std::invalid_argument("split '" + split + "' is empty");
        const auto preds = predict_labels(model.spec, model.params, samples, opts.lcn_window);
        std::vector<LabelMap> gts;
        for (const auto& s : samples) gts.push_back(s.labels);
        const EvalReport report = evaluate_predictions(preds, gts, model.spec.output_channels(), opts.bf);
        const std::string csv = report_csv(report);
        write_file(ctx.output_dir / ("eval_" + split + ".csv"), csv);
        write_with(ctx.output_dir / ("eval_" + split + ".txt"), [&](std::ostream& o) { write_report_summary(o, report); });
        print_aggregate(*ctx.out, split, report);

        if (recheck) {
            // Round-trip the predictions through files and recompute from them alone.
            const fs::path dir = ctx.output_dir / ("predictions_" + split);
            fs::create_directories(dir);
            for (std::size_t i = 0; i < samples.size(); ++i)
                write_pnm(dir / (samples[i].id + ".pgm"), Raster{preds[i].height, preds[i].width, 1, preds[i].values});
            std::vector<LabelMap> reloaded;
            for (const auto& s : samples) {
                const Raster r = read_pnm(dir / (s.id + ".pgm"));
                reloaded.emplace_back(r.height, r.width, r.data);
            }
            const EvalReport again = evaluate_predictions(reloaded, gts, model.spec.output_channels(), opts.bf);
            const bool same = report_csv(again) == csv;
            *ctx.out << "oracle recheck " << split << ": " << (same ? "match" : "MISMATCH") << '\n';
            if (!same) status = kExitValidation;
        }
    }
    return status;
}

int cmd_gradcheck(const CommandContext& ctx) {
    if (ctx.inject_fault) {
        std::optional<OpKind> kind;
        for (OpKind k : differentiable_ops())
            if (op_name(k) == *ctx.inject_fault) kind = k;
        if (!kind) throw std::invalid_argument("unknown op '" + *ctx.inject_fault + "' for fault injection");
        debug::set_corrupted_op(kind);
    }
    std::vector<GradCheckCase> cases;
    try {
        cases = run_gradcheck_suite();
    } catch (...) {
        debug::set_corrupted_op(std::nullopt);
        throw;
    }
    debug::set_corrupted_op(std::nullopt);
    std::ostringstream table;
    write_gradcheck_table(table, cases);
    *ctx.out << table.str();
    if (!ctx.output_dir.empty()) {
        fs::create_directories(ctx.output_dir);
        write_file(ctx.output_dir / "gradcheck.txt", table.str());
    }
    const bool ok = all_passed(cases);
    *ctx.out << (ok ? "all gradient checks passed" : "gradient check FAILED") << '\n';
    return ok ? kExitOk : kExitValidation;
}

int cmd_export_maps(const CommandContext& ctx) {
    const Config eff = run_config(ctx.config);
    const DatasetSplits data = load_data(eff);
    const LoadedModel model = load_segmenter(eff);
    const auto& all = split_of(data, eff.get_string("export_split", "val"));
    const std::size_t count = std::min(eff.get_size("export_images", 4), all.size());
    const std::size_t lcn = eff.get_size("lcn_window", 0);
    fs::create_directories(ctx.output_dir);
    const ModelParams params = model.params.frozen();

    for (std::size_t i = 0; i < count; ++i) {
        const Sample& s = all[i];
        const Sample* one[1] = {&s};
        const Tensor prob = forward(model.spec, params, prepare_images(one, lcn));
        const std::size_t c = prob.dim(1), h = prob.dim(2), w = prob.dim(3);
        const std::size_t H = s.labels.height, W = s.labels.width, f = H / h;
        auto p = prob.data();
        for (std::size_t k = 0; k < c; ++k) {
            Raster r{H, W, 1, std::vector<std::uint8_t>(H * W)};
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) r.data[y * W + x] = to_byte(p[(k * h + y / f) * w + x / f]);
            write_pnm(ctx.output_dir / (s.id + "_prob" + std::to_string(k) + ".pgm"), r);
        }
        const LabelMap labels = upsample_labels(argmax_labels(prob).front(), f);
        write_pnm(ctx.output_dir / (s.id + "_labels.pgm"), Raster{H, W, 1, labels.values});
        Raster overlay{H, W, 3, std::vector<std::uint8_t>(3 * H * W)};
        auto img = s.image.data();
        for (std::size_t i2 = 0; i2 < H * W; ++i2) {
            const auto color = class_color(labels.values[i2]);
            for (std::size_t k = 0; k < 3; ++k)
                overlay.data[3 * i2 + k] = to_byte(0.5 * img[k * H * W + i2] + 0.5 * color[k]);
        }
        write_pnm(ctx.output_dir / (s.id + "_overlay.ppm"), overlay);
    }
    *ctx.out << "exported maps for " << count << " images to " << ctx.output_dir.string() << '\n';
    return kExitOk;
}

int cmd_grid(const CommandContext& ctx) {
    const Config eff = effective_config(ctx.config);
    const TrainConfig base = train_config_from(eff);
    const GridSpace space{eff.get_doubles("grid_slr", {}), eff.get_doubles("grid_alr", {}),
                          eff.get_doubles("grid_lambda", {})};
    const DatasetSplits data = load_data(eff);
    fs::create_directories(ctx.output_dir);
    eff.save(ctx.output_dir / "config.txt");

    const GridResult g = grid_search(base, space, data, ctx.jobs);
    std::vector<std::size_t> order(g.runs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return grid_better(g.runs[a], g.runs[b]); });
    write_with(ctx.output_dir / "grid.csv", [&](std::ostream& o) {
        o << "rank,slr,alr,lambda,diverged,best_iter,val_miou,val_mbf\n";
        for (std::size_t r = 0; r < order.size(); ++r) {
            const RunRecord& run = g.runs[order[r]];
            o << r + 1 << ',' << format_double(run.config.slr) << ',' << format_double(run.config.alr) << ','
              << format_double(run.config.lambda) << ',' << (run.diverged ? "true" : "false") << ',' << run.best_iter
              << ',' << format_double(run.best_val_miou) << ','
              << (run.best_val_mbf ? format_double(*run.best_val_mbf) : "") << '\n';
        }
    });
    for (std::size_t i = 0; i < g.runs.size(); ++i) {
        const fs::path dir = ctx.output_dir / ("run_" + std::to_string(i));
        fs::create_directories(dir);
        write_with(dir / "run_log.csv", [&](std::ostream& o) { write_run_log(o, g.runs[i]); });
    }
    const RunRecord& best = g.runs[g.best];
    *ctx.out << "best: slr " << best.config.slr << " alr " << best.config.alr << " lambda " << best.config.lambda
             << " val mIoU " << best.best_val_miou << '\n';
    return kExitOk;
}

int run_command(std::string_view name, const CommandContext& ctx) {
    std::ostream& err = ctx.err ? *ctx.err : std::cerr;
    try {
        if (name == "gen-data") return cmd_gen_data(ctx);
        if (name == "train") return cmd_train(ctx);
        if (name == "eval") return cmd_eval(ctx);
        if (name == "gradcheck") return cmd_gradcheck(ctx);
        if (name == "export-maps") return cmd_export_maps(ctx);
        if (name == "grid") return cmd_grid(ctx);
        err << "unknown subcommand '" << name << "'\n";
        return kExitValidation;
    } catch (const std::logic_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    }
}

}  // namespace advseg
