#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advseg/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Adversarial training for semantic segmentation on toy scenes"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir = "out";
    std::vector<std::string> overrides;
    std::size_t jobs = 1;
    std::string fault;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key = value configuration file");
        sub->add_option("--output-dir,-o", output_dir, "directory for all outputs");
        sub->add_option("--override", overrides, "key=value, may repeat; wins over the file");
    };
    struct Sub {
        const char* name;
        const char* help;
    };
    const Sub subs[] = {
        {"gen-data", "generate the toy scene dataset"},
        {"train", "train a segmenter (and adversary)"},
        {"eval", "evaluate a trained segmenter"},
        {"gradcheck", "run the finite-difference gradient suite"},
        {"export-maps", "write probability, label and overlay images"},
        {"grid", "grid search over slr x alr x lambda"},
    };
    for (const auto& s : subs) common(app.add_subcommand(s.name, s.help));
    app.get_subcommand("grid")->add_option("--jobs,-j", jobs, "parallel runs")->check(CLI::PositiveNumber);
    app.get_subcommand("gradcheck")
        ->add_option("--inject-fault", fault, "corrupt the backward rule of this op (negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : advseg::kExitValidation;
    }

    advseg::CommandContext ctx;
    ctx.output_dir = output_dir;
    ctx.jobs = jobs;
    ctx.out = &std::cout;
    ctx.err = &std::cerr;
    if (!fault.empty()) ctx.inject_fault = fault;
    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (!config_path.empty()) ctx.config = advseg::Config::load(config_path);
        for (const auto& o : overrides) ctx.config.apply_override(o);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return advseg::kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return advseg::kExitIo;
    }
    return advseg::run_command(name, ctx);
}
