// Subcommands of the command-line tool. Each returns a process exit code.

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advseg/config.hpp"
#include "advseg/scenes.hpp"
#include "advseg/training.hpp"

namespace advseg {

enum ExitCode : int {
    kExitOk = 0,
    kExitValidation = 1,  // bad configuration or a failed oracle
    kExitDiverged = 2,
    kExitIo = 3,
};

struct CommandContext {
    Config config;  // file values with overrides applied
    std::filesystem::path output_dir;
    std::size_t jobs = 1;
    std::optional<std::string> inject_fault;  // gradcheck only: op name
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;
};

/// Every key any subcommand reads.
const std::vector<std::string_view>& known_config_keys();

SceneSpec scene_spec_from(const Config& c);
TrainConfig train_config_from(const Config& c);
/// Full effective configuration (defaults filled in) for echoing.
Config effective_config(const Config& c);

int cmd_gen_data(const CommandContext& ctx);
int cmd_train(const CommandContext& ctx);
int cmd_eval(const CommandContext& ctx);
int cmd_gradcheck(const CommandContext& ctx);
int cmd_export_maps(const CommandContext& ctx);
int cmd_grid(const CommandContext& ctx);

/// Dispatches by name and maps exceptions to exit codes.
int run_command(std::string_view name, const CommandContext& ctx);

}  // namespace advseg
