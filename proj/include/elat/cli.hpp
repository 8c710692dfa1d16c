#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

#include "elat/config.hpp"

namespace elat::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2 };

struct Overrides {
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> out;
    std::optional<std::uint64_t> seed;
};

// Each command writes its outputs plus config.resolved.ini and run.json into
// the output directory. Errors propagate as exceptions; run() maps them to
// exit codes.
void cmd_train(config::RunConfig cfg, const Overrides& ov, std::ostream& log);
void cmd_attack(config::RunConfig cfg, const Overrides& ov, std::ostream& log);
void cmd_analyze(const std::filesystem::path& run_dir, const Overrides& ov, std::ostream& log);
void cmd_generate(config::RunConfig cfg, const Overrides& ov, std::ostream& log);

/// Full command line: `elat <train|attack|analyze|generate> [options]`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace elat::cli
