#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace raunet::cli {

// Parsed command state. Every field has a documented default; precedence is
// command-line flag > config file > default.
struct RunConfig {
    std::string command;

    std::uint64_t seed = 0;
    std::string variant = "full";
    int epochs = 100;
    int folds = 10;
    bool augment = false;
    std::string data;
    std::string out;
    int workers = 1;
    std::string checkpoint;

    // synth
    int n = 100;
    int size = 96;

    // model geometry
    int depth = 4;
    int base_channels = 32;
    int cardinality = 8;
    int batch_size = 4;

    std::string precision = "f32";  // from RAUNET_PRECISION, f32|f64
};

// Parse argv (without the program name). Throws UsageError on unknown flags,
// unknown config keys, or malformed values.
RunConfig parse_args(const std::vector<std::string>& args);

// Flat "key = value" config file; keys match the long flag names.
std::map<std::string, std::string> read_config_file(const std::string& path);

std::string synopsis();

// Executes a command; returns the process exit code (0 success, 2 usage,
// 3 data error, 4 numeric abort).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace raunet::cli
