#pragma once

#include "conetest/engine.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace conetest::cli {

enum class Subcommand { test, test_summary, weights, coverage };
enum class Format { text, json };

struct ModelFormulas {
    std::string fixed;
    std::string random;  // "1 + age | Subject"
    std::string gamma = "full";
    std::vector<int> blocks;
};

/// Settings for one invocation. Values from a config file are overridden by
/// command-line flags.
struct RunConfig {
    Subcommand subcommand = Subcommand::test;
    std::filesystem::path data;
    std::string group;
    std::string response;
    std::map<std::string, std::string> categorical;  // column -> reference level
    ModelFormulas h1;
    ModelFormulas h0;
    std::filesystem::path m1;
    std::filesystem::path m0;
    TestOptions options;
    Format format = Format::text;
    // coverage only
    int R = 200;
    int n = 100;
    int timepoints = 20;
};

/// Reads an INI file: top-level data/group/response/categorical keys,
/// [h1] and [h0] model sections and an [options] section. Unknown keys are
/// rejected; relative data paths resolve against the file's directory.
RunConfig parse_config(const std::filesystem::path& path);

/// Builds the model spec of one formula block; returns the grouping column
/// named after '|' through `group` when present.
LmmSpec model_spec(const ModelFormulas& m, std::string* group = nullptr);

/// Entry point; returns 0 on success, 2 for input errors, 3 for numerical
/// failures.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace conetest::cli
