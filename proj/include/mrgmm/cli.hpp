#pragma once

// Command-line driver: configuration, the five commands and their output
// files (results.csv, table.txt, figure.svg, manifest.json).

#include "mrgmm/errors.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mrgmm::cli {

class UsageError : public Error {
public:
    using Error::Error;
};

struct RunConfig {
    std::string command;  // estimate | ci | coverage | power | selftest
    std::string model = "example1";
    std::string data;  // CSV path for estimate / ci
    std::vector<std::size_t> n{200};
    double rho = 0.5;
    double sigma = 1.5;
    std::vector<double> delta{0.0};
    double gamma1 = 0.25;
    std::optional<double> gamma2;
    std::string shape = "lognormal";
    std::size_t r = 1000;
    std::size_t B = 999;
    std::vector<double> levels{0.90, 0.95};
    double alpha = 0.10;
    std::uint64_t seed = 1;
    int threads = 0;
    std::string out = "results";
    std::vector<std::string> ci_kinds{"MR*", "MR", "C", "HH", "BN"};
    std::vector<double> theta_grid;
    int step = 2;
    std::string weight = "identity";  // identity | 2sls
    bool j_bootstrap = false;
    std::size_t oracle_n = 1000000;
    std::string cache;  // pseudo-true verification cache; default <out>/pseudo_true_cache.json
};

// Keys accepted in config files and as --key command-line flags.
const std::vector<std::string>& config_keys();

// Sets one field from its text form. Throws UsageError on unknown keys or
// invalid values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

// Flat "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// Cross-field checks (e.g. estimate needs data). Throws UsageError.
void validate(const RunConfig& config);

// Every field in key order, as written to manifest.json.
std::map<std::string, std::string> describe(const RunConfig& config);

// Runs the command; returns the process exit status. Library errors are
// reported on `err` and mapped to status 1.
int run(const RunConfig& config, std::ostream& out, std::ostream& err);

// Parses argv, applies the config file then command-line overrides, and
// runs. Usage errors return 2.
int main_entry(int argc, char** argv);

// Column order of results.csv.
const std::vector<std::string>& results_columns();

}  // namespace mrgmm::cli
