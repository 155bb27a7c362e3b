#pragma once

// Built-in consistency checks run by the `selftest` command.

#include <cstdint>
#include <string>
#include <vector>

namespace mrgmm {

struct SelfCheck {
    std::string name;
    double value = 0.0;      // measured discrepancy
    double tolerance = 0.0;  // pass when value <= tolerance
    bool passed = false;
};

std::vector<SelfCheck> run_selftest(std::uint64_t seed);

}  // namespace mrgmm
