// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace hetloco::verify {

struct CheckResult {
    bool passed = false;
    std::string detail;
};

struct Check {
    std::string name;
    int criterion = 0;  // acceptance criterion number, 0 for supplementary checks
    std::function<CheckResult()> run;
};

struct Options {
    std::string golden_dir;
    std::string corpus_path;
    std::ostream* log = nullptr;  // progress for long checks
};

Options default_options();

/// Every check: acceptance criteria 1-13, then golden files and supplementary invariants.
std::vector<Check> all_checks(const Options& opt);

/// Runs the checks whose name contains `filter` (all when empty). Prints one line per check with
/// timing. Returns the number of failures; no matching check counts as one failure.
int run_checks(const std::vector<Check>& checks, const std::string& filter, std::ostream& out);

/// Regenerates the golden files into `dir`.
void write_goldens(const std::string& dir);

}  // namespace hetloco::verify
