#pragma once

// The spdiff command line: generate, inspect, bench, replay.

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace spd {

/// Flat config file: one "key = value" per line, '#' starts a comment, keys
/// are long flag names without the leading dashes ('_' and '-' are
/// interchangeable). Throws FormatError.
std::vector<std::pair<std::string, std::string>> read_flat_config(const std::string& path);

/// Runs one command; `args` excludes the program name. Returns the exit
/// status. Failures print a single "spdiff: ..." line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spd
