#pragma once

#include <string>
#include <vector>

namespace tinc::cli {

enum ExitCode : int { ok = 0, usage = 1, validation = 2, numerical = 3 };

/// Entry point of the `tinc` command; returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace tinc::cli
