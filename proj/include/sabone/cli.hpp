#pragma once

#include <string>
#include <vector>

namespace sabone::cli {

/// Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);  ///< args[0] is the program name

}  // namespace sabone::cli
