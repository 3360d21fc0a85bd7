#pragma once

#include <string>
#include <vector>

namespace metalm {

// Dispatch one command-line invocation; `args` excludes the program name.
// Returns the process exit code: 0 success, 1 usage, 2 config/data trouble,
// 3 numeric divergence. Errors print one "error: <kind>: <reason>" line to
// standard error.
int run_command(const std::vector<std::string>& args);

}  // namespace metalm
