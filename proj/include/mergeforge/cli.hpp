#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mergeforge::cli {

// 0 success; 1 validation or data violation; 2 usage error; 3 I/O or network.
enum class ExitStatus : int { Ok = 0, Violation = 1, Usage = 2, Io = 3 };

// Runs one invocation: args excludes the program name. Machine-readable
// output goes to `out`, progress and diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mergeforge::cli
