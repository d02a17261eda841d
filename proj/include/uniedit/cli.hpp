#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace uniedit {

/// Runs one command-line invocation (args excludes the program name) and
/// returns the process exit code: 0 on success, 2 for configuration or usage
/// errors, 3 for runtime failures. Messages go to `out` / `err`; no
/// exceptions escape.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uniedit
