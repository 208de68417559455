#pragma once

#include <string>
#include <vector>

namespace mclfir::cli {

/// Runs one command (gen-data | train | eval | compare) with argv-style
/// arguments, program name excluded. Returns the process exit code; all
/// documented error cases exit nonzero.
int run(std::vector<std::string> args);

}  // namespace mclfir::cli
