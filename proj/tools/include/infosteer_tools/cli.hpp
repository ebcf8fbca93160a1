#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace infosteer::cli {

/// Runs the command line with args (without the program name). Exit codes:
/// 0 success, 1 runtime error (one JSON line on `err`), 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace infosteer::cli
