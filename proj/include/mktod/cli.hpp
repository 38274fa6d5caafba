#pragma once

#include <iosfwd>
#include <string>
#include <vector>

// Command-line entry point split from main() so tests can drive it directly.
namespace mktod::cli {

// args excludes the program name. Exit codes: 0 success, 1 usage or
// validation error, 2 runtime failure. Configuration precedence:
// flags > MKTOD_* environment > --config file > defaults.
int dispatch(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
             std::ostream& err);

}  // namespace mktod::cli
