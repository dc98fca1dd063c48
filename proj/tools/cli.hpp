#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vstar::cli {

// Exit codes.
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

// Runs one command line (args[0] is the program name). Results go to files
// under the output directory; progress and summaries to `out`, error lines
// ("error kind=<config|runtime> msg=<text>") to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vstar::cli
