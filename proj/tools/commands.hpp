#pragma once

#include <iosfwd>

namespace kic::cli {

// The whole `kic` command line. Exit codes: 0 success, 1 runtime failure,
// 2 usage error. Output goes to the given streams so tests can run
// commands in-process.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kic::cli
