#pragma once

namespace vqt::cli {

/// Runs the command-line harness. Exit codes: 0 success, 1 usage error,
/// 2 verification failure, 3 I/O error.
int run(int argc, const char* const* argv);

} // namespace vqt::cli
