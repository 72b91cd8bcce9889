#pragma once

#include <iosfwd>

namespace edit::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kNumericAbort = 3, kIoError = 4 };

// Entry point of the edit command line; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace edit::cli
