#pragma once

// Command-line front end: synth, train, eval, baseline, zeroshot, diagnose.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config or usage error,
// 3 data or file error, 4 numeric failure.

#include <ostream>

namespace solarfuse::cli {

inline constexpr const char* kDataDirEnv = "SOLARFUSE_DATA_DIR";

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace solarfuse::cli
