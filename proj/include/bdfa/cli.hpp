#pragma once

#include <string>
#include <vector>

namespace bdfa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Subcommands: train, quantize, distill, attack, evaluate, experiment, report.
// Returns 0 on success, 1 on a runtime failure, 2 on a usage or configuration
// error. Failures end with one "error: <kind>: <message>" line on stderr.
int cli_dispatch(int argc, char** argv);
// Same, with argv[0] omitted.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace bdfa
