#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "patnet/bench.hpp"
#include "patnet/fusion.hpp"

namespace patnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command line (without the program name). Results go to out,
/// diagnostics to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Machine-readable forms printed by `bench --json` and `fuse --json`.
std::string to_json(const BenchReport& r);
std::string to_json(const FusionReport& r);

}  // namespace patnet::cli
