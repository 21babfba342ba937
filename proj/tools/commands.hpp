#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace floodlora::cli {

// Exit codes: 0 success, 2 usage or config, 1 I/O or data, 3 numerical abort.
inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

// Parses `args` (without the program name) and runs one subcommand.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace floodlora::cli
