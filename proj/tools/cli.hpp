#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ega::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;  // usage and I/O errors
inline constexpr int kExitDiverged = 2;

/// Runs the `ega` command line. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ega::cli
