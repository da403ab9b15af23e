// Command-line front end. `run_cli` is the whole program; the executable
// only forwards argv to it.
#pragma once

#include <iosfwd>

namespace mscqg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mscqg
