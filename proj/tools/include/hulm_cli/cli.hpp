#pragma once

#include <iosfwd>

namespace hulm::cli {

// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitRuntime = 3;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hulm::cli
