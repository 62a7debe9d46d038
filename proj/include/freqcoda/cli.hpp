#pragma once

#include <string>
#include <vector>

namespace freqcoda::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

inline constexpr const char* kVersion = "0.1.0";

// Full command line, argv[0] included.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace freqcoda::cli
