#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace manpp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `manpp` tool; args excludes the program name. Returns
/// 0 on success, 1 on a configuration or usage error and 2 when a run aborts.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace manpp
