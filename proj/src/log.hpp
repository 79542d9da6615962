#pragma once

#include <iostream>
#include <string>

namespace cstbir::detail {

inline void log_warning(const std::string& message) { std::cerr << "[cstbir] warning: " << message << '\n'; }

}  // namespace cstbir::detail
