#pragma once

namespace capval {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace capval
