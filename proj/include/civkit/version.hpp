#pragma once

namespace civkit {

inline constexpr const char* kToolName = "civkit";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace civkit
