#pragma once

namespace linevit {

inline constexpr const char* kToolName = "linevit";
inline constexpr const char* kVersion = "0.1.0";

} // namespace linevit
