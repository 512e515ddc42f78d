#pragma once

namespace sprune {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace sprune
