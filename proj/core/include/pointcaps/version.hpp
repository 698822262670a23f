#pragma once

namespace pointcaps {

inline constexpr const char* kVersion = "0.1.0";

// Compiler-stamped identifier recorded into provenance files so an output can
// be traced to the binary that wrote it.
inline const char* build_id() {
  return __DATE__ " " __TIME__;
}

}  // namespace pointcaps
