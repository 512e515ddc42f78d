#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sprune {

enum class ErrorKind {
  dimension,
  geometry,
  statistics,
  label,
  contract,
  spec,
  config,
  generation,
  divergence,
  precondition,
  format,
  corruption,
  split,
  io,
  migration,
  degenerate_feature,
  training,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) fail(kind, what);
}

}  // namespace sprune
