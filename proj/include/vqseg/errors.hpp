#pragma once

#include <stdexcept>
#include <string>

namespace vqseg {

// Invalid shapes, options or configuration files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Broken or inconsistent dataset contents.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Internal invariant violations. These indicate bugs, not bad input.
[[noreturn]] inline void internal_fail(const std::string& msg) {
  throw std::logic_error("internal invariant violation: " + msg);
}

inline void internal_check(bool ok, const std::string& msg) {
  if (!ok) internal_fail(msg);
}

}  // namespace vqseg
