#pragma once

#include <stdexcept>
#include <string>

namespace qsmfine {

// Bad input: shape mismatch, out-of-range parameter, malformed file or config.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while doing otherwise valid work: I/O, non-finite optimisation state.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace qsmfine
