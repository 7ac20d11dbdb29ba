#pragma once

#include <stdexcept>
#include <string>

namespace hvtsurv {

enum class ErrorKind {
  Format,        // bad magic / version in a binary container
  Corruption,    // truncated or inconsistent payload
  EmptyBag,
  Io,
  Validation,    // bad user data (negative time, duplicate rows, ...)
  Resolution,    // referenced file missing
  Precondition,  // caller broke an invariant
  Shape,
  Config,
  InsufficientData,
  UndefinedStatistic,
  Numeric,       // non-finite loss / evaluation
  Lookup,
  Version,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace hvtsurv
