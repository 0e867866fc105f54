#pragma once

#include <stdexcept>
#include <string>

namespace ipg {

enum class ErrorKind {
  invalid_argument,  // bad shapes, bad config values, contract violations
  io,                // missing/corrupt files
  numeric,           // non-finite values
  runtime,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace ipg
