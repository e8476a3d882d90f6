#pragma once

#include <stdexcept>
#include <string>

namespace eventdistill {

enum class ErrorKind {
  parameter,
  dimension,
  format,
  io,
  numeric,
  degenerate_anchor,
};

const char* to_string(ErrorKind kind);

// All library failures are reported through this one exception type; the
// kind selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

// CLI exit codes: 0 success, 1 validation failure, 2 I/O, 3 numeric abort.
int exit_code_for(ErrorKind kind);

}  // namespace eventdistill
