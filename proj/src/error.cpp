#include "eventdistill/error.hpp"

namespace eventdistill {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::parameter: return "parameter error";
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::format: return "format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::degenerate_anchor: return "degenerate anchor";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return 2;
    case ErrorKind::numeric: return 3;
    default: return 1;
  }
}

}  // namespace eventdistill
