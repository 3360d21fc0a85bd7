#include "metalm/errors.hpp"

namespace metalm {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::parse: return "parse";
    case ErrorKind::shape: return "shape";
    case ErrorKind::vocab: return "vocab";
    case ErrorKind::episode: return "episode";
    case ErrorKind::checkpoint: return "checkpoint";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
      return 1;
    case ErrorKind::numeric:
      return 3;
    default:
      return 2;
  }
}

[[noreturn]] void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace metalm
