#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace metalm {

// Every failure the library raises carries one of these kinds so callers
// (and the CLI) can map it to an exit class without string matching.
enum class ErrorKind {
  usage,       // bad command line
  config,      // malformed or inconsistent run configuration
  data,        // malformed corpus / dataset / vocab input
  parse,       // unparseable file content (JSON, CoNLL, CSV)
  shape,       // tensor shape or length violation
  vocab,       // token id out of range / unknown label
  episode,     // episode sampling infeasible or invariant broken
  checkpoint,  // missing or corrupt checkpoint artifacts
  protocol,    // collectives misuse: mismatched ops, deadlock, desync
  numeric,     // divergence: non-finite loss, gradient, or update
  io,          // filesystem failure
};

std::string_view to_string(ErrorKind kind);

// Exit class used by the CLI: usage errors 1, config/data errors 2, numeric 3.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace metalm
