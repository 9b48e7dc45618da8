#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ecls {

// Exit codes used by the command line tool.
enum class ExitCode : int { ok = 0, config = 2, numerical = 3, io = 4 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A malformed line in a JSONL input. `line` is 1-based.
struct SchemaError : IoError {
  SchemaError(std::size_t line, const std::string& what)
      : IoError("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

}  // namespace ecls
