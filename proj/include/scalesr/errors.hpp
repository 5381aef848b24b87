#pragma once

#include <stdexcept>
#include <string>

namespace scalesr {

/// Base for every error raised by the library. `kind()` is the short tag the
/// CLI puts in its structured error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct ArityError : Error {
  explicit ArityError(const std::string& w) : Error("arity", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct InsufficientDataError : Error {
  explicit InsufficientDataError(const std::string& w) : Error("insufficient_data", w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& w) : Error("divergence", w) {}
};

}  // namespace scalesr
