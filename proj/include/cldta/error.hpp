#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace cldta {

// Every error the library throws derives from Error. code() is a short
// stable tag ("shape_mismatch", "truncated", ...) that the CLI prints in its
// one-line error report.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error("invalid_argument", what) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what) : Error("shape_mismatch", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("non_finite", what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("bad_state", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

// Persistence format problems. code is one of: bad_magic, truncated,
// count_mismatch, config_mismatch, corrupt.
class FormatError : public Error {
 public:
  FormatError(std::string code, const std::string& what) : Error(std::move(code), what) {}
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeMismatch(what);
}

}  // namespace detail
}  // namespace cldta
