#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace emorl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, std::string kind = "error")
      : std::runtime_error(what), kind_(std::move(kind)) {}

  /// Short machine-readable category used in CLI error records.
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what, "shape") {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, "numeric") {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(what, "invalid_argument") {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, "format") {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, "io") {}
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename E = InvalidArgument, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

template <typename E = InvalidArgument, typename... Args>
void require(bool condition, Args&&... args) {
  if (!condition) {
    throw E(detail::concat(std::forward<Args>(args)...));
  }
}

}  // namespace emorl
