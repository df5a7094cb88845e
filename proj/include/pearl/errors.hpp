#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pearl {

enum class ErrorKind {
  format,      // malformed PRL1 bytes
  validation,  // value outside its allowed range
  dimension,   // shape mismatch between operands
  solver,      // numerical breakdown or non-convergence
  planning,    // window geometry cannot cover the image
  load,        // required tensor missing from a container
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace pearl
