#pragma once

#include <stdexcept>
#include <string>

namespace p2w {

/// Maps onto the CLI exit codes: config 2, data 3, numeric 4.
enum class ErrorKind { config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid shapes or arguments handed to an operator or builder.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void config_error(const std::string& msg) {
  throw Error(ErrorKind::config, msg);
}
[[noreturn]] inline void data_error(const std::string& msg) {
  throw Error(ErrorKind::data, msg);
}

}  // namespace p2w
