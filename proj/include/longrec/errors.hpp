#pragma once

#include <stdexcept>
#include <string>

namespace longrec {

// Error taxonomy mirrored by CLI exit codes: config=2, data=3, numeric=4.
enum class ErrorKind { Config, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error config_error(std::string msg) { return Error(ErrorKind::Config, std::move(msg)); }
inline Error data_error(std::string msg) { return Error(ErrorKind::Data, std::move(msg)); }
inline Error numeric_error(std::string msg) { return Error(ErrorKind::Numeric, std::move(msg)); }

}  // namespace longrec
