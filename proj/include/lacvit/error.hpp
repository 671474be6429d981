#pragma once

#include <stdexcept>
#include <string>

namespace lacvit {

// Error categories. The CLI maps each one onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition of a library call (caller bug).
class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Input that makes an operation undefined, e.g. normalizing a zero row.
class DegenerateInputError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

namespace exit_code {
inline constexpr int kSuccess = 0;
inline constexpr int kGeneric = 1;
inline constexpr int kConfig = 2;
inline constexpr int kDataFormat = 3;
inline constexpr int kNumerical = 4;
}  // namespace exit_code

#define LACVIT_REQUIRE(cond, msg)                                   \
  do {                                                              \
    if (!(cond)) throw ::lacvit::ContractError(std::string(msg));   \
  } while (0)

}  // namespace lacvit
