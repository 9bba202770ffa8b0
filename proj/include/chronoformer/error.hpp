// Error taxonomy shared by the library and the CLI exit-code mapping.
#pragma once

#include <stdexcept>
#include <string>

namespace chronoformer {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad flags, unknown config keys, malformed command lines.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or out-of-range configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Shape mismatches between tensors; the message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: mixed computation records, non-scalar loss, non-deterministic
// functions handed to the gradient checker.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Attention masks that leave a query with no keys to attend.
class MaskError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed text input; the message carries the 1-based line number.
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

// NaN or other numeric trouble detected at runtime.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss; the message names the step.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace chronoformer
