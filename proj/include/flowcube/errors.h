#pragma once

#include <stdexcept>
#include <string>

namespace flowcube {

// Bad or inconsistent input data. Maps to CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OutOfRegionError : public DataError {
 public:
  using DataError::DataError;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed an argument outside the documented domain.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace flowcube
