#pragma once

#include <stdexcept>

namespace vqg {

// Data, IO and runtime failures. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid flags or configuration. The CLI maps these to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace vqg
