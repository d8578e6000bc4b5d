#pragma once

#include <stdexcept>
#include <string>

namespace alocc {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition or invariant: bad shapes, out-of-range indices,
// inconsistent grid/camera parameters. Maps to CLI exit code 2 when it
// originates from user-supplied data, otherwise indicates a caller bug.
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Malformed or unreadable input artifacts (scene files, dumps, configs).
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required (NaN/Inf in tensors,
// diverged optimization). Maps to CLI exit code 3.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace detail

}  // namespace alocc
