// Copyright 2026 The fdn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fdn {

/// Root of every error raised by the library. The CLI maps the three
/// families below onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Usage / contract family (exit code 1 at the CLI when raised by argument
// handling, otherwise treated as a programming error).
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ParameterError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class LookupError : public Error {
 public:
  using Error::Error;
};
class IndexError : public Error {
 public:
  using Error::Error;
};

// Data family (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};
class FormatError : public DataError {
 public:
  using DataError::DataError;
};
class MagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncationError : public FormatError {
 public:
  TruncationError(const std::string& what, std::uint64_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};
class NonFiniteError : public FormatError {
 public:
  using FormatError::FormatError;
};
class InsufficientDataError : public DataError {
 public:
  using DataError::DataError;
};

// Numeric family (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fdn
