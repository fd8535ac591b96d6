// Copyright 2026 The msda-cpu Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
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

namespace msda {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Zero, overflowing or otherwise unrepresentable extents.
class SizeError : public Error {
 public:
  using Error::Error;
};

// Mutually inconsistent tensor shapes. The message names the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument values (non-finite coordinates, zero step, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// The kernel planner could not fit any chunk into the tile budget.
class PlanError : public Error {
 public:
  using Error::Error;
};

// Bad command-line flags or config keys.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed XMSD stream. offset() is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace msda
