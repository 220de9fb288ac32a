// Copyright 2026 The stackattn Authors
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

#include <stdexcept>
#include <string>

namespace stackattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A numeric or configuration parameter is out of its allowed range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (ordering, reuse, etc).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input, e.g. an out-of-vocabulary token.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A resource cap was hit (allocation size, enumeration limit).
class ResourceError : public Error {
 public:
  using Error::Error;
};

}  // namespace stackattn
