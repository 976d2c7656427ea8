// Copyright 2026 The qwdiff Authors
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

#include <stdexcept>
#include <string>

namespace qwdiff {

/// Base of every error raised by the library. `category()` groups errors the
/// way the command-line driver maps them onto exit codes.
class Error : public std::runtime_error {
 public:
  enum class Category { kConfig, kIo, kNumerical };

  Error(Category category, const std::string& what) : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

#define QWDIFF_DEFINE_ERROR(Name, Cat)                                          \
  class Name : public Error {                                                   \
   public:                                                                      \
    explicit Name(const std::string& what) : Error(Category::Cat, what) {}     \
  };

// Invalid arguments and inconsistent shapes.
QWDIFF_DEFINE_ERROR(InvalidGraphError, kConfig)
QWDIFF_DEFINE_ERROR(ParameterError, kConfig)
QWDIFF_DEFINE_ERROR(ShapeError, kConfig)
QWDIFF_DEFINE_ERROR(InsufficientSamplesError, kConfig)

// File contents and staged pipeline inputs.
QWDIFF_DEFINE_ERROR(FormatError, kIo)
QWDIFF_DEFINE_ERROR(LengthError, kIo)
QWDIFF_DEFINE_ERROR(IoError, kIo)
QWDIFF_DEFINE_ERROR(PipelineError, kIo)

// Floating point trouble.
QWDIFF_DEFINE_ERROR(NumericalInstabilityError, kNumerical)
QWDIFF_DEFINE_ERROR(DegeneratePosteriorError, kNumerical)

#undef QWDIFF_DEFINE_ERROR

}  // namespace qwdiff
