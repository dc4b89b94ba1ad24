// Copyright 2026 The SplitFT Authors
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
#include <string_view>

namespace splitft {

/// Base of every error raised by the library. `code()` is a stable,
/// machine-parsable identifier that the CLI prints on the diagnostic stream.
class Error : public std::runtime_error {
 public:
  Error(std::string_view code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  std::string_view code() const noexcept { return code_; }

 private:
  std::string_view code_;
};

#define SPLITFT_DEFINE_ERROR(Name, Code)                              \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Code, what) {}     \
  }

SPLITFT_DEFINE_ERROR(DimensionError, "E_DIMENSION");
SPLITFT_DEFINE_ERROR(RankMismatchError, "E_RANK_MISMATCH");
SPLITFT_DEFINE_ERROR(NumericError, "E_NUMERIC");
SPLITFT_DEFINE_ERROR(ConfigError, "E_CONFIG");
SPLITFT_DEFINE_ERROR(RangeError, "E_RANGE");
SPLITFT_DEFINE_ERROR(DataError, "E_DATA");
SPLITFT_DEFINE_ERROR(ProtocolError, "E_PROTOCOL");
SPLITFT_DEFINE_ERROR(TransportError, "E_TRANSPORT");
SPLITFT_DEFINE_ERROR(CodecError, "E_CODEC");
SPLITFT_DEFINE_ERROR(IoError, "E_IO");

#undef SPLITFT_DEFINE_ERROR

}  // namespace splitft
