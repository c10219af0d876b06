#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fvla {

enum class ErrorCode {
  // temporal compressor
  AllocationMismatch,
  IndivisibleGrid,
  WeightShapeMismatch,
  DepthOutOfRange,
  // action codec
  DegenerateDimension,
  Overflow,
  LengthMismatch,
  AlphabetTooLarge,
  MalformedTokens,
  // visual codec
  IndivisibleImage,
  IndexOutOfRange,
  InsufficientData,
  SingularSystem,
  // unified stream
  VocabTooSmall,
  OutOfRange,
  FrameLengthNot32,
  CodeOutOfRange,
  DelimiterMismatch,
  BadGroupLength,
  IdOutOfBand,
  TruncatedStream,
  ExtraTokens,
  // dataset
  SchemaError,
  MissingFrameFile,
  // env / generator / gate
  UnknownView,
  GenerationFailed,
  BlobNotFound,
  SessionClosed,
  DecisionTimeout,
  BindError,
  // generic
  InvalidArgument,
  IoError,
  FormatError,
};

std::string_view to_string(ErrorCode code);

/// Error raised by every fvla module. `position()` is set when the failure can
/// be pinned to an element (token index, line number, byte offset).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> position = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> position() const noexcept { return position_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> position_;
};

}  // namespace fvla
