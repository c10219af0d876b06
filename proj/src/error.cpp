#include "fvla/error.hpp"

namespace fvla {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::AllocationMismatch: return "AllocationMismatch";
    case ErrorCode::IndivisibleGrid: return "IndivisibleGrid";
    case ErrorCode::WeightShapeMismatch: return "WeightShapeMismatch";
    case ErrorCode::DepthOutOfRange: return "DepthOutOfRange";
    case ErrorCode::DegenerateDimension: return "DegenerateDimension";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::AlphabetTooLarge: return "AlphabetTooLarge";
    case ErrorCode::MalformedTokens: return "MalformedTokens";
    case ErrorCode::IndivisibleImage: return "IndivisibleImage";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::VocabTooSmall: return "VocabTooSmall";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::FrameLengthNot32: return "FrameLengthNot32";
    case ErrorCode::CodeOutOfRange: return "CodeOutOfRange";
    case ErrorCode::DelimiterMismatch: return "DelimiterMismatch";
    case ErrorCode::BadGroupLength: return "BadGroupLength";
    case ErrorCode::IdOutOfBand: return "IdOutOfBand";
    case ErrorCode::TruncatedStream: return "TruncatedStream";
    case ErrorCode::ExtraTokens: return "ExtraTokens";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::MissingFrameFile: return "MissingFrameFile";
    case ErrorCode::UnknownView: return "UnknownView";
    case ErrorCode::GenerationFailed: return "GenerationFailed";
    case ErrorCode::BlobNotFound: return "BlobNotFound";
    case ErrorCode::SessionClosed: return "SessionClosed";
    case ErrorCode::DecisionTimeout: return "DecisionTimeout";
    case ErrorCode::BindError: return "BindError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

namespace {
std::string decorate(ErrorCode code, const std::string& message,
                     std::optional<std::size_t> position) {
  std::string out(to_string(code));
  if (position) out += " at " + std::to_string(*position);
  out += ": ";
  out += message;
  return out;
}
}  // namespace

Error::Error(ErrorCode code, const std::string& message,
             std::optional<std::size_t> position)
    : std::runtime_error(decorate(code, message, position)),
      code_(code),
      position_(position) {}

}  // namespace fvla
