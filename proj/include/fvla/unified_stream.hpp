#pragma once

// Vocabulary remapping and the flat output sequence that carries transition
// text, one action group and V x H_a visual groups.
//
// Id space for base vocabulary size B:
//   [0, B - 6144)          text
//   [B - 6144, B - 2048)   visual codes
//   [B - 2048, B)          action codes
//   B .. B + 3             ACT_BOS, ACT_EOS, IMG_BOS, IMG_EOS

#include <filesystem>
#include <string>
#include <vector>

#include "fvla/action_codec.hpp"
#include "fvla/visual_codec.hpp"

namespace fvla::stream {

inline constexpr int kActionVocab = 2048;
inline constexpr int kVisualVocab = visual::kVocab;
inline constexpr int kMinBaseVocab = kActionVocab + kVisualVocab;

struct VocabLayout {
  int base_vocab = 0;
  int action_offset = 0;
  int visual_offset = 0;
  int act_bos = 0;
  int act_eos = 0;
  int img_bos = 0;
  int img_eos = 0;

  /// One past the largest valid id.
  int end() const { return base_vocab + 4; }
  bool is_text(int id) const { return id >= 0 && id < visual_offset; }
  bool is_visual(int id) const { return id >= visual_offset && id < action_offset; }
  bool is_action(int id) const { return id >= action_offset && id < base_vocab; }
  bool is_special(int id) const { return id >= base_vocab && id < end(); }
  friend bool operator==(const VocabLayout&, const VocabLayout&) = default;
};

/// VocabTooSmall when base_vocab < 6144.
VocabLayout make_layout(int base_vocab);

/// OutOfRange for codes or ids outside the band.
int map_action_id(const VocabLayout& layout, int code);
int unmap_action_id(const VocabLayout& layout, int id);
int map_visual_id(const VocabLayout& layout, int code);
int unmap_visual_id(const VocabLayout& layout, int id);

/// Shape of the visual part: V views, H_a predicted frames each.
struct StreamShape {
  int views = 1;
  int horizon = 1;

  int groups() const { return views * horizon; }
  friend bool operator==(const StreamShape&, const StreamShape&) = default;
};

struct UnifiedOutput {
  std::vector<int> text_ids;
  actions::ActionTokenSeq actions;
  /// View-major: frame h of view v at index v * horizon + h.
  std::vector<visual::VisualTokenSeq> frames;

  friend bool operator==(const UnifiedOutput&, const UnifiedOutput&) = default;
};

struct UnifiedStream {
  std::vector<int> ids;
  friend bool operator==(const UnifiedStream&, const UnifiedStream&) = default;
};

/// text ++ [ACT_BOS] ++ actions ++ [ACT_EOS] ++ per group [IMG_BOS] ++ 32 codes ++ [IMG_EOS].
/// Errors: FrameLengthNot32, CodeOutOfRange (any text, action or visual value
/// outside its band), InvalidArgument when the frame count is not V * H_a.
UnifiedStream serialize_output(const UnifiedOutput& out, const VocabLayout& layout, StreamShape shape);

/// Strict inverse of serialize_output. Every failure carries the offending
/// index: DelimiterMismatch, BadGroupLength, IdOutOfBand, TruncatedStream, ExtraTokens.
UnifiedOutput parse_output(const UnifiedStream& stream, const VocabLayout& layout, StreamShape shape);

/// Number of visual code ids (excluding delimiters) in a well-formed stream.
int count_visual_ids(const UnifiedStream& stream, const VocabLayout& layout);

// ---------------------------------------------------------------- file format

/// `fvus v1 vbase=<n> V=<v> Ha=<h>` followed by one decimal id per line.
struct StreamFile {
  VocabLayout layout;
  StreamShape shape;
  UnifiedStream stream;
};

std::string to_text(const StreamFile& file);
/// FormatError with the 1-based line number as position.
StreamFile from_text(const std::string& text);
void save_stream(const std::filesystem::path& path, const StreamFile& file);
StreamFile load_stream(const std::filesystem::path& path);

}  // namespace fvla::stream
