#include "fvla/unified_stream.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "fvla/error.hpp"

namespace fvla::stream {

VocabLayout make_layout(int base_vocab) {
  if (base_vocab < kMinBaseVocab)
    throw Error(ErrorCode::VocabTooSmall,
                "base vocabulary " + std::to_string(base_vocab) + " cannot hold 2048 action and 4096 visual ids");
  VocabLayout l;
  l.base_vocab = base_vocab;
  l.action_offset = base_vocab - kActionVocab;
  l.visual_offset = l.action_offset - kVisualVocab;
  l.act_bos = base_vocab;
  l.act_eos = base_vocab + 1;
  l.img_bos = base_vocab + 2;
  l.img_eos = base_vocab + 3;
  return l;
}

int map_action_id(const VocabLayout& layout, int code) {
  if (code < 0 || code >= kActionVocab) throw Error(ErrorCode::OutOfRange, "action code " + std::to_string(code));
  return layout.action_offset + code;
}

int unmap_action_id(const VocabLayout& layout, int id) {
  if (!layout.is_action(id)) throw Error(ErrorCode::OutOfRange, "id " + std::to_string(id) + " is not an action id");
  return id - layout.action_offset;
}

int map_visual_id(const VocabLayout& layout, int code) {
  if (code < 0 || code >= kVisualVocab) throw Error(ErrorCode::OutOfRange, "visual code " + std::to_string(code));
  return layout.visual_offset + code;
}

int unmap_visual_id(const VocabLayout& layout, int id) {
  if (!layout.is_visual(id)) throw Error(ErrorCode::OutOfRange, "id " + std::to_string(id) + " is not a visual id");
  return id - layout.visual_offset;
}

namespace {

void check_shape(StreamShape shape) {
  if (shape.views < 1 || shape.horizon < 1)
    throw Error(ErrorCode::InvalidArgument, "stream shape needs V >= 1 and H_a >= 1");
}

std::string describe(const VocabLayout& l, int id) {
  if (l.is_text(id)) return "text id " + std::to_string(id);
  if (l.is_visual(id)) return "visual id " + std::to_string(id);
  if (l.is_action(id)) return "action id " + std::to_string(id);
  if (id == l.act_bos) return "ACT_BOS";
  if (id == l.act_eos) return "ACT_EOS";
  if (id == l.img_bos) return "IMG_BOS";
  if (id == l.img_eos) return "IMG_EOS";
  return "id " + std::to_string(id) + " outside the vocabulary";
}

/// Cursor over the id list; every error names the index it stopped at.
class Reader {
 public:
  Reader(const std::vector<int>& ids, const VocabLayout& layout) : ids_(ids), l_(layout) {}

  bool done() const { return pos_ >= ids_.size(); }
  std::size_t pos() const { return pos_; }
  int peek(const char* expecting) const {
    if (done()) throw Error(ErrorCode::TruncatedStream, std::string("stream ends while expecting ") + expecting, pos_);
    return ids_[pos_];
  }
  void advance() { ++pos_; }

  void expect(int delimiter, const char* name) {
    const int id = peek(name);
    if (id != delimiter) {
      throw Error(ErrorCode::DelimiterMismatch, std::string("expected ") + name + ", found " + describe(l_, id), pos_);
    }
    ++pos_;
  }

  [[noreturn]] void out_of_band(int id, const char* section) const {
    throw Error(ErrorCode::IdOutOfBand, describe(l_, id) + " inside " + section, pos_);
  }

 private:
  const std::vector<int>& ids_;
  const VocabLayout& l_;
  std::size_t pos_ = 0;
};

}  // namespace

UnifiedStream serialize_output(const UnifiedOutput& out, const VocabLayout& layout, StreamShape shape) {
  check_shape(shape);
  if (out.frames.size() != static_cast<std::size_t>(shape.groups()))
    throw Error(ErrorCode::InvalidArgument, "expected " + std::to_string(shape.groups()) + " frames, got " +
                                                std::to_string(out.frames.size()));
  UnifiedStream s;
  s.ids.reserve(out.text_ids.size() + out.actions.codes.size() + 2 +
                static_cast<std::size_t>(shape.groups()) * (visual::kTokens + 2));
  for (std::size_t i = 0; i < out.text_ids.size(); ++i) {
    if (!layout.is_text(out.text_ids[i]))
      throw Error(ErrorCode::CodeOutOfRange, "text id " + std::to_string(out.text_ids[i]) + " outside the text band", i);
    s.ids.push_back(out.text_ids[i]);
  }
  s.ids.push_back(layout.act_bos);
  for (std::size_t i = 0; i < out.actions.codes.size(); ++i) {
    const int c = out.actions.codes[i];
    if (c < 0 || c >= kActionVocab) throw Error(ErrorCode::CodeOutOfRange, "action code " + std::to_string(c), i);
    s.ids.push_back(layout.action_offset + c);
  }
  s.ids.push_back(layout.act_eos);
  for (std::size_t g = 0; g < out.frames.size(); ++g) {
    const auto& codes = out.frames[g].codes;
    if (codes.size() != static_cast<std::size_t>(visual::kTokens))
      throw Error(ErrorCode::FrameLengthNot32, "frame group has " + std::to_string(codes.size()) + " codes", g);
    s.ids.push_back(layout.img_bos);
    for (int c : codes) {
      if (c < 0 || c >= kVisualVocab) throw Error(ErrorCode::CodeOutOfRange, "visual code " + std::to_string(c), g);
      s.ids.push_back(layout.visual_offset + c);
    }
    s.ids.push_back(layout.img_eos);
  }
  return s;
}

UnifiedOutput parse_output(const UnifiedStream& stream, const VocabLayout& layout, StreamShape shape) {
  check_shape(shape);
  UnifiedOutput out;
  Reader r(stream.ids, layout);

  for (;;) {
    const int id = r.peek("ACT_BOS");
    if (id == layout.act_bos) break;
    if (layout.is_special(id)) r.expect(layout.act_bos, "ACT_BOS");
    if (!layout.is_text(id)) r.out_of_band(id, "the text segment");
    out.text_ids.push_back(id);
    r.advance();
  }
  r.advance();

  for (;;) {
    const int id = r.peek("ACT_EOS");
    if (id == layout.act_eos) break;
    if (layout.is_special(id)) r.expect(layout.act_eos, "ACT_EOS");
    if (!layout.is_action(id)) r.out_of_band(id, "the action group");
    out.actions.codes.push_back(id - layout.action_offset);
    r.advance();
  }
  r.advance();

  out.frames.resize(static_cast<std::size_t>(shape.groups()));
  for (auto& frame : out.frames) {
    r.expect(layout.img_bos, "IMG_BOS");
    frame.codes.reserve(visual::kTokens);
    for (int k = 0; k < visual::kTokens; ++k) {
      const int id = r.peek("a visual id");
      if (layout.is_special(id))
        throw Error(ErrorCode::BadGroupLength, "image group closed after " + std::to_string(k) + " codes", r.pos());
      if (!layout.is_visual(id)) r.out_of_band(id, "an image group");
      frame.codes.push_back(id - layout.visual_offset);
      r.advance();
    }
    const int id = r.peek("IMG_EOS");
    if (layout.is_visual(id)) throw Error(ErrorCode::BadGroupLength, "image group longer than 32 codes", r.pos());
    r.expect(layout.img_eos, "IMG_EOS");
  }
  if (!r.done())
    throw Error(ErrorCode::ExtraTokens,
                std::to_string(stream.ids.size() - r.pos()) + " ids after the last image group", r.pos());
  return out;
}

int count_visual_ids(const UnifiedStream& stream, const VocabLayout& layout) {
  int n = 0;
  for (int id : stream.ids) n += layout.is_visual(id) ? 1 : 0;
  return n;
}

std::string to_text(const StreamFile& file) {
  std::string s = "fvus v1 vbase=" + std::to_string(file.layout.base_vocab) + " V=" +
                  std::to_string(file.shape.views) + " Ha=" + std::to_string(file.shape.horizon) + "\n";
  for (int id : file.stream.ids) {
    s += std::to_string(id);
    s += '\n';
  }
  return s;
}

namespace {

int parse_int(std::string_view text, std::size_t line) {
  int value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty())
    throw Error(ErrorCode::FormatError, "not a decimal integer: '" + std::string(text) + "'", line);
  return value;
}

int header_field(std::string_view token, std::string_view key) {
  if (!token.starts_with(key)) throw Error(ErrorCode::FormatError, "expected " + std::string(key) + "<n> in header", 1);
  return parse_int(token.substr(key.size()), 1);
}

}  // namespace

StreamFile from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::FormatError, "empty stream file", 1);
  std::istringstream header(line);
  std::string magic, version, vbase, v, ha, extra;
  if (!(header >> magic >> version >> vbase >> v >> ha) || (header >> extra) || magic != "fvus" || version != "v1")
    throw Error(ErrorCode::FormatError, "header must read 'fvus v1 vbase=<n> V=<v> Ha=<h>'", 1);
  StreamFile f;
  try {
    f.layout = make_layout(header_field(vbase, "vbase="));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::VocabTooSmall) throw;
    throw Error(ErrorCode::FormatError, e.what(), 1);
  }
  f.shape = {header_field(v, "V="), header_field(ha, "Ha=")};
  if (f.shape.views < 1 || f.shape.horizon < 1) throw Error(ErrorCode::FormatError, "V and Ha must be positive", 1);
  std::size_t number = 1;
  while (std::getline(is, line)) {
    ++number;
    f.stream.ids.push_back(parse_int(line, number));
  }
  return f;
}

void save_stream(const std::filesystem::path& path, const StreamFile& file) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os << to_text(file);
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

StreamFile load_stream(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

}  // namespace fvla::stream
