#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "fvla/unified_stream.hpp"
#include "support.hpp"

using namespace fvla;
using namespace fvla::stream;
using fvla::testing::code_of;

namespace {

UnifiedOutput random_output(std::mt19937_64& rng, const VocabLayout& layout, StreamShape shape) {
  UnifiedOutput out;
  const int n_text = static_cast<int>(rng() % 6);
  for (int i = 0; i < n_text; ++i) out.text_ids.push_back(static_cast<int>(rng() % static_cast<unsigned>(layout.visual_offset)));
  const int n_act = static_cast<int>(rng() % 40);
  for (int i = 0; i < n_act; ++i) out.actions.codes.push_back(static_cast<int>(rng() % kActionVocab));
  out.frames.resize(static_cast<std::size_t>(shape.groups()));
  for (auto& f : out.frames)
    for (int k = 0; k < visual::kTokens; ++k) f.codes.push_back(static_cast<int>(rng() % kVisualVocab));
  return out;
}

ErrorCode parse_error(const UnifiedStream& s, const VocabLayout& l, StreamShape shape, std::size_t* pos = nullptr) {
  try {
    parse_output(s, l, shape);
  } catch (const Error& e) {
    REQUIRE(e.position().has_value());
    if (pos) *pos = *e.position();
    return e.code();
  }
  FAIL("stream parsed");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("layout arithmetic") {
  const auto l = make_layout(8192);
  CHECK(l.action_offset == 6144);
  CHECK(l.visual_offset == 2048);
  CHECK(l.act_bos == 8192);
  CHECK(l.act_eos == 8193);
  CHECK(l.img_bos == 8194);
  CHECK(l.img_eos == 8195);

  const auto tight = make_layout(6144);
  CHECK(tight.action_offset == 4096);
  CHECK(tight.visual_offset == 0);
  CHECK(code_of([] { make_layout(6000); }) == ErrorCode::VocabTooSmall);
}

TEST_CASE("id mapping") {
  const auto l = make_layout(8192);
  CHECK(map_action_id(l, 0) == 6144);
  CHECK(map_action_id(l, 2047) == 8191);
  CHECK(map_visual_id(l, 4095) == 6143);
  CHECK(map_visual_id(l, 0) == 2048);
  for (int c = 0; c < kActionVocab; ++c) REQUIRE(unmap_action_id(l, map_action_id(l, c)) == c);
  for (int c = 0; c < kVisualVocab; ++c) REQUIRE(unmap_visual_id(l, map_visual_id(l, c)) == c);
  CHECK(code_of([&] { unmap_action_id(l, 6143); }) == ErrorCode::OutOfRange);
  CHECK(code_of([&] { unmap_visual_id(l, 6144); }) == ErrorCode::OutOfRange);
  CHECK(code_of([&] { unmap_visual_id(l, 8192); }) == ErrorCode::OutOfRange);
  CHECK(code_of([&] { map_action_id(l, 2048); }) == ErrorCode::OutOfRange);
  CHECK(code_of([&] { map_visual_id(l, -1); }) == ErrorCode::OutOfRange);
}

TEST_CASE("bands partition the id space") {
  for (int base : {6144, 6145, 8192, 151936}) {
    const auto l = make_layout(base);
    for (int id = -2; id < l.end() + 2; ++id) {
      const int hits = l.is_text(id) + l.is_visual(id) + l.is_action(id) + l.is_special(id);
      REQUIRE(hits == (id >= 0 && id < l.end() ? 1 : 0));
    }
  }
}

TEST_CASE("minimal stream") {
  const auto l = make_layout(8192);
  UnifiedOutput out;
  out.frames.push_back({std::vector<int>(32, 0)});
  const auto s = serialize_output(out, l, {1, 1});
  std::vector<int> want{8192, 8193, 8194};
  want.insert(want.end(), 32, 2048);
  want.push_back(8195);
  CHECK(s.ids == want);
  CHECK(parse_output(s, l, {1, 1}) == out);
}

TEST_CASE("two views by sixteen frames carry 1024 visual ids") {
  const auto l = make_layout(8192);
  std::mt19937_64 rng(1);
  const StreamShape shape{2, 16};
  const auto out = random_output(rng, l, shape);
  const auto s = serialize_output(out, l, shape);
  CHECK(count_visual_ids(s, l) == 1024);
  int delimiters = 0;
  for (int id : s.ids) delimiters += (id == l.img_bos || id == l.img_eos);
  CHECK(delimiters == 64);
  CHECK(s.ids.size() == out.text_ids.size() + out.actions.codes.size() + 2 + 1024 + 64);
  // View-major: the first group after ACT_EOS is view 0 frame 0, group 16 is view 1 frame 0.
  const std::size_t first = out.text_ids.size() + out.actions.codes.size() + 2;
  CHECK(s.ids[first + 1] == map_visual_id(l, out.frames[0].codes[0]));
  CHECK(s.ids[first + 16 * 34 + 1] == map_visual_id(l, out.frames[16].codes[0]));
}

TEST_CASE("serialize validates its input") {
  const auto l = make_layout(8192);
  std::mt19937_64 rng(2);
  auto out = random_output(rng, l, {1, 2});
  auto short_frame = out;
  short_frame.frames[1].codes.pop_back();
  CHECK(code_of([&] { serialize_output(short_frame, l, {1, 2}); }) == ErrorCode::FrameLengthNot32);
  auto big = out;
  big.frames[0].codes[3] = 4096;
  CHECK(code_of([&] { serialize_output(big, l, {1, 2}); }) == ErrorCode::CodeOutOfRange);
  auto act = out;
  act.actions.codes.push_back(2048);
  CHECK(code_of([&] { serialize_output(act, l, {1, 2}); }) == ErrorCode::CodeOutOfRange);
  auto text = out;
  text.text_ids.push_back(l.visual_offset);
  CHECK(code_of([&] { serialize_output(text, l, {1, 2}); }) == ErrorCode::CodeOutOfRange);
  CHECK(code_of([&] { serialize_output(out, l, {2, 2}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("parse errors are typed and positioned") {
  const auto l = make_layout(8192);
  std::mt19937_64 rng(3);
  const StreamShape shape{2, 2};
  auto out = random_output(rng, l, shape);
  out.text_ids = {5, 6};
  out.actions.codes = {1, 2, 3};
  const auto s = serialize_output(out, l, shape);
  const std::size_t g0 = 2 + 1 + 3 + 1;  // first IMG_BOS
  std::size_t pos = 0;

  SUBCASE("deleted IMG_EOS") {
    auto m = s;
    m.ids.erase(m.ids.begin() + static_cast<long>(g0 + 33));
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::DelimiterMismatch);
    CHECK(pos == g0 + 33);
  }
  SUBCASE("short image group") {
    auto m = s;
    m.ids.erase(m.ids.begin() + static_cast<long>(g0 + 5));
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::BadGroupLength);
    CHECK(pos == g0 + 32);
  }
  SUBCASE("long image group") {
    auto m = s;
    m.ids.insert(m.ids.begin() + static_cast<long>(g0 + 5), l.visual_offset + 9);
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::BadGroupLength);
    CHECK(pos == g0 + 33);
  }
  SUBCASE("action id inside an image group") {
    auto m = s;
    m.ids[g0 + 7] = l.action_offset;
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::IdOutOfBand);
    CHECK(pos == g0 + 7);
  }
  SUBCASE("visual id inside the action group") {
    auto m = s;
    m.ids[4] = l.visual_offset;
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::IdOutOfBand);
    CHECK(pos == 4);
  }
  SUBCASE("id beyond the vocabulary") {
    auto m = s;
    m.ids[0] = l.end();
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::IdOutOfBand);
    CHECK(pos == 0);
    m.ids[0] = -1;
    CHECK(parse_error(m, l, shape) == ErrorCode::IdOutOfBand);
  }
  SUBCASE("missing ACT_BOS") {
    auto m = s;
    m.ids[2] = l.img_bos;
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::DelimiterMismatch);
    CHECK(pos == 2);
  }
  SUBCASE("truncated") {
    auto m = s;
    m.ids.pop_back();
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::TruncatedStream);
    CHECK(pos == m.ids.size());
    CHECK(parse_error(UnifiedStream{}, l, shape) == ErrorCode::TruncatedStream);
  }
  SUBCASE("extra tokens") {
    auto m = s;
    m.ids.push_back(l.img_bos);
    CHECK(parse_error(m, l, shape, &pos) == ErrorCode::ExtraTokens);
    CHECK(pos == s.ids.size());
  }
  SUBCASE("wrong group count") {
    CHECK(parse_error(s, l, {2, 3}) == ErrorCode::TruncatedStream);
    CHECK(parse_error(s, l, {1, 2}) == ErrorCode::ExtraTokens);
  }
}

TEST_CASE("serialize and parse are inverse on random outputs") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto l = make_layout(6144 + static_cast<int>(rng() % 4000));
    const StreamShape shape{1 + static_cast<int>(rng() % 3), 1 + static_cast<int>(rng() % 16)};
    auto out = random_output(rng, l, shape);
    if (l.visual_offset == 0) out.text_ids.clear();
    const auto s = serialize_output(out, l, shape);
    REQUIRE(parse_output(s, l, shape) == out);
  }
}

TEST_CASE("serialization is injective") {
  const auto l = make_layout(8192);
  const StreamShape shape{1, 2};
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_output(rng, l, shape);
    auto b = a;
    // Move one boundary: a text id becomes the first action code, or a code changes.
    if (!b.text_ids.empty() && rng() % 2) {
      b.actions.codes.insert(b.actions.codes.begin(), b.text_ids.back() % kActionVocab);
      b.text_ids.pop_back();
    } else {
      b.frames[1].codes[rng() % 32] ^= 1;
    }
    CHECK(serialize_output(a, l, shape) != serialize_output(b, l, shape));
  }
}

TEST_CASE("single-id mutations never parse silently to a different stream") {
  const auto l = make_layout(8192);
  const StreamShape shape{2, 4};
  std::mt19937_64 rng(6);
  int rejected = 0, accepted = 0;
  const int interesting[] = {l.act_bos, l.act_eos, l.img_bos, l.img_eos, 0, l.visual_offset - 1, l.visual_offset,
                             l.action_offset - 1, l.action_offset, l.base_vocab - 1, l.end(), -1};
  for (int i = 0; i < 10000; ++i) {
    const auto out = random_output(rng, l, shape);
    auto s = serialize_output(out, l, shape);
    const auto at = static_cast<long>(rng() % (s.ids.size() + 1));
    const int value = rng() % 2 ? interesting[rng() % std::size(interesting)] : static_cast<int>(rng() % l.end());
    switch (rng() % 3) {
      case 0:
        if (at < static_cast<long>(s.ids.size())) s.ids.erase(s.ids.begin() + at);
        break;
      case 1: s.ids.insert(s.ids.begin() + at, value); break;
      default:
        if (at < static_cast<long>(s.ids.size())) s.ids[static_cast<std::size_t>(at)] = value;
    }
    try {
      const auto parsed = parse_output(s, l, shape);
      REQUIRE(serialize_output(parsed, l, shape) == s);
      ++accepted;
    } catch (const Error& e) {
      REQUIRE(e.position().has_value());
      ++rejected;
    }
  }
  MESSAGE(rejected << " rejected, " << accepted << " re-serialized exactly");
  CHECK(rejected + accepted == 10000);
}

TEST_CASE("parser is total on garbage") {
  const auto l = make_layout(6144);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 2000; ++i) {
    UnifiedStream s;
    const int n = static_cast<int>(rng() % 80);
    for (int k = 0; k < n; ++k) s.ids.push_back(static_cast<int>(rng() % 6200) - 20);
    try {
      parse_output(s, l, {1, 1});
    } catch (const Error& e) {
      REQUIRE(e.position().has_value());
    }
  }
}

TEST_CASE("stream file format") {
  const auto l = make_layout(8192);
  std::mt19937_64 rng(8);
  const StreamShape shape{2, 3};
  StreamFile f{l, shape, serialize_output(random_output(rng, l, shape), l, shape)};
  const std::string text = to_text(f);
  CHECK(text.starts_with("fvus v1 vbase=8192 V=2 Ha=3\n"));
  const auto back = from_text(text);
  CHECK(back.layout == l);
  CHECK(back.shape == shape);
  CHECK(back.stream == f.stream);
  CHECK(to_text(back) == text);

  const auto path = std::filesystem::temp_directory_path() / "fvla_stream_test.fvus";
  save_stream(path, f);
  CHECK(load_stream(path).stream == f.stream);

  auto err_line = [](const std::string& t) {
    try {
      from_text(t);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::FormatError);
      return e.position().value_or(0);
    }
    FAIL("accepted malformed stream file");
    return std::size_t{0};
  };
  CHECK(err_line("") == 1);
  CHECK(err_line("fvus v2 vbase=8192 V=2 Ha=3\n") == 1);
  CHECK(err_line("fvus v1 vbase=100 V=2 Ha=3\n") == 1);
  CHECK(err_line("fvus v1 vbase=8192 V=0 Ha=3\n") == 1);
  CHECK(err_line("fvus v1 vbase=8192 V=1 Ha=1 junk\n") == 1);
  CHECK(err_line("fvus v1 vbase=8192 V=1 Ha=1\n8192\n12x\n") == 3);
  CHECK(err_line("fvus v1 vbase=8192 V=1 Ha=1\n8192\n\n") == 3);
  CHECK(code_of([] { load_stream("/nonexistent/x.fvus"); }) == ErrorCode::IoError);
}
