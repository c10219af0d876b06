#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "fvla/dataset.hpp"
#include "fvla/toy_env.hpp"
#include "support.hpp"

using namespace fvla;
using namespace fvla::data;
using fvla::testing::code_of;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fvla_dataset_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

EpisodeRecord synthetic(int length, int views = 2, int dims = 3) {
  EpisodeRecord ep;
  ep.episode_id = "syn";
  ep.instruction = "test";
  ep.views = views;
  ep.length = length;
  ep.frame_dir = "/nonexistent";
  for (int t = 0; t < length; ++t) {
    std::vector<double> row(static_cast<std::size_t>(dims));
    for (int d = 0; d < dims; ++d) row[static_cast<std::size_t>(d)] = t == 0 ? 0.0 : 0.001 * (t + d);
    ep.actions.push_back(row);
  }
  return ep;
}

std::string read(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << '\n';
}

std::size_t schema_line(const std::filesystem::path& p) {
  try {
    load_episodes(p, false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SchemaError);
    return e.position().value_or(0);
  }
  FAIL("schema error not raised");
  return 0;
}

}  // namespace

TEST_CASE("episode file round trip") {
  const auto dir = scratch("roundtrip");
  std::vector<EpisodeRecord> eps{synthetic(5), synthetic(7, 1, 7)};
  eps[1].episode_id = "second";
  eps[1].phases = {1, 2, 2, 3, 4, 5, 1};
  write_episodes(dir / "episodes.jsonl", eps);
  CHECK(load_episodes(dir / "episodes.jsonl", false) == eps);
  // Exact doubles survive the text round trip.
  eps[0].actions[1][0] = 0.1 + 0.2;
  write_episodes(dir / "episodes.jsonl", eps);
  CHECK(load_episodes(dir / "episodes.jsonl", false) == eps);
}

TEST_CASE("schema errors carry the line number") {
  const auto dir = scratch("schema");
  const auto p = dir / "episodes.jsonl";
  const std::string good =
      R"({"episode_id":"a","instruction":"x","views":1,"length":2,"frame_dir":"f","actions":[[0,0],[1,1]]})";
  write_lines(p, {good, R"({"episode_id":"b","instruction":"x","views":1,"length":2,"frame_dir":"f"})"});
  CHECK(schema_line(p) == 2);
  write_lines(p, {good, "", R"({"episode_id":"b", "instruction":)"});
  CHECK(schema_line(p) == 3);
  write_lines(p, {R"({"episode_id":"a","instruction":"x","views":1,"length":3,"frame_dir":"f","actions":[[0,0],[1,1]]})"});
  CHECK(schema_line(p) == 1);
  write_lines(p, {R"({"episode_id":"a","instruction":"x","views":"1","length":2,"frame_dir":"f","actions":[[0,0],[1,1]]})"});
  CHECK(schema_line(p) == 1);
  write_lines(p, {R"({"episode_id":"a","instruction":"x","views":1,"length":2,"frame_dir":"f","actions":[[0,0],[1]]})"});
  CHECK(schema_line(p) == 1);
  write_lines(p, {good, good, R"([1,2])"});
  CHECK(schema_line(p) == 3);
  CHECK(code_of([&] { load_episodes(dir / "absent.jsonl"); }) == ErrorCode::IoError);
}

TEST_CASE("missing frame files are reported") {
  const auto dir = scratch("frames");
  auto eps = dump_toy_episodes(dir, {.episodes = 2, .seed = 3, .views = 2, .objects = 1});
  CHECK(load_episodes(dir / "episodes.jsonl").size() == 2);
  std::filesystem::remove(frame_path(eps[1], 1, 2));
  try {
    load_episodes(dir / "episodes.jsonl");
    FAIL("missing frame accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingFrameFile);
    CHECK(e.position() == 2);
  }
  CHECK(load_episodes(dir / "episodes.jsonl", false).size() == 2);
}

TEST_CASE("toy dump of 50 episodes loads with matching lengths") {
  const auto dir = scratch("dump50");
  const auto eps = dump_toy_episodes(dir, {.episodes = 50, .seed = 0, .views = 1, .objects = 2});
  const auto loaded = load_episodes(dir / "episodes.jsonl");
  REQUIRE(loaded.size() == 50);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(loaded[i].length == eps[i].length);
    CHECK(loaded[i].actions == eps[i].actions);
    CHECK(loaded[i].phases == eps[i].phases);
    // Replaying the stored actions reproduces the episode and ends in success.
    auto s = env::reset(i, 2);
    for (int t = 1; t < loaded[i].length; ++t) {
      const auto& a = loaded[i].actions[static_cast<std::size_t>(t)];
      s = env::step(s, {a[0], a[1], static_cast<env::GripCmd>(static_cast<int>(a[2]))});
    }
    CHECK(env::success(s));
    CHECK(load_png(frame_path(loaded[i], 0, loaded[i].length - 1)) == env::render(s, 0));
  }
}

TEST_CASE("one window per step with edge replication") {
  const auto ep100 = synthetic(100);
  CHECK(window_samples(ep100, 16, 16, 1).size() == 100);
  CHECK(window_samples(ep100, 16, 16, 3).size() == 34);

  const auto ep5 = synthetic(5);
  const auto samples = window_samples(ep5, 16, 16, 1);
  REQUIRE(samples.size() == 5);
  for (const auto& s : samples) {
    REQUIRE(s.inputs.size() == 32);
    REQUIRE(s.targets.size() == 32);
    int pads = 0;
    for (int i = 0; i < 16; ++i) pads += s.input(i, 0).pad;
    CHECK(pads == 15 - s.anchor);
    CHECK(pads >= 11);
    for (int i = 0; i < 16; ++i)
      for (int v = 0; v < 2; ++v) {
        const auto& r = s.input(i, v);
        CHECK(r.view == v);
        CHECK(r.t == std::max(0, s.anchor - 15 + i));
        if (r.pad) CHECK(r.t == 0);
      }
    // The newest input is the anchor itself.
    CHECK(s.input(15, 0).t == s.anchor);
    CHECK_FALSE(s.input(15, 0).pad);
  }
  CHECK(samples[0].input(0, 0).pad);
  CHECK(samples[0].input(15, 1).t == 0);

  const auto& last = samples.back();
  for (int h = 0; h < 16; ++h) {
    CHECK(last.target(h, 0).t == 4);
    CHECK(last.target(h, 1).pad);
    CHECK(last.action_pad[static_cast<std::size_t>(h)]);
    for (int d = 0; d < 3; ++d) CHECK(last.target_actions.at(h, d) == 0.0);
  }
  const auto& first = samples.front();
  CHECK(first.target(0, 0).t == 1);
  CHECK_FALSE(first.target(3, 0).pad);
  CHECK(first.target(4, 0).pad);
  CHECK(first.target_actions.at(0, 0) == ep5.actions[1][0]);
  CHECK(first.target_actions.at(3, 2) == ep5.actions[4][2]);
  CHECK(first.target_actions.at(4, 0) == 0.0);
}

TEST_CASE("pad flags never appear inside a window") {
  for (int length : {1, 2, 5, 16, 17, 40}) {
    for (const auto& s : window_samples(synthetic(length, 1), 16, 16, 1)) {
      bool seen_real = false;
      for (int i = 0; i < 16; ++i) {
        if (!s.input(i, 0).pad) seen_real = true;
        else CHECK_FALSE(seen_real);
      }
      bool seen_pad = false;
      for (int h = 0; h < 16; ++h) {
        if (s.target(h, 0).pad) seen_pad = true;
        else CHECK_FALSE(seen_pad);
        CHECK(s.action_pad[static_cast<std::size_t>(h)] == s.target(h, 0).pad);
      }
    }
  }
}

TEST_CASE("training records") {
  const auto dir = scratch("records");
  const auto eps = dump_toy_episodes(dir, {.episodes = 3, .seed = 11, .views = 2, .objects = 2});

  std::vector<Image> frames;
  for (const auto& s : env::exploration_states(4, 160))
    for (int v = 0; v < 2; ++v) frames.push_back(env::render(s, v));
  const auto vis = visual::VisualTokenizer::train(frames, {.dim = 16, .iterations = 3});

  std::vector<actions::ActionChunk> corpus;
  for (const auto& ep : eps)
    for (const auto& s : window_samples(ep)) corpus.push_back(s.target_actions);
  const actions::Normalizer norm({-0.05, -0.05, -1.0}, {0.05, 0.05, 1.0});
  const auto act = actions::ActionTokenizer::fit(corpus, 16, actions::kDefaultDelta, &norm);

  const auto layout = stream::make_layout(8192);
  const auto schedule = compression::make_schedule(16, {8, 6, 2});
  const Codecs codecs{&act, &vis};
  const auto& ep = eps[0];
  const auto samples = window_samples(ep);

  const auto rec = build_training_record(samples[3], ep, codecs, layout, schedule);
  CHECK(rec.label.shape == stream::StreamShape{2, 16});
  CHECK(stream::count_visual_ids(rec.label.stream, layout) == 2 * 16 * 32);
  const auto parsed = stream::parse_output(rec.label.stream, layout, rec.label.shape);
  CHECK(parsed.text_ids == transition_text(ep, samples[3]));
  CHECK_FALSE(parsed.text_ids.empty());
  // Label ids are raw token ids: frame h of view v is the visual code of the stored PNG.
  CHECK(parsed.frames[16 + 2] == vis.encode(load_png(frame_path(ep, 1, samples[3].target(2, 1).t))));

  const auto chunk = act.decode(parsed.actions);
  for (int t = 0; t < 16; ++t)
    for (int d = 0; d < 3; ++d)
      CHECK(std::abs(chunk.at(t, d) - samples[3].target_actions.at(t, d)) <= act.error_bound(d) + 1e-12);

  // A fully padded target chunk decodes to exact zero motion.
  const auto tail = build_training_record(samples.back(), ep, codecs, layout, schedule);
  const auto zero = act.decode(stream::parse_output(tail.label.stream, layout, tail.label.shape).actions);
  for (double x : zero.values) CHECK(x == 0.0);
  CHECK(stream::parse_output(tail.label.stream, layout, tail.label.shape).text_ids.empty());

  // Deterministic byte for byte.
  const auto p1 = write_training_record(dir / "r1", samples[3], rec);
  const auto p2 = write_training_record(dir / "r2", samples[3], build_training_record(samples[3], ep, codecs, layout, schedule));
  CHECK(read(p1) == read(p2));
  auto j1 = p1;
  j1.replace_extension(".json");
  auto j2 = p2;
  j2.replace_extension(".json");
  CHECK(read(j1) == read(j2));
  CHECK(read(j1).find("\"depths\"") != std::string::npos);
  CHECK(stream::load_stream(p1).stream == rec.label.stream);

  CHECK(code_of([&] { build_training_record(samples[0], ep, codecs, layout, compression::make_schedule(4, {0, 0, 4})); }) ==
        ErrorCode::InvalidArgument);
  CHECK(code_of([&] { build_training_record(samples[0], eps[1], codecs, layout, schedule); }) ==
        ErrorCode::InvalidArgument);
}
