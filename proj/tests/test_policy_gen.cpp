#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "fvla/policy_gen.hpp"
#include "support.hpp"

using namespace fvla;
using namespace fvla::gen;
using fvla::testing::code_of;

namespace {

const CodecBundle& small_codecs() {
  static const CodecBundle codecs = [] {
    auto vis = std::make_shared<const visual::VisualTokenizer>(train_toy_visual_codec(400, 2, 5, 5));
    auto act = std::make_shared<const actions::ActionTokenizer>(fit_toy_action_codec(16, 60, 1));
    return CodecBundle{act, vis, stream::make_layout(kDefaultBaseVocab)};
  }();
  return codecs;
}

std::shared_ptr<const FeatureExtractor> patch_stats() { return std::make_shared<const PatchStatsExtractor>(); }

const compression::CompressorWeights& compressor() {
  static const auto w = compression::CompressorWeights::random(0, 12, 12);
  return w;
}

Image noise_frame(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im(256, 256);
  for (auto& x : im.data) x = u(rng);
  return im;
}

GeneratorContext context_for(const FrameHistory& history, const env::EnvState& state, double tau = 1.0) {
  return assemble_context(history, compression::make_schedule(16, {8, 6, 2}), compressor(), "sort", tau, &state);
}

FrameHistory history_of(const env::EnvState& state, int views = 2) {
  FrameHistory h(16, views, patch_stats());
  std::vector<Image> frames;
  for (int v = 0; v < views; ++v) frames.push_back(env::render(state, env::view_from_index(v)));
  h.fill(frames);
  return h;
}

}  // namespace

TEST_CASE("context budget is independent of frame content") {
  for (std::uint64_t seed : {1, 2, 3}) {
    FrameHistory h(16, 2, patch_stats());
    h.fill({noise_frame(seed), env::render(env::reset(seed, 3), env::View::Side)});
    for (int i = 0; i < 16; ++i) h.push({noise_frame(seed * 100 + i), noise_frame(seed * 200 + i)});
    const auto tiered = assemble_context(h, compression::make_schedule(16, {8, 6, 2}), compressor(), "x", 1.0);
    CHECK(tiered.realized_tokens == std::vector<std::int64_t>{256, 256});
    const auto dense = assemble_context(h, compression::make_schedule(16, {0, 0, 16}), compressor(), "x", 1.0);
    CHECK(dense.realized_tokens == std::vector<std::int64_t>{1024, 1024});
  }
  const auto s = env::reset(4, 2);
  CHECK(context_for(history_of(s), s).realized_tokens == std::vector<std::int64_t>{256, 256});
}

TEST_CASE("context preconditions") {
  FrameHistory h(8, 1, patch_stats());
  h.fill({noise_frame(1)});
  CHECK(code_of([&] { assemble_context(h, compression::make_schedule(16, {8, 6, 2}), compressor(), "x", 1.0); }) ==
        ErrorCode::InvalidArgument);
  FrameHistory full(16, 1, patch_stats());
  full.fill({noise_frame(1)});
  CHECK(code_of([&] { assemble_context(full, compression::make_schedule(16, {8, 6, 2}), compressor(), "x", 0.5); }) ==
        ErrorCode::InvalidArgument);
  CHECK(code_of([] { FrameHistory(0, 1, patch_stats()); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { FrameHistory(4, 1, nullptr); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { full.push({noise_frame(1), noise_frame(2)}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("history keeps the newest T steps in order") {
  FrameHistory h(3, 1, patch_stats());
  const auto a = noise_frame(1), b = noise_frame(2), c = noise_frame(3), d = noise_frame(4);
  h.fill({a});
  CHECK(h.size() == 3);
  h.push({b});
  h.push({c});
  h.push({d});
  CHECK(h.size() == 3);
  CHECK(h.frame(0, 0) == b);
  CHECK(h.frame(1, 0) == c);
  CHECK(h.frame(2, 0) == d);
  const auto expected = PatchStatsExtractor().extract(d);
  CHECK(h.features(2, 0).data == expected.data);
}

TEST_CASE("patch statistics are sub-block means") {
  Image im(256, 256);
  im.at(0, 0, 0) = 1.0f;
  const auto g = PatchStatsExtractor().extract(im);
  CHECK(g.height == 16);
  CHECK(g.width == 16);
  CHECK(g.at(0, 0, 0) == doctest::Approx(1.0 / 64));
  CHECK(g.at(0, 0, 3) == 0.0f);
  CHECK(code_of([] { PatchStatsExtractor().extract(Image(100, 100)); }) == ErrorCode::IndivisibleImage);
}

TEST_CASE("clean oracle at unit temperature is deterministic and plans the oracle chunk") {
  const auto& codecs = small_codecs();
  const auto s = env::reset(7, 3);
  const auto h = history_of(s);
  OracleGenerator g1({.seed = 3}, codecs), g2({.seed = 3}, codecs);
  const auto o1 = g1.generate(context_for(h, s));
  const auto o2 = g2.generate(context_for(h, s));
  CHECK(o1.unified == o2.unified);
  CHECK(o1.decoded_previews == o2.decoded_previews);
  CHECK_FALSE(g1.last_trace().corrupted);
  CHECK(g1.last_trace().planned == env::oracle_chunk(s, 16).chunk);
  // The generator does not depend on its seed when nothing is random.
  OracleGenerator g3({.seed = 99}, codecs);
  CHECK(g3.generate(context_for(h, s)).unified == o1.unified);
}

TEST_CASE("decoded chunk stays within the action codec bound") {
  const auto& codecs = small_codecs();
  OracleGenerator g({.corruption = 0.5, .mode = CorruptionMode::Mixed, .seed = 11}, codecs);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = env::reset(seed, 2);
    const auto out = g.generate(context_for(history_of(s), s, 1.0 + 0.15 * static_cast<double>(seed)));
    const auto& plan = g.last_trace().planned;
    for (int t = 0; t < 16; ++t)
      for (int d = 0; d < 3; ++d)
        CHECK(std::abs(out.decoded_chunk.at(t, d) - plan.at(t, d)) <= codecs.actions->error_bound(d) + 1e-12);
  }
}

TEST_CASE("one call yields a well-formed unified stream") {
  const auto& codecs = small_codecs();
  const auto s = env::reset(2, 3);
  OracleGenerator g({.seed = 1}, codecs);
  const auto out = g.generate(context_for(history_of(s), s));
  CHECK(out.views == 2);
  CHECK(out.horizon == 16);
  REQUIRE(out.unified.frames.size() == 32);
  REQUIRE(out.decoded_previews.size() == 32);
  const stream::StreamShape shape{2, 16};
  const auto ids = stream::serialize_output(out.unified, codecs.layout, shape);
  CHECK(stream::count_visual_ids(ids, codecs.layout) == 1024);
  CHECK(stream::parse_output(ids, codecs.layout, shape) == out.unified);
  CHECK(out.unified.text_ids == phase_text(s, g.last_trace().rollout));
  CHECK(out.unified.text_ids.front() == static_cast<int>(env::Phase::Reach));
}

TEST_CASE("previews are faithful to the decoded chunk") {
  const auto& codecs = small_codecs();
  OracleGenerator g({.corruption = 0.5, .mode = CorruptionMode::Mixed, .seed = 4}, codecs);
  env::EnvState s = env::reset(21, 3);
  for (int call = 0; call < 6; ++call) {
    const auto out = g.generate(context_for(history_of(s), s, call % 2 ? 2.0 : 1.0));
    const auto replay = rollout(s, out.decoded_chunk);
    CHECK(replay == g.last_trace().rollout);
    for (int v = 0; v < 2; ++v)
      for (int t = 0; t < 16; ++t) {
        const auto codes = codecs.visual->encode(env::render(replay[static_cast<std::size_t>(t)], env::view_from_index(v)));
        CHECK(out.unified.frames[static_cast<std::size_t>(v * 16 + t)] == codes);
        CHECK(out.preview(v, t) == codecs.visual->decode(codes));
      }
    s = replay[7];
  }
}

TEST_CASE("corruption frequency follows p") {
  const auto& codecs = small_codecs();
  const auto s = env::reset(1, 1);
  const auto h = history_of(s, 1);
  OracleGenerator g({.corruption = 0.3, .mode = CorruptionMode::Mixed, .views = 1, .seed = 8}, codecs);
  const int n = 1500;
  int corrupted = 0, pairs = 0, swaps = 0;
  bool last = false;
  for (int i = 0; i < n; ++i) {
    g.generate(context_for(h, s));
    const bool c = g.last_trace().corrupted;
    corrupted += c;
    pairs += c && last;
    if (c) swaps += g.last_trace().mode == CorruptionMode::BinSwap;
    last = c;
  }
  auto within = [](double count, double trials, double p) {
    return std::abs(count - trials * p) <= 3.0 * std::sqrt(trials * p * (1 - p));
  };
  CHECK(within(corrupted, n, 0.3));
  CHECK(within(pairs, n - 1, 0.09));
  CHECK(within(swaps, corrupted, 0.5));
}

TEST_CASE("bin swap carries the held object to the other bin") {
  const auto& codecs = small_codecs();
  env::EnvState s = env::reset(3, 1);
  while (!s.held) s = env::step(s, env::oracle_action(s));
  OracleGenerator g({.corruption = 1.0, .seed = 2}, codecs);
  const auto out = g.generate(context_for(history_of(s), s));
  const auto& obj = s.object(*s.held);
  const auto end = g.last_trace().rollout.back();
  CHECK(env::distance(end.gripper, env::other_bin(obj.cls).center()) <
        env::distance(s.gripper, env::other_bin(obj.cls).center()) - 0.3);
  CHECK(out.unified.text_ids.front() == static_cast<int>(env::Phase::Carry));
}

TEST_CASE("temperature adds jitter to the plan") {
  const auto& codecs = small_codecs();
  const auto s = env::reset(5, 2);
  const auto h = history_of(s);
  OracleGenerator g({.seed = 6}, codecs);
  g.generate(context_for(h, s, 4.0));
  const auto& plan = g.last_trace().planned;
  const auto oracle = env::oracle_chunk(s, 16).chunk;
  double diff = 0.0;
  for (int t = 0; t < 16; ++t) {
    diff += std::abs(plan.at(t, 0) - oracle.at(t, 0));
    CHECK(std::abs(plan.at(t, 0)) <= env::kMaxStep);
    CHECK(std::abs(plan.at(t, 1)) <= env::kMaxStep);
  }
  CHECK(diff > 0.0);
}

TEST_CASE("generator argument checks") {
  const auto& codecs = small_codecs();
  CHECK(code_of([&] { OracleGenerator({.corruption = 1.5}, codecs); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { OracleGenerator({.views = 4}, codecs); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { OracleGenerator({.horizon = 8}, codecs); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { OracleGenerator({}, CodecBundle{}); }) == ErrorCode::InvalidArgument);
  OracleGenerator g({}, codecs);
  const auto s = env::reset(1, 1);
  auto ctx = context_for(history_of(s), s);
  ctx.state = nullptr;
  CHECK(code_of([&] { g.generate(ctx); }) == ErrorCode::GenerationFailed);
  CHECK(corruption_from_string("waypoint_offset") == CorruptionMode::WaypointOffset);
  CHECK(to_string(CorruptionMode::Mixed) == "mixed");
  CHECK(code_of([] { corruption_from_string("flip"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("phase text is run-length collapsed") {
  env::EnvState s = env::reset(9, 1);
  const auto oc = env::oracle_chunk(s, 16);
  const auto text = phase_text(s, oc.states);
  for (std::size_t i = 1; i < text.size(); ++i) CHECK(text[i] != text[i - 1]);
  CHECK(phase_text(s, {}).empty());
  CHECK(phase_text(s, {s, s}) == std::vector<int>{static_cast<int>(env::Phase::Idle)});
}
