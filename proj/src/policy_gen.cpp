#include "fvla/policy_gen.hpp"

#include <algorithm>

#include "fvla/error.hpp"

namespace fvla::gen {

// ---------------------------------------------------------------- features

compression::FeatureGrid PatchStatsExtractor::extract(const Image& image) const {
  constexpr int kP = visual::kPatch;
  if (image.height % kP != 0 || image.width % kP != 0)
    throw Error(ErrorCode::IndivisibleImage, "frame is not a multiple of 16 px");
  compression::FeatureGrid g(image.height / kP, image.width / kP, channels());
  for (int pr = 0; pr < g.height; ++pr)
    for (int pc = 0; pc < g.width; ++pc)
      for (int q = 0; q < 4; ++q) {
        const int r0 = pr * kP + (q / 2) * (kP / 2);
        const int c0 = pc * kP + (q % 2) * (kP / 2);
        for (int ch = 0; ch < 3; ++ch) {
          double acc = 0.0;
          for (int r = r0; r < r0 + kP / 2; ++r)
            for (int c = c0; c < c0 + kP / 2; ++c) acc += image.at(r, c, ch);
          g.at(pr, pc, q * 3 + ch) = static_cast<float>(acc / (kP * kP / 4));
        }
      }
  return g;
}

compression::FeatureGrid VisualPatchExtractor::extract(const Image& image) const {
  const auto p = visual::patchify(image, *model_);
  compression::FeatureGrid g(p.rows, p.cols, p.dim);
  g.data = p.data;
  return g;
}

// ---------------------------------------------------------------- history

FrameHistory::FrameHistory(int length, int views, std::shared_ptr<const FeatureExtractor> extractor)
    : length_(length), views_(views), extractor_(std::move(extractor)) {
  if (length_ < 1 || views_ < 1) throw Error(ErrorCode::InvalidArgument, "history needs T >= 1 and V >= 1");
  if (!extractor_) throw Error(ErrorCode::InvalidArgument, "history needs a feature extractor");
}

void FrameHistory::fill(const std::vector<Image>& step_frames) {
  steps_.clear();
  push(step_frames);
  while (size() < length_) steps_.push_back(steps_.back());
}

void FrameHistory::push(const std::vector<Image>& step_frames) {
  if (step_frames.size() != static_cast<std::size_t>(views_))
    throw Error(ErrorCode::InvalidArgument, "expected " + std::to_string(views_) + " frames per step");
  std::vector<Entry> entry;
  entry.reserve(step_frames.size());
  for (const auto& f : step_frames)
    entry.push_back({std::make_shared<const Image>(f), std::make_shared<const compression::FeatureGrid>(extractor_->extract(f))});
  if (size() == length_) steps_.erase(steps_.begin());
  steps_.push_back(std::move(entry));
}

const Image& FrameHistory::frame(int i, int v) const {
  return *steps_.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(v)).image;
}

const compression::FeatureGrid& FrameHistory::features(int i, int v) const {
  return *steps_.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(v)).features;
}

GeneratorContext assemble_context(const FrameHistory& history, const compression::CompressionSchedule& schedule,
                                  const compression::CompressorWeights& compressor, const std::string& instruction,
                                  double temperature, const env::EnvState* state) {
  if (history.size() != schedule.horizon)
    throw Error(ErrorCode::InvalidArgument, "history holds " + std::to_string(history.size()) + " steps, schedule needs " +
                                                std::to_string(schedule.horizon));
  if (!(temperature >= 1.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 1");
  GeneratorContext ctx;
  ctx.history = &history;
  ctx.schedule = schedule;
  ctx.instruction = instruction;
  ctx.state = state;
  ctx.temperature = temperature;
  ctx.realized_tokens.assign(static_cast<std::size_t>(history.views()), 0);
  if (history.size() == 0) return ctx;
  const auto& first = history.features(0, 0);
  const compression::GridSize grid{first.height, first.width};
  const std::int64_t expected = compression::schedule_budget(schedule, grid);
  for (int v = 0; v < history.views(); ++v) {
    for (int i = 0; i < history.size(); ++i) {
      const auto& f = history.features(i, v);
      if (f.height != grid.rows || f.width != grid.cols)
        throw Error(ErrorCode::InvalidArgument, "history frames differ in feature grid size");
      const auto merged = compression::merge_patches(
          compression::compress_frame(f, schedule.depths[static_cast<std::size_t>(i)], compressor), compressor);
      ctx.realized_tokens[static_cast<std::size_t>(v)] += static_cast<std::int64_t>(merged.tokens());
    }
    if (ctx.realized_tokens[static_cast<std::size_t>(v)] != expected)
      throw Error(ErrorCode::GenerationFailed, "view " + std::to_string(v) + " realized " +
                                                   std::to_string(ctx.realized_tokens[static_cast<std::size_t>(v)]) +
                                                   " tokens, budget is " + std::to_string(expected));
  }
  return ctx;
}

// ---------------------------------------------------------------- codecs

std::string to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::BinSwap: return "bin_swap";
    case CorruptionMode::WaypointOffset: return "waypoint_offset";
    case CorruptionMode::Mixed: return "mixed";
  }
  return "unknown";
}

CorruptionMode corruption_from_string(const std::string& s) {
  if (s == "bin_swap") return CorruptionMode::BinSwap;
  if (s == "waypoint_offset") return CorruptionMode::WaypointOffset;
  if (s == "mixed") return CorruptionMode::Mixed;
  throw Error(ErrorCode::InvalidArgument, "unknown corruption mode '" + s + "'");
}

actions::Normalizer toy_normalizer() {
  return actions::Normalizer({-env::kMaxStep, -env::kMaxStep, -1.0}, {env::kMaxStep, env::kMaxStep, 1.0});
}

actions::ActionTokenizer fit_toy_action_codec(int horizon, int episodes, std::uint64_t seed) {
  std::vector<actions::ActionChunk> corpus;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.02);
  for (int e = 0; e < episodes; ++e) {
    env::EnvState s = env::reset(rng(), 1 + e % 4);
    const bool noisy = e % 2 == 1;
    for (int t = 0; t < 200 && !env::success(s); t += 4) {
      auto oc = env::oracle_chunk(s, horizon);
      if (noisy)
        for (int h = 0; h < horizon; ++h)
          for (int d = 0; d < 2; ++d) oc.chunk.at(h, d) = std::clamp(oc.chunk.at(h, d) + jitter(rng), -env::kMaxStep, env::kMaxStep);
      corpus.push_back(oc.chunk);
      for (int k = 0; k < 4; ++k) s = oc.states[static_cast<std::size_t>(k)];
    }
  }
  const auto norm = toy_normalizer();
  return actions::ActionTokenizer::fit(corpus, horizon, actions::kDefaultDelta, &norm);
}

visual::VisualTokenizer train_toy_visual_codec(std::size_t states, int views, std::uint64_t seed, int iterations,
                                              visual::VisualTokenizer::TrainReport* report) {
  if (views < 1 || views > 3) throw Error(ErrorCode::InvalidArgument, "views must be in [1, 3]");
  auto mixed = env::exploration_states(seed, states / 2);
  const auto clean = env::oracle_states(seed + 1, states - states / 2);
  mixed.insert(mixed.end(), clean.begin(), clean.end());
  const auto corpus = std::make_shared<const std::vector<env::EnvState>>(std::move(mixed));
  const visual::FrameSource source(corpus->size() * static_cast<std::size_t>(views), [corpus, views](std::size_t i) {
    return env::render((*corpus)[i / static_cast<std::size_t>(views)], static_cast<int>(i % static_cast<std::size_t>(views)));
  });
  return visual::VisualTokenizer::train(source, {.dim = visual::kDefaultDim, .iterations = iterations, .seed = seed}, report);
}

// ---------------------------------------------------------------- oracle

std::vector<env::EnvState> rollout(const env::EnvState& state, const actions::ActionChunk& chunk) {
  std::vector<env::EnvState> out;
  out.reserve(static_cast<std::size_t>(chunk.horizon));
  env::EnvState s = state;
  for (int t = 0; t < chunk.horizon; ++t) {
    s = env::step(s, env::action_from_row(chunk, t));
    out.push_back(s);
  }
  return out;
}

std::vector<int> phase_text(const env::EnvState& start, const std::vector<env::EnvState>& states) {
  std::vector<int> out;
  const env::EnvState* prev = &start;
  for (const auto& s : states) {
    const int p = static_cast<int>(env::transition_phase(*prev, s));
    if (out.empty() || out.back() != p) out.push_back(p);
    prev = &s;
  }
  return out;
}

OracleGenerator::OracleGenerator(OracleConfig config, CodecBundle codecs)
    : config_(config), codecs_(std::move(codecs)), rng_(config.seed) {
  if (!(config_.corruption >= 0.0 && config_.corruption <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "corruption rate must be in [0, 1]");
  if (config_.views < 1 || config_.views > 3) throw Error(ErrorCode::InvalidArgument, "views must be in [1, 3]");
  if (!codecs_.actions || !codecs_.visual) throw Error(ErrorCode::InvalidArgument, "oracle generator needs both codecs");
  if (codecs_.actions->horizon() != config_.horizon || codecs_.actions->dims() != env::kActionDims)
    throw Error(ErrorCode::InvalidArgument, "action codec does not match the toy embodiment");
  for (int v = 0; v < config_.views; ++v)
    backgrounds_.push_back(codecs_.visual->make_reference(env::background(env::view_from_index(v))));
}

GeneratorOutput OracleGenerator::generate(const GeneratorContext& ctx) {
  if (!ctx.state) throw Error(ErrorCode::GenerationFailed, "oracle generator needs the environment state");
  if (!(ctx.temperature >= 1.0)) throw Error(ErrorCode::GenerationFailed, "temperature must be >= 1");
  const env::EnvState& start = *ctx.state;
  const int horizon = config_.horizon;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  trace_ = ProposalTrace{};
  trace_.corrupted = unit(rng_) < config_.corruption;
  trace_.mode = config_.mode;
  if (config_.mode == CorruptionMode::Mixed)
    trace_.mode = unit(rng_) < 0.5 ? CorruptionMode::BinSwap : CorruptionMode::WaypointOffset;
  const bool swap = trace_.corrupted && trace_.mode == CorruptionMode::BinSwap;
  const env::Vec2 offset =
      trace_.corrupted && trace_.mode == CorruptionMode::WaypointOffset ? config_.offset : env::Vec2{};
  const double sigma = config_.sigma0 * (ctx.temperature - 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);

  // Plan: greedy oracle on the (possibly corrupted) goal, jittered and clamped.
  trace_.planned = actions::ActionChunk(horizon, env::kActionDims);
  env::EnvState s = start;
  for (int t = 0; t < horizon; ++t) {
    env::EnvAction a = env::success(s) ? env::EnvAction{} : env::oracle_action(s, swap, offset);
    if (sigma > 0.0) {
      a.dx += sigma * jitter(rng_);
      a.dy += sigma * jitter(rng_);
    }
    a.dx = std::clamp(a.dx, -env::kMaxStep, env::kMaxStep);
    a.dy = std::clamp(a.dy, -env::kMaxStep, env::kMaxStep);
    env::write_action(trace_.planned, t, a);
    s = env::step(s, a);
  }

  GeneratorOutput out;
  out.views = config_.views;
  out.horizon = horizon;
  try {
    out.unified.actions = codecs_.actions->encode(trace_.planned);
    out.decoded_chunk = codecs_.actions->decode(out.unified.actions);
  } catch (const Error& e) {
    throw Error(ErrorCode::GenerationFailed, std::string("action tokenization failed: ") + e.what());
  }

  // Preview: the consequences of the decoded chunk, through the visual codec.
  trace_.rollout = rollout(start, out.decoded_chunk);
  out.unified.text_ids = phase_text(start, trace_.rollout);
  out.unified.frames.resize(static_cast<std::size_t>(config_.views * horizon));
  out.decoded_previews.resize(out.unified.frames.size());
  for (int v = 0; v < config_.views; ++v) {
    auto ref = backgrounds_[static_cast<std::size_t>(v)];
    const auto view = env::view_from_index(v);
    codecs_.visual->advance(ref, env::render(start, view));
    for (int h = 0; h < horizon; ++h) {
      codecs_.visual->advance(ref, env::render(trace_.rollout[static_cast<std::size_t>(h)], view));
      const auto idx = static_cast<std::size_t>(v * horizon + h);
      out.unified.frames[idx] = ref.codes;
      out.decoded_previews[idx] = ref.decoded;
    }
  }
  return out;
}

}  // namespace fvla::gen
