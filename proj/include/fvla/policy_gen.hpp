#pragma once

// The generator contract: one call yields an action chunk together with the
// tokenized preview of its consequences. The oracle generator plans with the
// toy environment and can be corrupted on purpose.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fvla/action_codec.hpp"
#include "fvla/compression.hpp"
#include "fvla/image.hpp"
#include "fvla/toy_env.hpp"
#include "fvla/unified_stream.hpp"
#include "fvla/visual_codec.hpp"

namespace fvla::gen {

inline constexpr double kDefaultSigma0 = 0.01;
inline constexpr int kDefaultHorizon = 16;
inline constexpr int kDefaultHistory = 16;
inline constexpr int kDefaultViews = 2;
inline constexpr int kDefaultBaseVocab = 151936;

// ---------------------------------------------------------------- context

/// Maps a frame to a patch-feature grid for the compressor.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual compression::FeatureGrid extract(const Image& image) const = 0;
  virtual int channels() const = 0;
};

/// 16x16 grid of 16 px patches; channels are the mean RGB of the four 8 px
/// sub-blocks (12 channels). No weights.
class PatchStatsExtractor final : public FeatureExtractor {
 public:
  compression::FeatureGrid extract(const Image& image) const override;
  int channels() const override { return 12; }
};

/// Patch embedding of a fitted visual model (dim channels).
class VisualPatchExtractor final : public FeatureExtractor {
 public:
  explicit VisualPatchExtractor(std::shared_ptr<const visual::VisualModel> model) : model_(std::move(model)) {}
  compression::FeatureGrid extract(const Image& image) const override;
  int channels() const override { return model_->dim; }

 private:
  std::shared_ptr<const visual::VisualModel> model_;
};

/// The last T observation steps, each holding V frames and their features.
class FrameHistory {
 public:
  FrameHistory(int length, int views, std::shared_ptr<const FeatureExtractor> extractor);

  /// Replaces the contents with `length` copies of one observation.
  void fill(const std::vector<Image>& step_frames);
  /// Appends one observation, dropping the oldest once full.
  void push(const std::vector<Image>& step_frames);

  int length() const { return length_; }
  int views() const { return views_; }
  int size() const { return static_cast<int>(steps_.size()); }
  const Image& frame(int i, int v) const;  // i = 0 is the oldest
  const compression::FeatureGrid& features(int i, int v) const;

 private:
  struct Entry {
    std::shared_ptr<const Image> image;
    std::shared_ptr<const compression::FeatureGrid> features;
  };
  int length_;
  int views_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  std::vector<std::vector<Entry>> steps_;  // ring kept in order, oldest first
};

struct GeneratorContext {
  const FrameHistory* history = nullptr;
  compression::CompressionSchedule schedule;
  std::string instruction;
  const env::EnvState* state = nullptr;  // oracle generators only
  double temperature = 1.0;
  std::vector<std::int64_t> realized_tokens;  // per view
};

/// Runs every history frame through compress_frame + merge_patches at its
/// scheduled depth and records the realized tokens per view. GenerationFailed
/// if the realized count differs from schedule_budget; InvalidArgument when
/// the history is not exactly T steps or temperature < 1.
GeneratorContext assemble_context(const FrameHistory& history, const compression::CompressionSchedule& schedule,
                                  const compression::CompressorWeights& compressor, const std::string& instruction,
                                  double temperature, const env::EnvState* state = nullptr);

// ---------------------------------------------------------------- generator

struct GeneratorOutput {
  stream::UnifiedOutput unified;
  actions::ActionChunk decoded_chunk;
  std::vector<Image> decoded_previews;  // view-major: v * horizon + h
  int views = 0;
  int horizon = 0;

  const Image& preview(int v, int h) const { return decoded_previews[static_cast<std::size_t>(v) * horizon + h]; }
};

class Generator {
 public:
  virtual ~Generator() = default;
  /// One call returns both the action tokens and all preview tokens.
  virtual GeneratorOutput generate(const GeneratorContext& ctx) = 0;
  virtual int views() const = 0;
  virtual int horizon() const = 0;
};

enum class CorruptionMode { BinSwap, WaypointOffset, Mixed };
std::string to_string(CorruptionMode m);
CorruptionMode corruption_from_string(const std::string& s);

/// Shared, read-only codecs for every generator of a run.
struct CodecBundle {
  std::shared_ptr<const actions::ActionTokenizer> actions;
  std::shared_ptr<const visual::VisualTokenizer> visual;
  stream::VocabLayout layout;
};

/// Normalizer bounds matching the toy action space: dx, dy in +-max_step, grip in +-1.
actions::Normalizer toy_normalizer();

/// Action tokenizer with toy_normalizer bounds and BPE fitted on oracle chunks
/// from `episodes` seeded rollouts.
actions::ActionTokenizer fit_toy_action_codec(int horizon = kDefaultHorizon, int episodes = 200, std::uint64_t seed = 0);

/// Visual tokenizer trained on renders (views 0..views-1) of `states` states:
/// half exploration_states, half oracle_states.
visual::VisualTokenizer train_toy_visual_codec(std::size_t states, int views = kDefaultViews, std::uint64_t seed = 0,
                                              int iterations = 20, visual::VisualTokenizer::TrainReport* report = nullptr);

struct OracleConfig {
  double corruption = 0.0;  // p
  CorruptionMode mode = CorruptionMode::BinSwap;
  env::Vec2 offset{0.15, 0.15};
  double sigma0 = kDefaultSigma0;
  int views = kDefaultViews;
  int horizon = kDefaultHorizon;
  std::uint64_t seed = 0;
};

/// What the last generate call did; experiment bookkeeping, not part of the contract.
struct ProposalTrace {
  bool corrupted = false;
  CorruptionMode mode = CorruptionMode::BinSwap;
  actions::ActionChunk planned;  // before tokenization
  std::vector<env::EnvState> rollout;  // states after each decoded step
};

class OracleGenerator final : public Generator {
 public:
  OracleGenerator(OracleConfig config, CodecBundle codecs);

  GeneratorOutput generate(const GeneratorContext& ctx) override;
  int views() const override { return config_.views; }
  int horizon() const override { return config_.horizon; }

  const ProposalTrace& last_trace() const { return trace_; }
  const OracleConfig& config() const { return config_; }

 private:
  OracleConfig config_;
  CodecBundle codecs_;
  std::mt19937_64 rng_;
  std::vector<visual::VisualTokenizer::Reference> backgrounds_;
  ProposalTrace trace_;
};

/// Replays a decoded chunk from `state` (row t as env::action_from_row).
std::vector<env::EnvState> rollout(const env::EnvState& state, const actions::ActionChunk& chunk);

/// Run-length collapsed transition phases of a rollout.
std::vector<int> phase_text(const env::EnvState& start, const std::vector<env::EnvState>& states);

}  // namespace fvla::gen
