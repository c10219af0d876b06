#pragma once

// Episode store (line-delimited JSON plus PNG frames) and sliding-window
// training samples with edge replication.
//
// Timing convention: frame t is the observation after actions[t] was applied;
// actions[0] is zero motion. A sample anchored at t sees frames t-T+1..t and
// predicts actions t+1..t+H_a together with frames t+1..t+H_a.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fvla/action_codec.hpp"
#include "fvla/compression.hpp"
#include "fvla/image.hpp"
#include "fvla/unified_stream.hpp"
#include "fvla/visual_codec.hpp"

namespace fvla::data {

struct EpisodeRecord {
  std::string episode_id;
  std::string instruction;
  int views = 1;
  int length = 0;
  /// Directory holding v<view>_t<step>.png; relative paths resolve against
  /// the episodes file's directory.
  std::filesystem::path frame_dir;
  std::vector<std::vector<double>> actions;  // length x D_a
  /// Optional per-step transition text ids (empty when absent).
  std::vector<int> phases;

  int action_dims() const { return actions.empty() ? 0 : static_cast<int>(actions.front().size()); }
  friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

/// File name of frame (view, t) inside frame_dir.
std::string frame_name(int view, int t);
std::filesystem::path frame_path(const EpisodeRecord& ep, int view, int t);

/// Checks the record invariants; SchemaError with `line` as position.
void validate(const EpisodeRecord& ep, std::size_t line = 0);

/// Writes one JSON object per line. frame_dir is stored as given.
void write_episodes(const std::filesystem::path& path, const std::vector<EpisodeRecord>& episodes);

/// SchemaError (1-based line) on malformed records; MissingFrameFile when
/// `check_frames` and a frame PNG is absent. frame_dir is resolved to a path
/// usable from the working directory.
std::vector<EpisodeRecord> load_episodes(const std::filesystem::path& path, bool check_frames = true);

struct FrameRef {
  int view = 0;
  int t = 0;         // source step after replication
  bool pad = false;  // replicated edge frame
  friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

struct WindowSample {
  std::string episode_id;
  std::string instruction;
  int anchor = 0;
  int history = 0;  // T
  int horizon = 0;  // H_a
  int views = 0;
  std::vector<FrameRef> inputs;   // time-major: inputs[i * views + v], oldest first
  std::vector<FrameRef> targets;  // targets[h * views + v]
  actions::ActionChunk target_actions;
  std::vector<bool> action_pad;   // per target step

  const FrameRef& input(int i, int v) const { return inputs[static_cast<std::size_t>(i) * views + v]; }
  const FrameRef& target(int h, int v) const { return targets[static_cast<std::size_t>(h) * views + v]; }
};

/// One sample per anchor t in [0, length) stepping by `stride`.
std::vector<WindowSample> window_samples(const EpisodeRecord& ep, int history = 16, int horizon = 16,
                                         int stride = 1);

struct Codecs {
  const actions::ActionTokenizer* actions = nullptr;
  const visual::VisualTokenizer* visual = nullptr;
};

struct TrainingRecord {
  stream::StreamFile label;
  std::string index_json;  // input frame refs and their compression depths
};

/// Label stream: transition text, encoded target chunk, V x H_a encoded target
/// frames (view-major). Input frames are referenced, not encoded.
TrainingRecord build_training_record(const WindowSample& sample, const EpisodeRecord& ep, const Codecs& codecs,
                                     const stream::VocabLayout& layout,
                                     const compression::CompressionSchedule& schedule);

/// Writes <episode_id>_<anchor>.fvus and .json into `dir`; returns the .fvus path.
std::filesystem::path write_training_record(const std::filesystem::path& dir, const WindowSample& sample,
                                            const TrainingRecord& record);

/// Run-length collapsed phase ids of the target steps.
std::vector<int> transition_text(const EpisodeRecord& ep, const WindowSample& sample);

struct DumpConfig {
  int episodes = 50;
  std::uint64_t seed = 0;
  int views = 2;
  int objects = 3;
  int max_steps = 200;
};

/// Pure-oracle toy episodes: frames under dir/frames/<id>/, records in dir/episodes.jsonl.
std::vector<EpisodeRecord> dump_toy_episodes(const std::filesystem::path& dir, const DumpConfig& config);

}  // namespace fvla::data
