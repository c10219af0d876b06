#pragma once

// Execution gating: a verifier picks how many steps of each proposed chunk
// run (k in [0, k_max]); rejections resample at escalating temperature.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fvla/compression.hpp"
#include "fvla/policy_gen.hpp"
#include "fvla/toy_env.hpp"

namespace fvla::hil {

enum class GateReason { ApprovedFull, ApprovedPrefix, Rejected };
std::string to_string(GateReason r);

struct GateDecision {
  int k = 0;
  GateReason reason = GateReason::Rejected;
  std::string detail;

  static GateDecision reject(std::string detail) { return {0, GateReason::Rejected, std::move(detail)}; }
  /// approved_full when k == k_max, approved_prefix below it, rejected at 0.
  static GateDecision approve(int k, int k_max, std::string detail = {});
};

enum class VerifierKind { Auto, Human, None };
std::string to_string(VerifierKind v);
VerifierKind verifier_from_string(const std::string& s);

struct GateConfig {
  double tau0 = 1.0;
  double gamma = 1.5;
  double tau_max = 4.0;
  int max_retries = 5;
  int k_max = gen::kDefaultHorizon;
  VerifierKind verifier = VerifierKind::Auto;

  void validate() const;
  /// Temperature after a rejection at tau.
  double escalate(double tau) const;
};

// ---------------------------------------------------------------- auto verifier

/// What the verifier is told about the task at proposal time: where the
/// gripper is, what it holds, and the objects still to be binned.
struct GoalSpec {
  env::Vec2 gripper;
  std::optional<int> held;
  std::vector<env::Object> objects;  // not yet binned, held one included
};

/// nullopt once every object is binned.
std::optional<GoalSpec> goal_spec(const env::EnvState& state);

struct VerifierParams {
  double margin = 0.05;          // gripper must stay inside [margin, 1 - margin]^2
  double reach_radius = 0.06;    // gripper this close to an object counts as reaching it
  double regression_tol = 0.05;  // allowed rise of the task potential above its running minimum
  double min_progress = 0.15;    // required potential drop over a phase (capped by the potential)
  double progress_per_frame = 0.03;  // caps the required drop for phases entered late in the chunk
  double progress_tol = 0.02;
  double min_peak = 0.25;        // redness r - max(g, b) the strongest gripper pixel must exceed
  double blob_fraction = 0.5;    // blob pixels are at least this fraction of the peak
  int blob_radius = 10;          // px around the peak
};

/// Gripper centre in workspace units from a decoded frame: centroid of the
/// red blob around the reddest pixel, or nullopt when nothing is red enough.
std::optional<env::Vec2> locate_gripper(const Image& frame, env::View view, const VerifierParams& params = {});

/// Color-blob analysis of the decoded previews (view-major, views x horizon).
/// The gripper is tracked per frame against a task potential: distance to the
/// nearest object plus that object's distance to its bin, then, once an object
/// is reached, distance to its bin. Rejects when an empty gripper enters a bin,
/// a reached object heads into the other bin, the potential regresses, or the
/// chunk makes no progress; otherwise approves the prefix before the first
/// frame whose gripper leaves the workspace margin, capped at k_max. A frame
/// with no gripper blob in any view rejects with a BlobNotFound detail.
GateDecision auto_verify(const std::vector<Image>& previews, int views, int horizon,
                         const std::optional<GoalSpec>& goal, int k_max, const VerifierParams& params = {});

// ---------------------------------------------------------------- verifiers

struct ProposalView {
  int proposal_id = 0;
  const gen::GeneratorOutput* output = nullptr;
  const env::EnvState* state = nullptr;
  int k_max = 0;
  double temperature = 1.0;
};

class Verifier {
 public:
  virtual ~Verifier() = default;
  virtual GateDecision verify(const ProposalView& proposal) = 0;
};

class AutoVerifier final : public Verifier {
 public:
  explicit AutoVerifier(VerifierParams params = {}) : params_(params) {}
  GateDecision verify(const ProposalView& p) override;

 private:
  VerifierParams params_;
};

/// Autonomous execution: every chunk runs to k_max.
class OpenLoopVerifier final : public Verifier {
 public:
  GateDecision verify(const ProposalView& p) override;
};

/// Operator decision as received from the transport.
struct Decision {
  int proposal_id = 0;
  int k = 0;
};

/// Single-producer single-consumer hand-off from the transport thread to the
/// episode thread.
class DecisionChannel {
 public:
  void push(Decision d);
  /// Wakes the consumer; later pops report the closure.
  void close();
  bool closed() const;

  enum class Status { Ok, Timeout, Closed };
  /// Blocks until a decision arrives, the deadline passes, or the channel closes.
  Status pop(Decision& out, std::chrono::steady_clock::time_point deadline);

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Decision> queue_;
  bool closed_ = false;
};

/// Operator side of a session as seen by the gate.
class OperatorLink {
 public:
  virtual ~OperatorLink() = default;
  virtual void send_proposal(const ProposalView& proposal) = 0;
  virtual void send_error(int proposal_id, const std::string& message) = 0;
  virtual DecisionChannel& decisions() = 0;
};

/// Sends each proposal to the operator and waits for {proposal_id, k}. Stale
/// ids and out-of-range k get an error reply and the decision is re-requested;
/// the timeout rejects. A closed channel raises SessionClosed.
class HumanVerifier final : public Verifier {
 public:
  HumanVerifier(OperatorLink& link, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : link_(link), timeout_(timeout) {}
  GateDecision verify(const ProposalView& p) override;

 private:
  OperatorLink& link_;
  std::chrono::milliseconds timeout_;
};

// ---------------------------------------------------------------- state machine

struct GateStepResult {
  env::EnvState state;
  GateDecision decision;
  double next_tau = 1.0;
  std::vector<env::EnvState> executed;  // state after each executed step
};

/// One generate call, one verification, then exactly k steps of the decoded
/// chunk. k == 0 leaves the state untouched and escalates the temperature;
/// k >= 1 resets it to tau0.
GateStepResult gate_step(const env::EnvState& state, gen::Generator& generator, Verifier& verifier,
                         const GateConfig& config, const gen::GeneratorContext& ctx, int proposal_id = 0,
                         int k_max = -1);

struct EpisodeConfig {
  std::uint64_t seed = 0;
  int objects = 3;
  int max_env_steps = 200;
  int history = gen::kDefaultHistory;
  compression::Allocation allocation{8, 6, 2};
  std::string instruction = "put tableware in the white bin and waste in the brown bin";
};

struct ProposalRecord {
  int proposal_id = 0;
  double temperature = 1.0;
  GateDecision decision;
};

struct EpisodeResult {
  bool success = false;
  int env_steps = 0;
  int proposals = 0;
  int rejections = 0;
  int resample_aborts = 0;
  bool unrecoverable = false;  // ended early: an object sits in the wrong bin
  std::vector<ProposalRecord> decisions;
  env::EnvState final_state;
};

/// Observer hooks for live sessions.
struct EpisodeHooks {
  std::function<void(const env::EnvState&, const EpisodeResult&, double tau)> on_state;
};

/// Shared pieces every episode needs besides the generator and verifier.
struct LoopResources {
  std::shared_ptr<const gen::FeatureExtractor> extractor;
  std::shared_ptr<const compression::CompressorWeights> compressor;
  int views = gen::kDefaultViews;
};
LoopResources default_loop_resources(int views = gen::kDefaultViews);

/// Gate steps until success, max_env_steps, an unrecoverable state, or
/// max_retries consecutive rejections (a resample abort).
EpisodeResult run_closed_loop(const EpisodeConfig& episode, gen::Generator& generator, Verifier& verifier,
                              const GateConfig& config, const LoopResources& resources,
                              const EpisodeHooks& hooks = {});

// ---------------------------------------------------------------- experiments

struct EvalConfig {
  VerifierKind gate = VerifierKind::Auto;
  double corruption = 0.3;
  gen::CorruptionMode mode = gen::CorruptionMode::BinSwap;
  std::vector<int> seeds{0};
  int episodes = 50;
  EpisodeConfig episode;
  GateConfig gate_config;
};

struct EvalRow {
  int seed = 0;
  int episode = 0;
  EpisodeResult result;
};

/// Environment seed of episode e in batch s; paired runs share it.
std::uint64_t episode_seed(int seed, int episode);

/// Runs every (seed, episode) pair with an oracle generator and the
/// configured verifier (Auto or None).
std::vector<EvalRow> run_eval(const EvalConfig& config, const gen::CodecBundle& codecs,
                              const LoopResources& resources,
                              const std::function<void(const EvalRow&)>& progress = {});

/// {seed, episode, success, env_steps, proposals, rejections, aborts} per line.
std::string result_line(const EvalRow& row);
void write_results(const std::filesystem::path& path, const std::vector<EvalRow>& rows);

struct EvalSummary {
  int episodes = 0;
  int successes = 0;
  int aborts = 0;
  long env_steps = 0;
  double success_rate() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
};
EvalSummary summarize(const std::vector<EvalRow>& rows, std::optional<int> seed = std::nullopt);

}  // namespace fvla::hil
