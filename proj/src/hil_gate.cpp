#include "fvla/hil_gate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fvla/error.hpp"
#include "json.hpp"

namespace fvla::hil {

std::string to_string(GateReason r) {
  switch (r) {
    case GateReason::ApprovedFull: return "approved_full";
    case GateReason::ApprovedPrefix: return "approved_prefix";
    case GateReason::Rejected: return "rejected";
  }
  return "unknown";
}

GateDecision GateDecision::approve(int k, int k_max, std::string detail) {
  if (k < 0 || k > k_max)
    throw Error(ErrorCode::InvalidArgument, "k = " + std::to_string(k) + " outside [0, " + std::to_string(k_max) + "]");
  if (k == 0) return reject(std::move(detail));
  return {k, k == k_max ? GateReason::ApprovedFull : GateReason::ApprovedPrefix, std::move(detail)};
}

std::string to_string(VerifierKind v) {
  switch (v) {
    case VerifierKind::Auto: return "auto";
    case VerifierKind::Human: return "human";
    case VerifierKind::None: return "none";
  }
  return "unknown";
}

VerifierKind verifier_from_string(const std::string& s) {
  if (s == "auto") return VerifierKind::Auto;
  if (s == "human") return VerifierKind::Human;
  if (s == "none") return VerifierKind::None;
  throw Error(ErrorCode::InvalidArgument, "unknown gate '" + s + "' (auto, human, none)");
}

void GateConfig::validate() const {
  if (!(tau0 >= 1.0)) throw Error(ErrorCode::InvalidArgument, "tau0 must be >= 1");
  if (!(gamma >= 1.0)) throw Error(ErrorCode::InvalidArgument, "gamma must be >= 1");
  if (!(tau_max >= tau0)) throw Error(ErrorCode::InvalidArgument, "tau_max must be >= tau0");
  if (max_retries < 1) throw Error(ErrorCode::InvalidArgument, "max_retries must be >= 1");
  if (k_max < 1) throw Error(ErrorCode::InvalidArgument, "k_max must be >= 1");
}

double GateConfig::escalate(double tau) const { return std::min(tau_max, gamma * tau); }

// ---------------------------------------------------------------- auto verifier

std::optional<GoalSpec> goal_spec(const env::EnvState& state) {
  GoalSpec goal{state.gripper, state.held, {}};
  for (const auto& o : state.objects)
    if (!o.binned) goal.objects.push_back(o);
  if (goal.objects.empty()) return std::nullopt;
  return goal;
}

std::optional<env::Vec2> locate_gripper(const Image& frame, env::View view, const VerifierParams& params) {
  const int w = frame.width;
  std::vector<float> red(static_cast<std::size_t>(frame.height) * w);
  std::size_t peak = 0;
  for (std::size_t i = 0; i < red.size(); ++i) {
    const float* px = frame.data.data() + i * 3;
    red[i] = px[0] - std::max(px[1], px[2]);
    if (red[i] > red[peak]) peak = i;
  }
  if (red.empty() || red[peak] <= params.min_peak) return std::nullopt;
  const int pr = static_cast<int>(peak) / w;
  const int pc = static_cast<int>(peak) % w;
  const double cut = params.blob_fraction * red[peak];
  double mass = 0.0, sr = 0.0, sc = 0.0;
  for (int r = std::max(0, pr - params.blob_radius); r <= std::min(frame.height - 1, pr + params.blob_radius); ++r)
    for (int c = std::max(0, pc - params.blob_radius); c <= std::min(w - 1, pc + params.blob_radius); ++c)
      if (red[static_cast<std::size_t>(r) * w + c] >= cut) {
        mass += 1.0;
        sr += r + 0.5;
        sc += c + 0.5;
      }
  const double row = sr / mass;
  const double col = sc / mass;
  const double n = env::kFrameSize;
  switch (view) {
    case env::View::Top:
      return env::top_pixel_to_workspace(row, col);
    case env::View::Side:
      // Jaws sit 5-10 px above the contact point.
      return env::Vec2{col / n, (row + 7.5 - 100.0) / 100.0};
    case env::View::Oblique: {
      const double y = (row + 4.5 - 48.0) / 189.0;
      return env::Vec2{0.5 + (col - n / 2) / (n * (0.6 + 0.4 * y)), y};
    }
  }
  return std::nullopt;
}

GateDecision auto_verify(const std::vector<Image>& previews, int views, int horizon,
                         const std::optional<GoalSpec>& goal, int k_max, const VerifierParams& params) {
  if (views < 1 || horizon < 1 || previews.size() != static_cast<std::size_t>(views) * horizon)
    throw Error(ErrorCode::InvalidArgument, "expected views x horizon previews");
  if (k_max < 0 || k_max > horizon) throw Error(ErrorCode::InvalidArgument, "k_max outside [0, horizon]");
  if (k_max == 0) return GateDecision::reject("no steps left");

  std::vector<env::Vec2> track;
  track.reserve(static_cast<std::size_t>(horizon));
  for (int h = 0; h < horizon; ++h) {
    std::optional<env::Vec2> g;
    for (int v = 0; v < views && !g; ++v)
      g = locate_gripper(previews[static_cast<std::size_t>(v) * horizon + h], env::view_from_index(v), params);
    if (!g) return GateDecision::reject(std::string(to_string(ErrorCode::BlobNotFound)) + " at frame " + std::to_string(h));
    track.push_back(*g);
  }

  if (goal) {
    // Phases: reach (distance to the nearest open object), carry (distance of
    // the reached object's bin); entering the right bin places the object and
    // starts the next reach. Regression and progress are measured per phase.
    const auto& objects = goal->objects;
    std::vector<bool> placed(objects.size(), false);
    auto in_any_bin = [](env::Vec2 g) { return env::kTablewareBin.contains(g) || env::kWasteBin.contains(g); };
    int reached = -1;
    for (std::size_t i = 0; i < objects.size(); ++i)
      if (goal->held && objects[i].id == *goal->held) reached = static_cast<int>(i);
    auto potential = [&](env::Vec2 g) {
      if (reached >= 0) return env::distance(g, env::bin_for(objects[static_cast<std::size_t>(reached)].cls).center());
      double near = 0.0;
      bool any = false;
      for (std::size_t i = 0; i < objects.size(); ++i)
        if (!placed[i]) {
          const double d = env::distance(g, objects[i].pos);
          near = any ? std::min(near, d) : d;
          any = true;
        }
      return near;
    };
    double phase_start = potential(goal->gripper);
    int phase_frame = -1;
    double best = phase_start;
    double phi = phase_start;
    env::Vec2 prev = goal->gripper;
    for (int h = 0; h < horizon; ++h) {
      const env::Vec2 g = track[static_cast<std::size_t>(h)];
      if (reached < 0 && in_any_bin(g) && !in_any_bin(prev))
        return GateDecision::reject("empty gripper enters a bin at frame " + std::to_string(h));
      if (reached >= 0) {
        const auto cls = objects[static_cast<std::size_t>(reached)].cls;
        if (env::other_bin(cls).contains(g) && !env::other_bin(cls).contains(prev))
          return GateDecision::reject("wrong bin at frame " + std::to_string(h));
        if (env::bin_for(cls).contains(g)) {
          placed[static_cast<std::size_t>(reached)] = true;
          reached = -1;
          phase_frame = h;
          phase_start = best = potential(g);
        }
      } else {
        for (std::size_t i = 0; i < objects.size(); ++i)
          if (!placed[i] && env::distance(g, objects[i].pos) <= params.reach_radius) {
            reached = static_cast<int>(i);
            phase_frame = h;
            phase_start = best = potential(g);
            break;
          }
      }
      prev = g;
      phi = potential(g);
      // Settling moves (closing in on a reached object, placing inside a bin)
      // restart the phase.
      const bool settling =
          reached < 0 ? in_any_bin(g)
                      : env::distance(g, objects[static_cast<std::size_t>(reached)].pos) <= params.reach_radius;
      if (settling) {
        best = phase_start = std::max(best, phi);
        phase_frame = h;
      }
      if (phi > best + params.regression_tol) return GateDecision::reject("regression at frame " + std::to_string(h));
      best = std::min(best, phi);
    }
    // Progress over the last phase, scaled to the frames it had.
    const double frames_left = horizon - 1 - phase_frame;
    const double required = std::min({phase_start, params.min_progress, params.progress_per_frame * frames_left});
    if (phase_start - phi < required - params.progress_tol) return GateDecision::reject("no progress");
  }

  int k = k_max;
  for (int h = 0; h < k_max; ++h) {
    const env::Vec2 g = track[static_cast<std::size_t>(h)];
    const double lo = params.margin, hi = 1.0 - params.margin;
    if (g.x < lo || g.x > hi || g.y < lo || g.y > hi) {
      k = h;
      break;
    }
  }
  if (k == 0) return GateDecision::reject("margin at frame 0");
  return GateDecision::approve(k, k_max, k < k_max ? "margin at frame " + std::to_string(k) : "");
}

// ---------------------------------------------------------------- verifiers

GateDecision AutoVerifier::verify(const ProposalView& p) {
  if (!p.output || !p.state) throw Error(ErrorCode::InvalidArgument, "proposal without output or state");
  return auto_verify(p.output->decoded_previews, p.output->views, p.output->horizon, goal_spec(*p.state), p.k_max,
                     params_);
}

GateDecision OpenLoopVerifier::verify(const ProposalView& p) {
  return GateDecision::approve(p.k_max, p.k_max, "open loop");
}

void DecisionChannel::push(Decision d) {
  {
    std::lock_guard lock(mu_);
    if (closed_) return;
    queue_.push_back(d);
  }
  cv_.notify_one();
}

void DecisionChannel::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

bool DecisionChannel::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

DecisionChannel::Status DecisionChannel::pop(Decision& out, std::chrono::steady_clock::time_point deadline) {
  std::unique_lock lock(mu_);
  if (!cv_.wait_until(lock, deadline, [&] { return closed_ || !queue_.empty(); })) return Status::Timeout;
  if (closed_) return Status::Closed;
  out = queue_.front();
  queue_.pop_front();
  return Status::Ok;
}

GateDecision HumanVerifier::verify(const ProposalView& p) {
  link_.send_proposal(p);
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  Decision d;
  while (true) {
    switch (link_.decisions().pop(d, deadline)) {
      case DecisionChannel::Status::Closed:
        throw Error(ErrorCode::SessionClosed, "operator session closed while proposal " + std::to_string(p.proposal_id) +
                                                  " was pending");
      case DecisionChannel::Status::Timeout:
        return GateDecision::reject(std::string(to_string(ErrorCode::DecisionTimeout)));
      case DecisionChannel::Status::Ok:
        break;
    }
    if (d.proposal_id != p.proposal_id) {
      link_.send_error(d.proposal_id, "stale proposal_id " + std::to_string(d.proposal_id) + ", pending is " +
                                          std::to_string(p.proposal_id));
      continue;
    }
    if (d.k < 0 || d.k > p.k_max) {
      link_.send_error(d.proposal_id, "k = " + std::to_string(d.k) + " outside [0, " + std::to_string(p.k_max) + "]");
      continue;
    }
    return GateDecision::approve(d.k, p.k_max, "operator");
  }
}

// ---------------------------------------------------------------- state machine

GateStepResult gate_step(const env::EnvState& state, gen::Generator& generator, Verifier& verifier,
                         const GateConfig& config, const gen::GeneratorContext& ctx, int proposal_id, int k_max) {
  config.validate();
  int k_eff = std::min(config.k_max, generator.horizon());
  if (k_max >= 0) k_eff = std::min(k_eff, k_max);

  GateStepResult result;
  result.state = state;
  gen::GeneratorOutput output;
  try {
    output = generator.generate(ctx);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::GenerationFailed) throw;
    result.decision = GateDecision::reject(e.what());
    result.next_tau = config.escalate(ctx.temperature);
    return result;
  }
  result.decision = verifier.verify({proposal_id, &output, &state, k_eff, ctx.temperature});
  const int k = result.decision.k;
  if (k < 0 || k > k_eff)
    throw Error(ErrorCode::InvalidArgument, "verifier returned k = " + std::to_string(k) + " outside [0, " +
                                                std::to_string(k_eff) + "]");
  if (k == 0) {
    result.next_tau = config.escalate(ctx.temperature);
    return result;
  }
  result.executed.reserve(static_cast<std::size_t>(k));
  for (int t = 0; t < k; ++t) {
    result.state = env::step(result.state, env::action_from_row(output.decoded_chunk, t));
    result.executed.push_back(result.state);
  }
  result.next_tau = config.tau0;
  return result;
}

LoopResources default_loop_resources(int views) {
  auto extractor = std::make_shared<const gen::PatchStatsExtractor>();
  auto compressor = std::make_shared<const compression::CompressorWeights>(
      compression::CompressorWeights::random(0, extractor->channels(), extractor->channels()));
  return {std::move(extractor), std::move(compressor), views};
}

namespace {

std::vector<Image> render_views(const env::EnvState& state, int views) {
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) out.push_back(env::render(state, v));
  return out;
}

}  // namespace

EpisodeResult run_closed_loop(const EpisodeConfig& episode, gen::Generator& generator, Verifier& verifier,
                              const GateConfig& config, const LoopResources& resources, const EpisodeHooks& hooks) {
  config.validate();
  if (!resources.extractor || !resources.compressor) throw Error(ErrorCode::InvalidArgument, "incomplete loop resources");
  if (resources.views != generator.views())
    throw Error(ErrorCode::InvalidArgument, "generator and loop disagree on the number of views");
  if (episode.max_env_steps < 0) throw Error(ErrorCode::InvalidArgument, "max_env_steps must be >= 0");

  const auto schedule = compression::make_schedule(episode.history, episode.allocation);
  env::EnvState state = env::reset(episode.seed, episode.objects);
  gen::FrameHistory history(episode.history, resources.views, resources.extractor);
  history.fill(render_views(state, resources.views));

  EpisodeResult result;
  double tau = config.tau0;
  int consecutive = 0;
  if (hooks.on_state) hooks.on_state(state, result, tau);
  while (true) {
    if (env::success(state)) break;
    if (env::unrecoverable(state)) {
      result.unrecoverable = true;
      break;
    }
    if (result.env_steps >= episode.max_env_steps) break;

    const auto ctx = gen::assemble_context(history, schedule, *resources.compressor, episode.instruction, tau, &state);
    const int id = result.proposals++;
    auto step = gate_step(state, generator, verifier, config, ctx, id, episode.max_env_steps - result.env_steps);
    result.decisions.push_back({id, tau, step.decision});
    tau = step.next_tau;
    if (step.decision.k == 0) {
      ++result.rejections;
      if (++consecutive >= config.max_retries) {
        ++result.resample_aborts;
        if (hooks.on_state) hooks.on_state(state, result, tau);
        break;
      }
    } else {
      consecutive = 0;
      for (const auto& s : step.executed) history.push(render_views(s, resources.views));
      result.env_steps += step.decision.k;
      state = std::move(step.state);
    }
    if (hooks.on_state) hooks.on_state(state, result, tau);
  }
  result.success = env::success(state);
  result.final_state = std::move(state);
  return result;
}

// ---------------------------------------------------------------- experiments

std::uint64_t episode_seed(int seed, int episode) {
  return static_cast<std::uint64_t>(seed) * 1000003ULL + static_cast<std::uint64_t>(episode);
}

std::vector<EvalRow> run_eval(const EvalConfig& config, const gen::CodecBundle& codecs, const LoopResources& resources,
                              const std::function<void(const EvalRow&)>& progress) {
  config.gate_config.validate();
  if (config.gate == VerifierKind::Human)
    throw Error(ErrorCode::InvalidArgument, "batch evaluation runs with the auto gate or none");
  if (config.episodes < 0) throw Error(ErrorCode::InvalidArgument, "episodes must be >= 0");
  std::vector<EvalRow> rows;
  rows.reserve(config.seeds.size() * static_cast<std::size_t>(config.episodes));
  for (int seed : config.seeds)
    for (int e = 0; e < config.episodes; ++e) {
      EpisodeConfig ep = config.episode;
      ep.seed = episode_seed(seed, e);
      gen::OracleConfig oc;
      oc.corruption = config.corruption;
      oc.mode = config.mode;
      oc.views = resources.views;
      oc.horizon = codecs.actions ? codecs.actions->horizon() : gen::kDefaultHorizon;
      oc.seed = ep.seed ^ 0x9e3779b97f4a7c15ULL;
      gen::OracleGenerator generator(oc, codecs);
      std::unique_ptr<Verifier> verifier;
      if (config.gate == VerifierKind::Auto) verifier = std::make_unique<AutoVerifier>();
      else verifier = std::make_unique<OpenLoopVerifier>();
      rows.push_back({seed, e, run_closed_loop(ep, generator, *verifier, config.gate_config, resources)});
      if (progress) progress(rows.back());
    }
  return rows;
}

std::string result_line(const EvalRow& row) {
  nlohmann::ordered_json j;
  j["seed"] = row.seed;
  j["episode"] = row.episode;
  j["success"] = row.result.success;
  j["env_steps"] = row.result.env_steps;
  j["proposals"] = row.result.proposals;
  j["rejections"] = row.result.rejections;
  j["aborts"] = row.result.resample_aborts;
  return j.dump();
}

void write_results(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& row : rows) os << result_line(row) << '\n';
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

EvalSummary summarize(const std::vector<EvalRow>& rows, std::optional<int> seed) {
  EvalSummary s;
  for (const auto& row : rows) {
    if (seed && row.seed != *seed) continue;
    ++s.episodes;
    s.successes += row.result.success;
    s.aborts += row.result.resample_aborts;
    s.env_steps += row.result.env_steps;
  }
  return s;
}

}  // namespace fvla::hil
