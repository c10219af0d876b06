#include "fvla/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "fvla/error.hpp"
#include "fvla/toy_env.hpp"
#include "json.hpp"

namespace fvla::data {

using nlohmann::json;
using nlohmann::ordered_json;

std::string frame_name(int view, int t) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "v%d_t%05d.png", view, t);
  return buf;
}

std::filesystem::path frame_path(const EpisodeRecord& ep, int view, int t) { return ep.frame_dir / frame_name(view, t); }

void validate(const EpisodeRecord& ep, std::size_t line) {
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::SchemaError, "episode '" + ep.episode_id + "': " + msg, line);
  };
  if (ep.episode_id.empty()) fail("empty episode_id");
  if (ep.views < 1) fail("views must be >= 1");
  if (ep.length < 1) fail("length must be >= 1");
  if (ep.actions.size() != static_cast<std::size_t>(ep.length))
    fail("actions has " + std::to_string(ep.actions.size()) + " rows for length " + std::to_string(ep.length));
  const std::size_t dims = ep.actions.front().size();
  if (dims == 0) fail("actions have no dimensions");
  for (const auto& row : ep.actions) {
    if (row.size() != dims) fail("action rows differ in width");
    for (double x : row)
      if (!std::isfinite(x)) fail("non-finite action value");
  }
  if (!ep.phases.empty() && ep.phases.size() != static_cast<std::size_t>(ep.length))
    fail("phases must have one entry per step");
}

void write_episodes(const std::filesystem::path& path, const std::vector<EpisodeRecord>& episodes) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& ep : episodes) {
    validate(ep);
    ordered_json j;
    j["episode_id"] = ep.episode_id;
    j["instruction"] = ep.instruction;
    j["views"] = ep.views;
    j["length"] = ep.length;
    j["frame_dir"] = ep.frame_dir.generic_string();
    j["actions"] = ep.actions;
    if (!ep.phases.empty()) j["phases"] = ep.phases;
    os << j.dump() << '\n';
  }
  if (!os) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

namespace {

EpisodeRecord parse_record(const std::string& text, std::size_t line) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaError, std::string("invalid JSON: ") + e.what(), line);
  }
  auto fail = [&](const std::string& msg) { throw Error(ErrorCode::SchemaError, msg, line); };
  if (!j.is_object()) fail("record is not a JSON object");
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) fail(std::string("missing field '") + key + "'");
    return j.at(key);
  };
  EpisodeRecord ep;
  const auto& id = need("episode_id");
  const auto& instruction = need("instruction");
  const auto& views = need("views");
  const auto& length = need("length");
  const auto& frame_dir = need("frame_dir");
  const auto& actions = need("actions");
  if (!id.is_string()) fail("episode_id must be a string");
  if (!instruction.is_string()) fail("instruction must be a string");
  if (!views.is_number_integer()) fail("views must be an integer");
  if (!length.is_number_integer()) fail("length must be an integer");
  if (!frame_dir.is_string()) fail("frame_dir must be a string");
  if (!actions.is_array()) fail("actions must be an array");
  ep.episode_id = id.get<std::string>();
  ep.instruction = instruction.get<std::string>();
  ep.views = views.get<int>();
  ep.length = length.get<int>();
  ep.frame_dir = frame_dir.get<std::string>();
  for (const auto& row : actions) {
    if (!row.is_array()) fail("each action must be an array of numbers");
    auto& out = ep.actions.emplace_back();
    for (const auto& x : row) {
      if (!x.is_number()) fail("each action must be an array of numbers");
      out.push_back(x.get<double>());
    }
  }
  if (j.contains("phases")) {
    const auto& phases = j.at("phases");
    if (!phases.is_array()) fail("phases must be an array");
    for (const auto& p : phases) {
      if (!p.is_number_integer()) fail("phases must be integers");
      ep.phases.push_back(p.get<int>());
    }
  }
  validate(ep, line);
  return ep;
}

}  // namespace

std::vector<EpisodeRecord> load_episodes(const std::filesystem::path& path, bool check_frames) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<EpisodeRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    EpisodeRecord ep = parse_record(text, line);
    if (ep.frame_dir.is_relative()) ep.frame_dir = path.parent_path() / ep.frame_dir;
    if (check_frames) {
      for (int t = 0; t < ep.length; ++t)
        for (int v = 0; v < ep.views; ++v)
          if (!std::filesystem::exists(frame_path(ep, v, t)))
            throw Error(ErrorCode::MissingFrameFile, frame_path(ep, v, t).string(), line);
    }
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<WindowSample> window_samples(const EpisodeRecord& ep, int history, int horizon, int stride) {
  validate(ep);
  if (history < 1 || horizon < 1 || stride < 1)
    throw Error(ErrorCode::InvalidArgument, "history, horizon and stride must be >= 1");
  const int dims = ep.action_dims();
  std::vector<WindowSample> out;
  for (int t = 0; t < ep.length; t += stride) {
    WindowSample s;
    s.episode_id = ep.episode_id;
    s.instruction = ep.instruction;
    s.anchor = t;
    s.history = history;
    s.horizon = horizon;
    s.views = ep.views;
    for (int i = 0; i < history; ++i) {
      const int src = t - history + 1 + i;
      for (int v = 0; v < ep.views; ++v) s.inputs.push_back({v, std::max(src, 0), src < 0});
    }
    s.target_actions = actions::ActionChunk(horizon, dims);
    for (int h = 0; h < horizon; ++h) {
      const int src = t + 1 + h;
      const bool pad = src >= ep.length;
      for (int v = 0; v < ep.views; ++v) s.targets.push_back({v, std::min(src, ep.length - 1), pad});
      s.action_pad.push_back(pad);
      if (!pad)
        for (int d = 0; d < dims; ++d) s.target_actions.at(h, d) = ep.actions[static_cast<std::size_t>(src)][static_cast<std::size_t>(d)];
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<int> transition_text(const EpisodeRecord& ep, const WindowSample& sample) {
  std::vector<int> out;
  if (ep.phases.empty()) return out;
  for (int h = 0; h < sample.horizon; ++h) {
    if (sample.action_pad[static_cast<std::size_t>(h)]) break;
    const int p = ep.phases[static_cast<std::size_t>(sample.anchor + 1 + h)];
    if (out.empty() || out.back() != p) out.push_back(p);
  }
  return out;
}

TrainingRecord build_training_record(const WindowSample& sample, const EpisodeRecord& ep, const Codecs& codecs,
                                     const stream::VocabLayout& layout,
                                     const compression::CompressionSchedule& schedule) {
  if (!codecs.actions || !codecs.visual) throw Error(ErrorCode::InvalidArgument, "both codecs are required");
  if (sample.episode_id != ep.episode_id || sample.views != ep.views)
    throw Error(ErrorCode::InvalidArgument, "sample does not belong to episode " + ep.episode_id);
  if (schedule.horizon != sample.history)
    throw Error(ErrorCode::InvalidArgument, "schedule covers " + std::to_string(schedule.horizon) +
                                                " frames but the window has " + std::to_string(sample.history));

  stream::UnifiedOutput out;
  out.text_ids = transition_text(ep, sample);
  out.actions = codecs.actions->encode(sample.target_actions);
  std::map<std::pair<int, int>, visual::VisualTokenSeq> encoded;
  out.frames.reserve(static_cast<std::size_t>(sample.views * sample.horizon));
  for (int v = 0; v < sample.views; ++v)
    for (int h = 0; h < sample.horizon; ++h) {
      const FrameRef& ref = sample.target(h, v);
      auto it = encoded.find({v, ref.t});
      if (it == encoded.end())
        it = encoded.emplace(std::pair{v, ref.t}, codecs.visual->encode(load_png(frame_path(ep, v, ref.t)))).first;
      out.frames.push_back(it->second);
    }

  TrainingRecord rec;
  const stream::StreamShape shape{sample.views, sample.horizon};
  rec.label = {layout, shape, stream::serialize_output(out, layout, shape)};

  ordered_json idx;
  idx["episode_id"] = sample.episode_id;
  idx["anchor"] = sample.anchor;
  idx["instruction"] = sample.instruction;
  idx["T"] = sample.history;
  idx["Ha"] = sample.horizon;
  idx["views"] = sample.views;
  idx["allocation"] = {schedule.allocation.deep, schedule.allocation.mid, schedule.allocation.full};
  idx["depths"] = schedule.depths;
  ordered_json inputs = ordered_json::array();
  for (int i = 0; i < sample.history; ++i)
    for (int v = 0; v < sample.views; ++v) {
      const FrameRef& r = sample.input(i, v);
      inputs.push_back({{"view", v},
                        {"t", r.t},
                        {"pad", r.pad},
                        {"depth", schedule.depths[static_cast<std::size_t>(i)]},
                        {"path", frame_path(ep, v, r.t).generic_string()}});
    }
  idx["inputs"] = std::move(inputs);
  ordered_json targets = ordered_json::array();
  for (int h = 0; h < sample.horizon; ++h)
    for (int v = 0; v < sample.views; ++v) {
      const FrameRef& r = sample.target(h, v);
      targets.push_back({{"view", v}, {"t", r.t}, {"pad", r.pad}});
    }
  idx["targets"] = std::move(targets);
  idx["action_pad"] = sample.action_pad;
  rec.index_json = idx.dump(1) + "\n";
  return rec;
}

std::filesystem::path write_training_record(const std::filesystem::path& dir, const WindowSample& sample,
                                            const TrainingRecord& record) {
  std::filesystem::create_directories(dir);
  char stem[32];
  std::snprintf(stem, sizeof stem, "_%05d", sample.anchor);
  const auto base = dir / (sample.episode_id + stem);
  auto fvus = base;
  fvus += ".fvus";
  auto idx = base;
  idx += ".json";
  stream::save_stream(fvus, record.label);
  std::ofstream os(idx);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + idx.string());
  os << record.index_json;
  return fvus;
}

std::vector<EpisodeRecord> dump_toy_episodes(const std::filesystem::path& dir, const DumpConfig& config) {
  if (config.episodes < 0 || config.views < 1 || config.views > 3 || config.max_steps < 1)
    throw Error(ErrorCode::InvalidArgument, "bad dump configuration");
  std::vector<EpisodeRecord> out;
  for (int e = 0; e < config.episodes; ++e) {
    char id[32];
    std::snprintf(id, sizeof id, "ep_%05d", e);
    EpisodeRecord ep;
    ep.episode_id = id;
    ep.instruction = "put tableware in the white bin and waste in the brown bin";
    ep.views = config.views;
    ep.frame_dir = std::filesystem::path("frames") / id;
    const auto abs_dir = dir / ep.frame_dir;
    std::filesystem::create_directories(abs_dir);

    env::EnvState s = env::reset(config.seed + static_cast<std::uint64_t>(e), config.objects);
    auto record_frame = [&](const env::EnvState& st, int t) {
      for (int v = 0; v < config.views; ++v) save_png(env::render(st, v), abs_dir / frame_name(v, t));
    };
    record_frame(s, 0);
    ep.actions.push_back(std::vector<double>(env::kActionDims, 0.0));
    ep.phases.push_back(static_cast<int>(env::Phase::Idle));
    while (!env::success(s) && s.step_count < config.max_steps) {
      const env::EnvAction a = env::oracle_action(s);
      const env::EnvState next = env::step(s, a);
      ep.actions.push_back({a.dx, a.dy, static_cast<double>(static_cast<int>(a.grip))});
      ep.phases.push_back(static_cast<int>(env::transition_phase(s, next)));
      s = next;
      record_frame(s, s.step_count);
    }
    ep.length = static_cast<int>(ep.actions.size());
    out.push_back(std::move(ep));
  }
  write_episodes(dir / "episodes.jsonl", out);
  for (auto& ep : out) ep.frame_dir = dir / ep.frame_dir;
  return out;
}

}  // namespace fvla::data
