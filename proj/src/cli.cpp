#include "fvla/cli.hpp"

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include <pthread.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "fvla/compression.hpp"
#include "fvla/dataset.hpp"
#include "fvla/error.hpp"
#include "fvla/gateway.hpp"
#include "fvla/hil_gate.hpp"
#include "fvla/policy_gen.hpp"

namespace fvla {

namespace {

using json = nlohmann::ordered_json;

/// Bad flag value detected after parsing; exits with 2 like a parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_ints(const std::string& text, const std::string& flag) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<int> out;
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + tok + "' is not an integer");
    }
  }
  return out;
}

/// "0..19" or "0,3,5".
std::vector<int> parse_seeds(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) {
    auto seeds = parse_ints(text, "--seeds");
    if (seeds.empty()) throw UsageError("--seeds: empty seed list");
    return seeds;
  }
  const auto lo = parse_ints(text.substr(0, dots), "--seeds");
  const auto hi = parse_ints(text.substr(dots + 2), "--seeds");
  if (lo.size() != 1 || hi.size() != 1 || hi[0] < lo[0]) throw UsageError("--seeds: bad range '" + text + "'");
  std::vector<int> seeds;
  for (int s = lo[0]; s <= hi[0]; ++s) seeds.push_back(s);
  return seeds;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

/// One chunk row per line, whitespace-separated values.
actions::ActionChunk read_chunk(const std::filesystem::path& path) {
  std::istringstream is(read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof()) throw Error(ErrorCode::FormatError, "bad number in chunk file", n);
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size())
      throw Error(ErrorCode::FormatError, "ragged chunk row", n);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(ErrorCode::FormatError, "empty chunk file");
  actions::ActionChunk chunk(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (int t = 0; t < chunk.horizon; ++t)
    for (int d = 0; d < chunk.dims; ++d) chunk.at(t, d) = rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)];
  return chunk;
}

std::string chunk_text(const actions::ActionChunk& chunk) {
  std::ostringstream os;
  os.precision(17);
  for (int t = 0; t < chunk.horizon; ++t) {
    for (int d = 0; d < chunk.dims; ++d) os << (d ? " " : "") << chunk.at(t, d);
    os << '\n';
  }
  return os.str();
}

std::string ints_text(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

std::shared_ptr<const actions::ActionTokenizer> action_codec(const std::string& dir) {
  if (!dir.empty()) return std::make_shared<const actions::ActionTokenizer>(actions::ActionTokenizer::load(dir));
  return std::make_shared<const actions::ActionTokenizer>(gen::fit_toy_action_codec());
}

std::shared_ptr<const visual::VisualTokenizer> visual_codec(const std::string& dir, std::size_t train_states,
                                                            int views, std::ostream& err) {
  if (!dir.empty()) return std::make_shared<const visual::VisualTokenizer>(visual::VisualTokenizer::load(dir));
  err << "training the toy visual codec on " << train_states
      << " states; save one with `visual train-codebook --toy-states` and pass --visual-codec to skip this\n";
  return std::make_shared<const visual::VisualTokenizer>(gen::train_toy_visual_codec(train_states, views));
}

struct VisualFlags {
  std::string dir;
  std::size_t train_states = 5000;

  void add(CLI::App* app) {
    app->add_option("--visual-codec", dir, "Visual codec directory (codebook.fvcb, weights.fvvw)");
    app->add_option("--train-states", train_states, "Toy states to train a visual codec on when none is given")
        ->check(CLI::PositiveNumber);
  }
};

compression::Allocation parse_alloc_flag(const std::string& s) {
  try {
    return compression::parse_allocation(s);
  } catch (const Error& e) {
    throw UsageError(std::string("--alloc: ") + e.what());
  }
}

compression::GridSize parse_grid_flag(const std::string& s) {
  try {
    return compression::parse_grid(s);
  } catch (const Error& e) {
    throw UsageError(std::string("--grid: ") + e.what());
  }
}

gen::CorruptionMode parse_mode(const std::string& s) {
  try {
    return gen::corruption_from_string(s);
  } catch (const Error& e) {
    throw UsageError(std::string("--mode: ") + e.what());
  }
}

const std::vector<std::string> kModes{"bin_swap", "waypoint_offset", "mixed"};

// ---------------------------------------------------------------- schedule

struct ScheduleCmd {
  int horizon = 16;
  std::string alloc = "8,6,2";
  std::string grid = "16x16";
  bool enumerate = false;
  std::int64_t budget = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("schedule", "Per-frame compression depths and the context budget");
    c->add_option("--T", horizon, "History length")->check(CLI::PositiveNumber);
    c->add_option("--alloc", alloc, "Frames per depth, oldest tier first: N2,N1,N0");
    c->add_option("--grid", grid, "Base patch grid, RxC");
    c->add_flag("--enumerate", enumerate, "List every allocation fitting --budget");
    c->add_option("--budget", budget, "Token budget per view for --enumerate");
  }

  int run(bool as_json, std::ostream& out) const {
    const auto g = parse_grid_flag(grid);
    if (enumerate) {
      if (budget <= 0) throw UsageError("--enumerate needs a positive --budget");
      const auto allocs = compression::enumerate_allocations(horizon, budget, g);
      json j;
      j["T"] = horizon;
      j["budget"] = budget;
      j["allocations"] = json::array();
      for (const auto& a : allocs) {
        const auto b = compression::schedule_budget(compression::make_schedule(horizon, a), g);
        j["allocations"].push_back({{"alloc", {a.deep, a.mid, a.full}}, {"budget", b}});
        if (!as_json) out << compression::to_string(a) << "  " << b << '\n';
      }
      if (as_json) out << j.dump() << '\n';
      return 0;
    }
    const auto a = parse_alloc_flag(alloc);
    const auto s = compression::make_schedule(horizon, a);
    std::vector<std::int64_t> tokens;
    for (int d : s.depths) tokens.push_back(compression::tokens_per_frame(d, g));
    const auto total = compression::schedule_budget(s, g);
    if (as_json) {
      json j;
      j["budget"] = total;
      j["T"] = horizon;
      j["alloc"] = {a.deep, a.mid, a.full};
      j["grid"] = {g.rows, g.cols};
      j["depths"] = s.depths;
      j["tokens"] = tokens;
      out << j.dump() << '\n';
    } else {
      out << "depths:";
      for (int d : s.depths) out << ' ' << d;
      out << "\ntokens:";
      for (auto t : tokens) out << ' ' << t;
      out << "\nbudget: " << total << '\n';
    }
    return 0;
  }
};

// ---------------------------------------------------------------- actions

struct ActionsCmd {
  CLI::App* fit = nullptr;
  CLI::App* encode = nullptr;
  CLI::App* decode = nullptr;
  std::string dataset, out_path, codec, chunk_path, tokens_path, codes;
  int horizon = 16;
  double delta = actions::kDefaultDelta;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("actions", "Action chunk codec");
    c->require_subcommand(1);
    fit = c->add_subcommand("fit", "Fit normalizer and BPE; the toy corpus when no --dataset is given");
    fit->add_option("--dataset", dataset, "Episodes file (line-delimited JSON)")->check(CLI::ExistingFile);
    fit->add_option("--out", out_path, "Codec directory")->required();
    fit->add_option("--horizon", horizon, "Chunk length")->check(CLI::PositiveNumber);
    fit->add_option("--delta", delta, "Quantization step")->check(CLI::PositiveNumber);

    encode = c->add_subcommand("encode", "Chunk file (one row per line) to token ids");
    encode->add_option("--chunk", chunk_path, "Chunk file")->required()->check(CLI::ExistingFile);
    encode->add_option("--codec", codec, "Codec directory (default: toy codec)");
    encode->add_option("--out", out_path, "Token file (default: stdout)");

    decode = c->add_subcommand("decode", "Token ids to a chunk file");
    auto* tok = decode->add_option("--tokens", tokens_path, "Token file")->check(CLI::ExistingFile);
    decode->add_option("--codes", codes, "Token ids, comma or space separated")->excludes(tok);
    decode->add_option("--codec", codec, "Codec directory (default: toy codec)");
    decode->add_option("--out", out_path, "Chunk file (default: stdout)");
  }

  int run(bool as_json, std::ostream& out) const {
    if (fit->parsed()) {
      std::optional<actions::ActionTokenizer> tok;
      if (dataset.empty()) {
        tok = gen::fit_toy_action_codec(horizon);
      } else {
        std::vector<actions::ActionChunk> corpus;
        for (const auto& ep : data::load_episodes(dataset, false))
          for (const auto& s : data::window_samples(ep, 1, horizon)) corpus.push_back(s.target_actions);
        tok = actions::ActionTokenizer::fit(corpus, horizon, delta);
      }
      tok->save(out_path);
      json j;
      j["out"] = out_path;
      j["horizon"] = tok->horizon();
      j["dims"] = tok->dims();
      j["vocab"] = tok->bpe().vocab_size();
      j["merges"] = tok->bpe().merges().size();
      std::vector<double> bounds;
      for (int d = 0; d < tok->dims(); ++d) bounds.push_back(tok->error_bound(d));
      j["error_bound"] = bounds;
      if (as_json) out << j.dump() << '\n';
      else out << "saved " << out_path << ": " << j["merges"] << " merges, vocab " << j["vocab"] << '\n';
      return 0;
    }
    const auto tok = action_codec(codec);
    if (encode->parsed()) {
      const auto seq = tok->encode(read_chunk(chunk_path));
      const std::string text = as_json ? json{{"tokens", seq.codes}}.dump() : ints_text(seq.codes);
      if (out_path.empty()) out << text << '\n';
      else write_file(out_path, text + "\n");
      return 0;
    }
    const auto ids = tokens_path.empty() ? parse_ints(codes, "--codes") : parse_ints(read_file(tokens_path), "--tokens");
    const auto chunk = tok->decode({ids});
    if (as_json) {
      json rows = json::array();
      for (int t = 0; t < chunk.horizon; ++t) {
        json row = json::array();
        for (int d = 0; d < chunk.dims; ++d) row.push_back(chunk.at(t, d));
        rows.push_back(row);
      }
      const std::string text = json{{"actions", rows}}.dump() + "\n";
      if (out_path.empty()) out << text;
      else write_file(out_path, text);
    } else if (out_path.empty()) {
      out << chunk_text(chunk);
    } else {
      write_file(out_path, chunk_text(chunk));
    }
    return 0;
  }
};

// ---------------------------------------------------------------- visual

struct VisualCmd {
  CLI::App* train = nullptr;
  CLI::App* encode = nullptr;
  CLI::App* decode = nullptr;
  std::string frames, out_path, codec, image, codes;
  std::size_t toy_states = 0;
  int views = 2;
  int iterations = 20;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("visual", "Visual tokenizer");
    c->require_subcommand(1);
    train = c->add_subcommand("train-codebook", "Fit encoder, 4096-entry codebook and decoder");
    auto* f = train->add_option("--frames", frames, "Directory of PNG frames (searched recursively)")
                  ->check(CLI::ExistingDirectory);
    train->add_option("--toy-states", toy_states, "Train on renders of this many toy states instead")->excludes(f);
    train->add_option("--views", views, "Views rendered per toy state")->check(CLI::Range(1, 3));
    train->add_option("--out", out_path, "Codec directory")->required();
    train->add_option("--iterations", iterations, "k-means iterations")->check(CLI::PositiveNumber);
    train->add_option("--seed", seed, "Seed");

    encode = c->add_subcommand("encode", "PNG to 32 codes");
    encode->add_option("--image", image, "PNG file")->required()->check(CLI::ExistingFile);
    encode->add_option("--codec", codec, "Codec directory")->required()->check(CLI::ExistingDirectory);

    decode = c->add_subcommand("decode", "32 codes to a PNG");
    decode->add_option("--codes", codes, "32 codes, comma or space separated")->required();
    decode->add_option("--codec", codec, "Codec directory")->required()->check(CLI::ExistingDirectory);
    decode->add_option("--out", out_path, "PNG file")->required();
  }

  int run(bool as_json, std::ostream& out) const {
    if (train->parsed()) {
      visual::VisualTokenizer::TrainReport report;
      std::optional<visual::VisualTokenizer> tok;
      if (toy_states > 0) {
        tok = gen::train_toy_visual_codec(toy_states, views, seed, iterations, &report);
      } else {
        if (frames.empty()) throw UsageError("train-codebook needs --frames or --toy-states");
        std::vector<std::filesystem::path> paths;
        for (const auto& e : std::filesystem::recursive_directory_iterator(frames))
          if (e.is_regular_file() && e.path().extension() == ".png") paths.push_back(e.path());
        std::sort(paths.begin(), paths.end());
        const visual::FrameSource source(paths.size(), [paths](std::size_t i) { return load_png(paths[i]); });
        tok = visual::VisualTokenizer::train(source, {.dim = visual::kDefaultDim, .iterations = iterations, .seed = seed},
                                             &report);
      }
      tok->save(out_path);
      json j;
      j["out"] = out_path;
      j["train_mse"] = report.decoder.train_mse;
      j["baseline_mse"] = report.decoder.baseline_mse;
      j["kmeans_objective"] = report.kmeans_objective.empty() ? 0.0 : report.kmeans_objective.back();
      if (as_json) out << j.dump() << '\n';
      else out << "saved " << out_path << ": train mse " << report.decoder.train_mse << " (baseline "
                << report.decoder.baseline_mse << ")\n";
      return 0;
    }
    const auto tok = visual::VisualTokenizer::load(codec);
    if (encode->parsed()) {
      const auto seq = tok.encode(load_png(image));
      out << (as_json ? json{{"codes", seq.codes}}.dump() : ints_text(seq.codes)) << '\n';
      return 0;
    }
    const auto ids = parse_ints(codes, "--codes");
    save_png(tok.decode({ids}), out_path);
    if (as_json) out << json{{"out", out_path}}.dump() << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- dataset

struct DatasetCmd {
  CLI::App* build = nullptr;
  std::string episodes, out_path, alloc = "8,6,2", visual_dir, action_dir;
  int history = 16, horizon = 16, stride = 1, base_vocab = gen::kDefaultBaseVocab;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("dataset", "Training records from episodes");
    c->require_subcommand(1);
    build = c->add_subcommand("build", "One label stream and input index per window");
    build->add_option("--episodes", episodes, "Episodes file")->required()->check(CLI::ExistingFile);
    build->add_option("--T", history, "History length")->check(CLI::PositiveNumber);
    build->add_option("--horizon", horizon, "Action and preview horizon")->check(CLI::PositiveNumber);
    build->add_option("--alloc", alloc, "Frames per depth: N2,N1,N0");
    build->add_option("--stride", stride, "Anchor stride")->check(CLI::PositiveNumber);
    build->add_option("--out", out_path, "Output directory")->required();
    build->add_option("--visual-codec", visual_dir, "Visual codec directory")->required()->check(CLI::ExistingDirectory);
    build->add_option("--action-codec", action_dir, "Action codec directory (default: toy codec)");
    build->add_option("--base-vocab", base_vocab, "Base text vocabulary size")->check(CLI::PositiveNumber);
  }

  int run(bool as_json, std::ostream& out) const {
    const auto schedule = compression::make_schedule(history, parse_alloc_flag(alloc));
    const auto vis = visual::VisualTokenizer::load(visual_dir);
    const auto act = action_codec(action_dir);
    if (act->horizon() != horizon) throw Error(ErrorCode::InvalidArgument, "action codec horizon differs from --horizon");
    const auto layout = stream::make_layout(base_vocab);
    std::filesystem::create_directories(out_path);
    int records = 0;
    const auto eps = data::load_episodes(episodes);
    for (const auto& ep : eps)
      for (const auto& sample : data::window_samples(ep, history, horizon, stride)) {
        const auto rec = data::build_training_record(sample, ep, {act.get(), &vis}, layout, schedule);
        data::write_training_record(out_path, sample, rec);
        ++records;
      }
    if (as_json) out << json{{"episodes", eps.size()}, {"records", records}, {"out", out_path}}.dump() << '\n';
    else out << records << " records from " << eps.size() << " episodes in " << out_path << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- env

struct EnvCmd {
  CLI::App* rollout = nullptr;
  CLI::App* render = nullptr;
  std::uint64_t seed = 0;
  int objects = 3, episodes = 1, views = 2, max_steps = 200;
  std::string policy = "oracle", dump, view = "top", out_path;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("env", "Toy tabletop environment");
    c->require_subcommand(1);
    rollout = c->add_subcommand("rollout", "Run oracle episodes, optionally dumping them with frames");
    rollout->add_option("--seed", seed, "Seed of the first episode");
    rollout->add_option("--objects", objects, "Objects per episode")->check(CLI::Range(1, env::kMaxObjects));
    rollout->add_option("--policy", policy, "Policy")->check(CLI::IsMember({"oracle"}));
    rollout->add_option("--episodes", episodes, "Episodes")->check(CLI::NonNegativeNumber);
    rollout->add_option("--views", views, "Rendered views for --dump")->check(CLI::Range(1, 3));
    rollout->add_option("--max-steps", max_steps, "Step limit")->check(CLI::PositiveNumber);
    rollout->add_option("--dump", dump, "Episodes file; frames go next to it");

    render = c->add_subcommand("render", "Render the reset state");
    render->add_option("--seed", seed, "Seed");
    render->add_option("--objects", objects, "Objects")->check(CLI::Range(1, env::kMaxObjects));
    render->add_option("--view", view, "View")->check(CLI::IsMember({"top", "side", "oblique"}));
    render->add_option("--out", out_path, "PNG file")->required();
  }

  int run(bool as_json, std::ostream& out) const {
    if (render->parsed()) {
      const int v = view == "top" ? 0 : view == "side" ? 1 : 2;
      save_png(env::render(env::reset(seed, objects), v), out_path);
      if (as_json) out << json{{"out", out_path}}.dump() << '\n';
      return 0;
    }
    json rows = json::array();
    if (!dump.empty()) {
      const std::filesystem::path path(dump);
      const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
      std::filesystem::create_directories(dir);
      const auto eps = data::dump_toy_episodes(
          dir, {.episodes = episodes, .seed = seed, .views = views, .objects = objects, .max_steps = max_steps});
      if (path.filename() != "episodes.jsonl") std::filesystem::rename(dir / "episodes.jsonl", path);
      for (std::size_t i = 0; i < eps.size(); ++i)
        rows.push_back({{"seed", seed + i}, {"episode_id", eps[i].episode_id}, {"length", eps[i].length}});
    } else {
      for (int e = 0; e < episodes; ++e) {
        env::EnvState s = env::reset(seed + static_cast<std::uint64_t>(e), objects);
        while (!env::success(s) && s.step_count < max_steps) s = env::step(s, env::oracle_action(s));
        rows.push_back({{"seed", seed + static_cast<std::uint64_t>(e)}, {"steps", s.step_count}, {"success", env::success(s)}});
      }
    }
    if (as_json) {
      out << json{{"episodes", rows}}.dump() << '\n';
    } else {
      for (const auto& r : rows) out << r.dump() << '\n';
      if (!dump.empty()) out << "wrote " << dump << '\n';
    }
    return 0;
  }
};

// ---------------------------------------------------------------- gen

struct GenCmd {
  CLI::App* propose = nullptr;
  std::uint64_t seed = 0;
  int objects = 3, views = 2;
  double corruption = 0.0, temp = 1.0;
  std::string mode = "bin_swap", out_path = "proposal";
  VisualFlags visual;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen", "Oracle generator");
    c->require_subcommand(1);
    propose = c->add_subcommand("propose", "One proposal from the reset state: stream file plus preview PNGs");
    propose->add_option("--seed", seed, "Episode seed");
    propose->add_option("--objects", objects, "Objects")->check(CLI::Range(1, env::kMaxObjects));
    propose->add_option("--views", views, "Views")->check(CLI::Range(1, 3));
    propose->add_option("--corruption", corruption, "Corruption probability p")->check(CLI::Range(0.0, 1.0));
    propose->add_option("--mode", mode, "Corruption mode")->check(CLI::IsMember(kModes));
    propose->add_option("--temp", temp, "Sampling temperature (>= 1)")->check(CLI::Range(1.0, 1e9));
    propose->add_option("--out", out_path, "Output directory");
    visual.add(propose);
  }

  int run(bool as_json, std::ostream& out, std::ostream& err) const {
    gen::CodecBundle codecs{action_codec(""), visual_codec(visual.dir, visual.train_states, views, err),
                            stream::make_layout(gen::kDefaultBaseVocab)};
    const auto resources = hil::default_loop_resources(views);
    const env::EnvState state = env::reset(seed, objects);
    gen::FrameHistory history(gen::kDefaultHistory, views, resources.extractor);
    std::vector<Image> frames;
    for (int v = 0; v < views; ++v) frames.push_back(env::render(state, v));
    history.fill(frames);
    const auto ctx = gen::assemble_context(history, compression::make_schedule(gen::kDefaultHistory, {8, 6, 2}),
                                           *resources.compressor, hil::EpisodeConfig{}.instruction, temp, &state);
    gen::OracleGenerator generator({.corruption = corruption,
                                    .mode = parse_mode(mode),
                                    .views = views,
                                    .seed = seed ^ 0x9e3779b97f4a7c15ULL},
                                   codecs);
    const auto output = generator.generate(ctx);

    const std::filesystem::path dir(out_path);
    std::filesystem::create_directories(dir);
    const stream::StreamShape shape{views, output.horizon};
    const auto ids = stream::serialize_output(output.unified, codecs.layout, shape);
    stream::save_stream(dir / "proposal.fvus", {codecs.layout, shape, ids});
    for (int v = 0; v < views; ++v)
      for (int h = 0; h < output.horizon; ++h) {
        const std::string name = "preview_v" + std::to_string(v) + "_h" + (h < 10 ? "0" : "") + std::to_string(h) + ".png";
        save_png(output.preview(v, h), dir / name);
      }
    write_file(dir / "chunk.txt", chunk_text(output.decoded_chunk));

    json j;
    j["stream"] = (dir / "proposal.fvus").string();
    j["tokens"] = ids.ids.size();
    j["visual_ids"] = stream::count_visual_ids(ids, codecs.layout);
    j["previews"] = views * output.horizon;
    j["corrupted"] = generator.last_trace().corrupted;
    j["context_tokens"] = ctx.realized_tokens;
    if (as_json) out << j.dump() << '\n';
    else out << "wrote " << j["stream"].get<std::string>() << " (" << j["tokens"] << " ids, " << j["visual_ids"]
              << " visual) and " << j["previews"] << " previews" << (j["corrupted"] ? ", corrupted" : "") << '\n';
    return 0;
  }
};

// ---------------------------------------------------------------- eval / serve

/// Serves until SIGINT or SIGTERM.
void serve_until_signal(gateway::Server& server) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.run();
  waiter.join();
}

struct ServeFlags {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;
  double timeout_s = 60.0;

  void add(CLI::App* app) {
    app->add_option("--address", address, "Listen address");
    app->add_option("--port", port, "Listen port");
    app->add_option("--timeout", timeout_s, "Seconds to wait for each operator decision")->check(CLI::PositiveNumber);
  }
};

int serve(const ServeFlags& flags, gateway::SessionConfig session, std::uint64_t base_seed, gen::CodecBundle codecs,
          int views, std::ostream& out) {
  gateway::ServeConfig config;
  config.address = flags.address;
  config.port = flags.port;
  config.session = std::move(session);
  config.session.timeout = std::chrono::milliseconds(static_cast<long>(flags.timeout_s * 1000));
  config.base_seed = base_seed;
  gateway::Server server(config, std::move(codecs), hil::default_loop_resources(views));
  out << "listening on ws://" << flags.address << ':' << server.port() << "/ (one episode per connection)"
      << std::endl;
  serve_until_signal(server);
  return 0;
}

struct EvalCmd {
  CLI::App* app = nullptr;
  std::string gate = "auto", mode = "bin_swap", seeds = "0", out_path, report;
  double corruption = 0.3;
  int episodes = 50, objects = 3, max_env_steps = 200, views = 2;
  VisualFlags visual;
  ServeFlags serve_flags;

  void add(CLI::App& root) {
    app = root.add_subcommand("eval", "Closed-loop evaluation with the oracle generator");
    app->add_option("--gate", gate, "Verifier")->check(CLI::IsMember({"auto", "none", "human"}));
    app->add_option("--corruption", corruption, "Corruption probability p")->check(CLI::Range(0.0, 1.0));
    app->add_option("--mode", mode, "Corruption mode")->check(CLI::IsMember(kModes));
    app->add_option("--episodes", episodes, "Episodes per seed")->check(CLI::NonNegativeNumber);
    app->add_option("--seeds", seeds, "Seeds: 0..19 or 0,1,2");
    app->add_option("--objects", objects, "Objects per episode")->check(CLI::Range(1, env::kMaxObjects));
    app->add_option("--max-env-steps", max_env_steps, "Step budget per episode")->check(CLI::NonNegativeNumber);
    app->add_option("--views", views, "Views")->check(CLI::Range(1, 3));
    app->add_option("--out", out_path, "Results file, one JSON line per episode");
    app->add_option("--report", report, "Summarize an existing results file and exit")->check(CLI::ExistingFile);
    visual.add(app);
    serve_flags.add(app);
  }

  static json summary_json(const hil::EvalSummary& s) {
    return {{"episodes", s.episodes}, {"successes", s.successes}, {"success_rate", s.success_rate()},
            {"aborts", s.aborts}, {"env_steps", s.env_steps}};
  }

  int run_report(bool as_json, std::ostream& out) const {
    std::istringstream is(read_file(report));
    std::vector<hil::EvalRow> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (line.empty()) continue;
      const auto j = json::parse(line, nullptr, false);
      try {
        if (j.is_discarded()) throw std::invalid_argument("malformed JSON");
        hil::EvalRow row;
        row.seed = j.at("seed").get<int>();
        row.episode = j.at("episode").get<int>();
        row.result.success = j.at("success").get<bool>();
        row.result.env_steps = j.at("env_steps").get<int>();
        row.result.proposals = j.at("proposals").get<int>();
        row.result.rejections = j.at("rejections").get<int>();
        row.result.resample_aborts = j.at("aborts").get<int>();
        rows.push_back(row);
      } catch (const std::exception& e) {
        throw Error(ErrorCode::FormatError, report + ": " + e.what(), n);
      }
    }
    print_summary(rows, as_json, out);
    return 0;
  }

  static void print_summary(const std::vector<hil::EvalRow>& rows, bool as_json, std::ostream& out) {
    std::vector<int> seed_list;
    for (const auto& r : rows)
      if (std::find(seed_list.begin(), seed_list.end(), r.seed) == seed_list.end()) seed_list.push_back(r.seed);
    const auto all = hil::summarize(rows);
    if (as_json) {
      json j = summary_json(all);
      j["per_seed"] = json::array();
      for (int s : seed_list) {
        json js = summary_json(hil::summarize(rows, s));
        js["seed"] = s;
        j["per_seed"].push_back(js);
      }
      out << j.dump() << '\n';
      return;
    }
    for (int s : seed_list) {
      const auto ss = hil::summarize(rows, s);
      out << "seed " << s << ": " << ss.successes << "/" << ss.episodes << " success, " << ss.aborts << " aborts\n";
    }
    out << "total: " << all.successes << "/" << all.episodes << " success (" << 100.0 * all.success_rate() << "%), "
        << all.aborts << " aborts, " << all.env_steps << " env steps\n";
  }

  int run(bool as_json, std::ostream& out, std::ostream& err) const {
    if (!report.empty()) return run_report(as_json, out);
    hil::EvalConfig config;
    config.gate = hil::verifier_from_string(gate);
    config.corruption = corruption;
    config.mode = parse_mode(mode);
    config.seeds = parse_seeds(seeds);
    config.episodes = episodes;
    config.episode.objects = objects;
    config.episode.max_env_steps = max_env_steps;
    gen::CodecBundle codecs{action_codec(""), visual_codec(visual.dir, visual.train_states, views, err),
                            stream::make_layout(gen::kDefaultBaseVocab)};
    if (config.gate == hil::VerifierKind::Human) {
      gateway::SessionConfig session;
      session.episode = config.episode;
      session.corruption = corruption;
      session.mode = config.mode;
      return serve(serve_flags, session, static_cast<std::uint64_t>(config.seeds.front()), std::move(codecs), views, out);
    }
    std::ofstream results;
    if (!out_path.empty()) {
      results.open(out_path);
      if (!results) throw Error(ErrorCode::IoError, "cannot write " + out_path);
    }
    const auto rows = hil::run_eval(config, codecs, hil::default_loop_resources(views), [&](const hil::EvalRow& row) {
      if (results.is_open()) results << hil::result_line(row) << '\n' << std::flush;
    });
    if (results.is_open() && !results) throw Error(ErrorCode::IoError, "write failed for " + out_path);
    print_summary(rows, as_json, out);
    return 0;
  }
};

struct ServeCmd {
  std::uint64_t seed = 0;
  int objects = 3, max_env_steps = 200, views = 2;
  double corruption = 0.0;
  std::string mode = "bin_swap";
  VisualFlags visual;
  ServeFlags flags;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("serve", "Operator gateway: one human-gated episode per WebSocket connection");
    c->add_option("--seed", seed, "Episode seed of the first session (later ones count up; ?seed=<n> overrides)");
    c->add_option("--objects", objects, "Objects per episode")->check(CLI::Range(1, env::kMaxObjects));
    c->add_option("--max-env-steps", max_env_steps, "Step budget per episode")->check(CLI::NonNegativeNumber);
    c->add_option("--views", views, "Views")->check(CLI::Range(1, 3));
    c->add_option("--corruption", corruption, "Corruption probability p")->check(CLI::Range(0.0, 1.0));
    c->add_option("--mode", mode, "Corruption mode")->check(CLI::IsMember(kModes));
    visual.add(c);
    flags.add(c);
  }

  int run(std::ostream& out, std::ostream& err) const {
    gateway::SessionConfig session;
    session.episode.objects = objects;
    session.episode.max_env_steps = max_env_steps;
    session.corruption = corruption;
    session.mode = parse_mode(mode);
    gen::CodecBundle codecs{action_codec(""), visual_codec(visual.dir, visual.train_states, views, err),
                            stream::make_layout(gen::kDefaultBaseVocab)};
    return serve(flags, session, seed, std::move(codecs), views, out);
  }
};

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"fvla: compressed-context generation, unified token streams and human-gated execution"};
  app.name("fvla");
  app.require_subcommand(1);
  app.fallthrough();
  bool as_json = false;
  app.add_flag("--json", as_json, "Machine-readable output");

  ScheduleCmd schedule;
  ActionsCmd actions_cmd;
  VisualCmd visual_cmd;
  DatasetCmd dataset_cmd;
  EnvCmd env_cmd;
  GenCmd gen_cmd;
  EvalCmd eval_cmd;
  ServeCmd serve_cmd;
  schedule.add(app);
  actions_cmd.add(app);
  visual_cmd.add(app);
  dataset_cmd.add(app);
  env_cmd.add(app);
  gen_cmd.add(app);
  eval_cmd.add(app);
  serve_cmd.add(app);
  for (auto* sub : app.get_subcommands({})) {
    sub->fallthrough();
    for (auto* leaf : sub->get_subcommands({})) leaf->fallthrough();
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "schedule") return schedule.run(as_json, out);
    if (cmd == "actions") return actions_cmd.run(as_json, out);
    if (cmd == "visual") return visual_cmd.run(as_json, out);
    if (cmd == "dataset") return dataset_cmd.run(as_json, out);
    if (cmd == "env") return env_cmd.run(as_json, out);
    if (cmd == "gen") return gen_cmd.run(as_json, out, err);
    if (cmd == "eval") return eval_cmd.run(as_json, out, err);
    return serve_cmd.run(out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace fvla
