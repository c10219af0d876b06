#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "json.hpp"

#include "fvla/cli.hpp"
#include "fvla/dataset.hpp"
#include "fvla/image.hpp"
#include "fvla/policy_gen.hpp"
#include "fvla/unified_stream.hpp"

using namespace fvla;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("fvla_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const std::string& name) { return (workdir() / name).string(); }

/// Small visual codec trained through the CLI once per run.
const std::string& small_visual() {
  static const std::string dir = [] {
    const auto r = cli({"visual", "train-codebook", "--toy-states", "200", "--iterations", "3", "--out", p("vc")});
    REQUIRE(r.code == 0);
    return p("vc");
  }();
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("schedule reports the 8,6,2 budget") {
  const auto r = cli({"--json", "schedule"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["budget"] == 256);
  CHECK(j["depths"].size() == 16);
  CHECK(j["tokens"].front() == 4);
  CHECK(j["tokens"].back() == 64);

  const auto dense = json::parse(cli({"--json", "schedule", "--alloc", "0,0,16"}).out);
  CHECK(dense["budget"] == 1024);

  const auto en = cli({"--json", "schedule", "--enumerate", "--budget", "256"});
  REQUIRE(en.code == 0);
  const auto listed = json::parse(en.out);
  bool found = false;
  for (const auto& a : listed["allocations"]) {
    CHECK(a["budget"].get<int>() <= 256);
    found = found || a["alloc"].get<std::vector<int>>() == std::vector<int>{8, 6, 2};
  }
  CHECK(found);
}

TEST_CASE("usage errors exit 2, runtime errors exit 1, help exits 0") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"schedule", "--no-such-flag"}).code == 2);
  CHECK(cli({"schedule", "--alloc", "x"}).code == 2);
  CHECK(cli({"schedule", "--enumerate"}).code == 2);
  CHECK(cli({"eval", "--gate", "maybe"}).code == 2);
  CHECK(cli({"eval", "--seeds", "5..2"}).code == 2);
  CHECK(cli({"gen", "propose", "--mode", "sideways"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"serve", "--help"}).code == 0);

  const auto missing = cli({"visual", "encode", "--image", p("nope.png"), "--codec", p("nope")});
  CHECK(missing.code == 2);
  const auto bad_codec = cli({"actions", "encode", "--chunk", __FILE__, "--codec", p("nope")});
  CHECK(bad_codec.code == 1);
  CHECK(bad_codec.err.rfind("error: ", 0) == 0);
}

TEST_CASE("env rollout and dump") {
  const auto r = cli({"--json", "env", "rollout", "--episodes", "3", "--seed", "5", "--objects", "2"});
  REQUIRE(r.code == 0);
  const auto rows = json::parse(r.out)["episodes"];
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) CHECK(row["success"] == true);

  const auto d = cli({"env", "rollout", "--episodes", "2", "--objects", "1", "--max-steps", "80", "--dump",
                      p("dump/eps.jsonl")});
  REQUIRE(d.code == 0);
  const auto eps = data::load_episodes(p("dump/eps.jsonl"));
  REQUIRE(eps.size() == 2);
  CHECK(fs::exists(workdir() / "dump/frames" / eps[0].episode_id));

  REQUIRE(cli({"env", "render", "--seed", "1", "--view", "oblique", "--out", p("r.png")}).code == 0);
  const auto im = load_png(p("r.png"));
  CHECK(im.width == 256);
  CHECK(im.height == 256);
}

TEST_CASE("actions fit, encode and decode round trip") {
  const auto f = cli({"--json", "actions", "fit", "--out", p("ac")});
  REQUIRE(f.code == 0);
  CHECK(json::parse(f.out)["vocab"] == 2048);

  std::ofstream(p("chunk.txt")) << [] {
    std::ostringstream os;
    for (int t = 0; t < 16; ++t) os << 0.002 * t << ' ' << -0.03 + 0.001 * t << ' ' << (t < 8 ? -1 : 1) << '\n';
    return os.str();
  }();
  REQUIRE(cli({"actions", "encode", "--chunk", p("chunk.txt"), "--codec", p("ac"), "--out", p("tok.txt")}).code == 0);
  const auto d = cli({"actions", "decode", "--tokens", p("tok.txt"), "--codec", p("ac"), "--out", p("back.txt")});
  REQUIRE(d.code == 0);

  const auto codec = actions::ActionTokenizer::load(p("ac"));
  std::istringstream orig(slurp(p("chunk.txt"))), back(slurp(p("back.txt")));
  for (int t = 0; t < 16; ++t)
    for (int dim = 0; dim < 3; ++dim) {
      double a = 0, b = 0;
      orig >> a;
      back >> b;
      CHECK(std::abs(a - b) <= codec.error_bound(dim) + 1e-12);
    }

  const auto inline_codes = cli({"actions", "decode", "--codes", slurp(p("tok.txt")), "--codec", p("ac")});
  CHECK(inline_codes.code == 0);
  CHECK(inline_codes.out == slurp(p("back.txt")));
  CHECK(cli({"actions", "decode", "--codes", "1,2,3", "--codec", p("ac")}).code == 1);
  CHECK(cli({"actions", "decode", "--codes", "1,x", "--codec", p("ac")}).code == 2);
}

TEST_CASE("visual encode and decode") {
  REQUIRE(cli({"env", "render", "--seed", "4", "--out", p("v.png")}).code == 0);
  const auto e = cli({"--json", "visual", "encode", "--image", p("v.png"), "--codec", small_visual()});
  REQUIRE(e.code == 0);
  const auto codes = json::parse(e.out)["codes"];
  REQUIRE(codes.size() == 32);
  std::string text;
  for (const auto& c : codes) {
    CHECK(c.get<int>() >= 0);
    CHECK(c.get<int>() < 4096);
    text += std::to_string(c.get<int>()) + ",";
  }
  REQUIRE(cli({"visual", "decode", "--codes", text, "--codec", small_visual(), "--out", p("vd.png")}).code == 0);
  const auto tok = visual::VisualTokenizer::load(small_visual());
  const auto expected = tok.decode(tok.encode(load_png(p("v.png"))));
  CHECK(encode_png(load_png(p("vd.png"))) == encode_png(expected));

  CHECK(cli({"visual", "decode", "--codes", "1,2,3", "--codec", small_visual(), "--out", p("x.png")}).code == 1);
}

TEST_CASE("visual train-codebook on a frame directory") {
  REQUIRE(cli({"env", "rollout", "--episodes", "6", "--views", "3", "--dump", p("frames_src/episodes.jsonl")}).code == 0);
  const auto r = cli({"--json", "visual", "train-codebook", "--frames", p("frames_src/frames"), "--iterations", "2",
                      "--out", p("vc_frames")});
  if (r.code == 1) {
    CHECK(r.err.find("InsufficientData") != std::string::npos);
  } else {
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    CHECK(j["train_mse"].get<double>() < j["baseline_mse"].get<double>());
  }
}

TEST_CASE("dataset build writes one record per window") {
  REQUIRE(cli({"env", "rollout", "--episodes", "1", "--objects", "1", "--seed", "7", "--dump",
               p("ds_src/episodes.jsonl")})
              .code == 0);
  const auto eps = data::load_episodes(p("ds_src/episodes.jsonl"));
  const auto r = cli({"--json", "dataset", "build", "--episodes", p("ds_src/episodes.jsonl"), "--out", p("ds"),
                      "--visual-codec", small_visual()});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["records"] == eps[0].length);
  int fvus = 0;
  for (const auto& e : fs::directory_iterator(p("ds"))) fvus += e.path().extension() == ".fvus";
  CHECK(fvus == eps[0].length);

  CHECK(cli({"dataset", "build", "--episodes", p("ds_src/episodes.jsonl"), "--out", p("ds2"), "--visual-codec",
             small_visual(), "--horizon", "8"})
            .code == 1);
}

TEST_CASE("gen propose writes a well-formed stream and previews") {
  const auto r = cli({"--json", "gen", "propose", "--seed", "2", "--corruption", "1", "--visual-codec", small_visual(),
                      "--out", p("prop")});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["visual_ids"] == 1024);
  CHECK(j["corrupted"] == true);
  CHECK(j["context_tokens"] == json::array({256, 256}));
  const auto file = stream::load_stream(p("prop/proposal.fvus"));
  CHECK(stream::count_visual_ids(file.stream, file.layout) == 1024);
  CHECK(fs::exists(p("prop/preview_v1_h15.png")));
  CHECK(!fs::exists(p("prop/preview_v2_h00.png")));
}

TEST_CASE("eval writes results and report summarizes them") {
  const auto r = cli({"--json", "eval", "--gate", "auto", "--seeds", "0..1", "--episodes", "2", "--objects", "1",
                      "--max-env-steps", "64", "--visual-codec", small_visual(), "--out", p("res.jsonl")});
  REQUIRE(r.code == 0);
  const auto live = json::parse(r.out);
  CHECK(live["episodes"] == 4);
  CHECK(live["per_seed"].size() == 2);

  std::istringstream lines(slurp(p("res.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 4);

  const auto rep = cli({"--json", "eval", "--report", p("res.jsonl")});
  REQUIRE(rep.code == 0);
  CHECK(json::parse(rep.out) == live);

  std::ofstream(p("bad.jsonl")) << "{\"seed\": 0}\n";
  CHECK(cli({"eval", "--report", p("bad.jsonl")}).code == 1);
}

TEST_CASE("serve reports a bind failure") {
  const auto first = cli({"serve", "--port", "1", "--address", "not-an-address", "--visual-codec", small_visual()});
  CHECK(first.code == 1);
  CHECK(first.err.find("BindError") != std::string::npos);
}
