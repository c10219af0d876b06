#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fvla/toy_env.hpp"
#include "fvla/visual_codec.hpp"
#include "support.hpp"

using namespace fvla;
using namespace fvla::visual;
using fvla::testing::code_of;

namespace {

FrameSource env_frames(const std::vector<env::EnvState>& states) {
  return FrameSource(2 * states.size(), [&states](std::size_t i) { return env::render(states[i / 2], static_cast<int>(i % 2)); });
}

struct Fixture {
  std::vector<env::EnvState> train_states = env::exploration_states(1, 1200);
  std::vector<env::EnvState> heldout_states = env::exploration_states(2, 150);
  VisualTokenizer::TrainReport report;
  VisualTokenizer tok = VisualTokenizer::train(env_frames(train_states), {}, &report);
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

Codebook random_codebook(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> rows(static_cast<std::size_t>(kVocab) * dim);
  for (auto& x : rows) x = n(rng);
  return Codebook(dim, std::move(rows));
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fvla_visual_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("raw patchify is a lossless reshaping") {
  Image im(32, 48);
  for (std::size_t i = 0; i < im.data.size(); ++i) im.data[i] = static_cast<float>(i % 251) / 251.0f;
  const auto p = patchify_raw(im);
  CHECK(p.rows == 2);
  CHECK(p.cols == 3);
  CHECK(p.dim == kPatchDim);
  // Patch 4 is row 1, col 1; its first value is pixel (16, 16) channel 0.
  CHECK(p.patch(4)[0] == im.at(16, 16, 0));
  CHECK(unpatchify_raw(p) == im);

  CHECK(code_of([] { patchify_raw(Image(100, 100)); }) == ErrorCode::IndivisibleImage);
  CHECK(code_of([] { fixture().tok.encode(Image(100, 100)); }) == ErrorCode::IndivisibleImage);
  CHECK(code_of([] { fixture().tok.encode(Image(512, 512)); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("k-means recovers well separated clusters") {
  const int dim = 4, k = 8, per = 200;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<float> samples;
  std::vector<std::vector<double>> means(k, std::vector<double>(dim, 0.0));
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < per; ++i)
      for (int d = 0; d < dim; ++d) {
        const float x = static_cast<float>(10.0 * ((c >> (d % 3)) & 1) + 25.0 * (d == 3 ? c : 0) + noise(rng));
        samples.push_back(x);
        means[c][d] += x / per;
      }
  const auto res = kmeans(samples, dim, k, 20, 3);
  REQUIRE(res.centroids.size() == static_cast<std::size_t>(k * dim));
  for (int c = 0; c < k; ++c) {
    double best = 1e9;
    for (int j = 0; j < k; ++j) {
      double err = 0.0;
      for (int d = 0; d < dim; ++d) err = std::max(err, std::abs(res.centroids[j * dim + d] - means[c][d]));
      best = std::min(best, err);
    }
    CHECK(best <= 1e-3);
  }
  for (std::size_t i = 1; i < res.objective.size(); ++i)
    CHECK(res.objective[i] <= res.objective[i - 1] * (1 + 1e-9));

  CHECK(code_of([&] { kmeans(std::span<const float>(samples).first(7 * dim), dim, k); }) ==
        ErrorCode::InsufficientData);
  CHECK(code_of([&] { kmeans(std::span<const float>(samples).first(5), dim, k); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("k-means merges duplicates and is seeded deterministically") {
  std::vector<float> samples;
  for (int i = 0; i < 50; ++i) samples.insert(samples.end(), {0.0f, 0.0f});
  samples.insert(samples.end(), {1.0f, 1.0f, 2.0f, 2.0f});
  const auto a = kmeans(samples, 2, 3, 10, 1);
  const auto b = kmeans(samples, 2, 3, 10, 1);
  CHECK(a.centroids == b.centroids);
  CHECK(a.objective.back() == doctest::Approx(0.0));
}

TEST_CASE("codebook nearest matches the brute-force scan exactly") {
  const Codebook cb = random_codebook(16, 5);
  std::mt19937_64 rng(11);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> z(16);
  for (int trial = 0; trial < 2000; ++trial) {
    for (auto& x : z) x = n(rng);
    CHECK(cb.nearest(z) == cb.nearest_bruteforce(z));
  }
  for (int k = 0; k < kVocab; k += 97) {
    const auto r = cb.row(k);
    CHECK(cb.nearest(r) == k);
    CHECK(cb.nearest_bruteforce(r) == k);
  }
  // Ties go to the lowest index.
  std::vector<float> rows(static_cast<std::size_t>(kVocab) * 2, 0.0f);
  rows[2 * 10] = 1.0f;
  rows[2 * 20] = -1.0f;
  const Codebook tied(2, rows);
  CHECK(tied.nearest(std::vector<float>{0.0f, 0.0f}) == 0);
  CHECK(tied.nearest(std::vector<float>{1.0f, 0.0f}) == 10);

  CHECK(code_of([&] { cb.row(kVocab); }) == ErrorCode::IndexOutOfRange);
  CHECK(code_of([&] { cb.row(-1); }) == ErrorCode::IndexOutOfRange);
  CHECK(code_of([] { Codebook(4, std::vector<float>(4095 * 4)); }) == ErrorCode::InvalidArgument);
  std::vector<float> bad(static_cast<std::size_t>(kVocab) * 2, 0.0f);
  bad[7] = std::nanf("");
  CHECK(code_of([&] { Codebook(2, bad); }) == ErrorCode::FormatError);
}

TEST_CASE("codebook file round trip and corruption") {
  const Codebook cb = random_codebook(8, 2);
  const auto dir = scratch_dir("cb");
  cb.save(dir / "cb.fvcb");
  CHECK(Codebook::load(dir / "cb.fvcb").rows() == cb.rows());

  const auto size = std::filesystem::file_size(dir / "cb.fvcb");
  std::filesystem::resize_file(dir / "cb.fvcb", size - 3);
  CHECK(code_of([&] { Codebook::load(dir / "cb.fvcb"); }) == ErrorCode::FormatError);
  {
    std::ofstream os(dir / "junk.fvcb", std::ios::binary);
    os << "NOPE";
  }
  CHECK(code_of([&] { Codebook::load(dir / "junk.fvcb"); }) == ErrorCode::FormatError);
  CHECK(code_of([&] { Codebook::load(dir / "missing.fvcb"); }) == ErrorCode::IoError);
}

TEST_CASE("every encode yields 32 codes below 4096") {
  const auto& f = fixture();
  for (const auto& s : f.heldout_states)
    for (int v = 0; v < 3; ++v) {
      const auto codes = f.tok.encode(env::render(s, v));
      REQUIRE(codes.codes.size() == kTokens);
      for (int c : codes.codes) {
        CHECK(c >= 0);
        CHECK(c < kVocab);
      }
    }
}

TEST_CASE("training objective decreases and codebook rows are finite and distinct") {
  const auto& f = fixture();
  const auto& obj = f.report.kmeans_objective;
  REQUIRE(obj.size() == 20);
  for (std::size_t i = 1; i < obj.size(); ++i) CHECK(obj[i] <= obj[i - 1] * (1 + 1e-9));
  const auto& cb = f.tok.codebook();
  for (float x : cb.rows()) REQUIRE(std::isfinite(x));
  for (int k = 0; k < kVocab; k += 41) CHECK(cb.nearest(cb.row(k)) == k);
}

TEST_CASE("slot structure: constant frames, local edits") {
  const auto& tok = fixture().tok;
  const Latents flat = tok.encode_latents(Image(kImageSize, kImageSize, 0.3f));
  for (int s = 1; s < kTokens; ++s) CHECK(std::ranges::equal(flat.row(s), flat.row(0)));

  const Image base = env::render(fixture().heldout_states[0], env::View::Top);
  Image edited = base;
  // Pixel inside patch (5, 9) = patch 89, owned by slot 11.
  edited.at(5 * kPatch + 3, 9 * kPatch + 4, 1) = 1.0f - edited.at(5 * kPatch + 3, 9 * kPatch + 4, 1);
  const Latents a = tok.encode_latents(base);
  const Latents b = tok.encode_latents(edited);
  for (int s = 0; s < kTokens; ++s) {
    if (s == 89 / kPatchesPerSlot)
      CHECK_FALSE(std::ranges::equal(a.row(s), b.row(s)));
    else
      CHECK(std::ranges::equal(a.row(s), b.row(s)));
  }
}

TEST_CASE("quantization is idempotent and lookup validates codes") {
  const auto& tok = fixture().tok;
  const auto codes = tok.encode(env::render(fixture().heldout_states[3], env::View::Side));
  const Latents z = lookup(codes, tok.codebook());
  CHECK(quantize_latents(z, tok.codebook()) == codes);

  VisualTokenSeq bad = codes;
  bad.codes[4] = kVocab;
  CHECK(code_of([&] { lookup(bad, tok.codebook()); }) == ErrorCode::IndexOutOfRange);
  CHECK(code_of([&] { tok.decode(bad); }) == ErrorCode::IndexOutOfRange);
  bad.codes.pop_back();
  CHECK(code_of([&] { tok.decode(bad); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("reconstruction beats the per-position mean on held-out frames") {
  const auto& f = fixture();
  CHECK(f.report.decoder.train_mse < f.report.decoder.baseline_mse);
  const Image mean = mean_image(env_frames(f.train_states));
  double codec = 0.0, baseline = 0.0;
  for (const auto& s : f.heldout_states)
    for (int v = 0; v < 2; ++v) {
      const Image im = env::render(s, v);
      codec += mse(f.tok.decode(f.tok.encode(im)), im);
      baseline += mse(mean, im);
    }
  MESSAGE("held-out mse " << codec / 300 << " vs mean-image " << baseline / 300);
  CHECK(codec < baseline);
  CHECK(codec < 0.25 * baseline);
}

TEST_CASE("decode is deterministic and re-encoding a decode is stable") {
  const auto& tok = fixture().tok;
  const Image im = env::render(fixture().heldout_states[7], env::View::Top);
  const auto codes = tok.encode(im);
  const Image d1 = tok.decode(codes);
  const Image d2 = tok.decode(codes);
  CHECK(d1 == d2);
  CHECK(d1 == decode_image(lookup(codes, tok.codebook()), tok.model()));
  for (float x : d1.data) REQUIRE((x >= 0.0f && x <= 1.0f));
  // Decoding is a projection onto codebook renderings: encode(decode(c)) maps back
  // onto a code whose rendering is at least as close.
  const auto again = tok.encode(d1);
  CHECK(mse(tok.decode(again), d1) <= mse(d1, im) + 1e-3);
}

TEST_CASE("incremental paths are bitwise equal to the dense ones") {
  const auto& f = fixture();
  const auto ref = f.tok.make_reference(env::background(env::View::Top));
  CHECK(ref.codes == f.tok.encode(env::background(env::View::Top)));
  CHECK(ref.decoded == f.tok.decode(ref.codes));

  auto chain = f.tok.make_reference(env::render(f.heldout_states[0], env::View::Top));
  env::EnvState s = env::reset(9, 3);
  for (int t = 0; t < 40; ++t) {
    s = env::step(s, env::oracle_action(s));
    const Image im = env::render(s, env::View::Top);
    const auto dense = f.tok.encode(im);
    CHECK(f.tok.encode(im, ref) == dense);
    CHECK(f.tok.decode(dense, ref) == f.tok.decode(dense));
    f.tok.advance(chain, im);
    CHECK(chain.codes == dense);
    CHECK(chain.decoded == f.tok.decode(dense));
    CHECK(chain.image == im);
  }
}

TEST_CASE("tokenizer directory round trip") {
  const auto& tok = fixture().tok;
  const auto dir = scratch_dir("tok");
  tok.save(dir);
  CHECK(std::filesystem::exists(dir / "codebook.fvcb"));
  CHECK(std::filesystem::exists(dir / "weights.fvvw"));
  const VisualTokenizer back = VisualTokenizer::load(dir);
  CHECK(back.codebook().rows() == tok.codebook().rows());
  CHECK(back.model().decoder == tok.model().decoder);
  CHECK(back.model().mask_bias == tok.model().mask_bias);
  for (int i = 0; i < 10; ++i) {
    const Image im = env::render(fixture().heldout_states[static_cast<std::size_t>(i)], i % 3);
    const auto codes = tok.encode(im);
    CHECK(back.encode(im) == codes);
    CHECK(back.decode(codes) == tok.decode(codes));
  }

  std::filesystem::resize_file(dir / "weights.fvvw", std::filesystem::file_size(dir / "weights.fvvw") / 2);
  CHECK(code_of([&] { VisualTokenizer::load(dir); }) == ErrorCode::FormatError);
}

TEST_CASE("training rejects corpora that cannot fill the codebook") {
  std::vector<Image> few(100, Image(kImageSize, kImageSize, 0.5f));
  const VisualModel m = fit_encoder(std::span<const Image>(few.data(), 10), 8);
  CHECK(code_of([&] { train_codebook(few, m); }) == ErrorCode::InsufficientData);
  CHECK(code_of([] { fit_encoder(std::vector<Image>{}); }) == ErrorCode::InsufficientData);
}
