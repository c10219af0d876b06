#pragma once

// Compact 1D visual tokenization: a 256x256 frame becomes 32 indices into a
// 4096-entry latent codebook, and decodes back to a frame.
//
// Geometry: 16x16 patches of 16 px; latent slot i owns the 8 raster-order
// patches 8i..8i+7 (a 128x16 px strip). All weight matrices are stored
// input-major ([in][out]) so every product is evaluated in one fixed order.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fvla/image.hpp"

namespace fvla::visual {

inline constexpr int kImageSize = 256;
inline constexpr int kPatch = 16;
inline constexpr int kPatchDim = kPatch * kPatch * 3;
inline constexpr int kGrid = kImageSize / kPatch;
inline constexpr int kPatches = kGrid * kGrid;
inline constexpr int kTokens = 32;
inline constexpr int kPatchesPerSlot = kPatches / kTokens;
inline constexpr int kSlotPixels = kPatchesPerSlot * kPatchDim;
inline constexpr int kVocab = 4096;
inline constexpr int kDefaultDim = 64;

/// rows x cols patches, each a `dim`-vector, raster order.
struct PatchSequence {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  std::vector<float> data;

  int count() const { return rows * cols; }
  std::span<const float> patch(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
};

/// Raw 768-value patches (row, col, channel order inside each patch).
PatchSequence patchify_raw(const Image& image);
Image unpatchify_raw(const PatchSequence& patches);

/// kTokens x dim latent matrix.
struct Latents {
  int dim = 0;
  std::vector<float> data;

  std::span<const float> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  friend bool operator==(const Latents&, const Latents&) = default;
};

struct VisualTokenSeq {
  std::vector<int> codes;
  friend bool operator==(const VisualTokenSeq&, const VisualTokenSeq&) = default;
};

class Codebook {
 public:
  Codebook() = default;
  /// `rows` is kVocab x dim, row-major; entries must be finite.
  Codebook(int dim, std::vector<float> rows);

  int size() const { return kVocab; }
  int dim() const { return dim_; }
  std::span<const float> row(int k) const;
  const std::vector<float>& rows() const { return rows_; }

  /// Index of the nearest row under squared Euclidean distance; ties go to
  /// the lowest index. Scans a transposed copy, bitwise equal to the scalar scan.
  int nearest(std::span<const float> z) const;
  int nearest_bruteforce(std::span<const float> z) const;

  void save(const std::filesystem::path& path) const;
  static Codebook load(const std::filesystem::path& path);

 private:
  int dim_ = 0;
  std::vector<float> rows_;
  std::vector<float> columns_;  // dim x kVocab
};

/// Encoder, latent bank and decoder weights.
struct VisualModel {
  int dim = kDefaultDim;
  std::vector<float> patch_mean;   // kPatchDim
  std::vector<float> patch_proj;   // [kPatchDim][dim]
  std::vector<float> slot_proj;    // [kPatchesPerSlot * dim][dim]
  std::vector<float> latent_bias;  // L: [kTokens][dim]
  std::vector<float> decoder;      // [dim][kSlotPixels], shared by all slots
  std::vector<float> mask_bias;    // M: [kPatches][kPatchDim], one per grid position

  void validate() const;
  void save(const std::filesystem::path& path) const;
  static VisualModel load(const std::filesystem::path& path);
};

/// Projects every raw patch to a dim-vector.
PatchSequence patchify(const Image& image, const VisualModel& model);
/// Z = slot_proj(concat of the slot's 8 patch embeddings) + L.
Latents encode_latents(const PatchSequence& patches, const VisualModel& model);
VisualTokenSeq quantize_latents(const Latents& z, const Codebook& codebook);
Latents lookup(const VisualTokenSeq& codes, const Codebook& codebook);
/// Each slot broadcasts its latent over its 8 mask positions; output clamped to [0, 1].
Image decode_image(const Latents& z, const VisualModel& model);

struct KMeansResult {
  int k = 0;
  int dim = 0;
  std::vector<float> centroids;   // k x dim
  std::vector<double> objective;  // after each assignment step
};

/// Lloyd's k-means with k-means++ seeding. Identical samples are merged and
/// weighted; empty clusters are re-seeded from a random sample.
KMeansResult kmeans(std::span<const float> samples, int dim, int k, int iterations = 20,
                    std::uint64_t seed = 0);

/// Training corpus: frames are produced on demand so large corpora need not
/// sit in memory. Training makes several passes; `frame` must be deterministic.
struct FrameSource {
  std::size_t count = 0;
  std::function<Image(std::size_t)> frame;

  FrameSource(std::size_t n, std::function<Image(std::size_t)> f) : count(n), frame(std::move(f)) {}
  FrameSource(std::span<const Image> frames)
      : count(frames.size()), frame([frames](std::size_t i) { return frames[i]; }) {}
  FrameSource(const std::vector<Image>& frames) : FrameSource(std::span<const Image>(frames)) {}
};

/// Fits the patch embedding and slot projection by PCA; decoder left empty.
VisualModel fit_encoder(const FrameSource& frames, int dim = kDefaultDim, std::uint64_t seed = 0);

/// k-means (k = 4096) over the distinct latents of the corpus (all latents when
/// fewer than 4096 are distinct). InsufficientData when fewer than 4096 latents
/// are available.
Codebook train_codebook(const FrameSource& frames, const VisualModel& model, int iterations = 20,
                        std::uint64_t seed = 0, std::vector<double>* objective = nullptr);

struct DecoderFit {
  double train_mse = 0.0;
  double baseline_mse = 0.0;  // per-position mean patch predictor
};

/// Least-squares fit of decoder and mask biases from quantized latents to pixels.
DecoderFit fit_decoder(const FrameSource& frames, VisualModel& model, const Codebook& codebook);

/// Per-position mean of a frame corpus: the constant per-patch predictor.
Image mean_image(const FrameSource& frames);

class VisualTokenizer {
 public:
  struct TrainConfig {
    int dim = kDefaultDim;
    int iterations = 20;
    std::uint64_t seed = 0;
  };
  struct TrainReport {
    std::vector<double> kmeans_objective;
    DecoderFit decoder;
  };

  /// Encoding of a fixed frame, for incremental encode/decode of frames that
  /// differ from it in a few patches.
  struct Reference {
    Image image;
    std::vector<float> embeddings;  // kPatches x dim
    VisualTokenSeq codes;
    Image decoded;
  };

  VisualTokenizer(VisualModel model, Codebook codebook);
  VisualTokenizer(VisualTokenizer&&) noexcept;
  VisualTokenizer& operator=(VisualTokenizer&&) noexcept;
  ~VisualTokenizer();

  static VisualTokenizer train(const FrameSource& frames, const TrainConfig& config,
                               TrainReport* report = nullptr);

  Latents encode_latents(const Image& image) const;
  VisualTokenSeq encode(const Image& image) const;
  Image decode(const VisualTokenSeq& codes) const;

  Reference make_reference(const Image& image) const;
  /// Same result as encode(image), recomputing only patches that differ from the reference.
  VisualTokenSeq encode(const Image& image, const Reference& ref) const;
  /// Same result as decode(codes), redrawing only slots whose code differs.
  Image decode(const VisualTokenSeq& codes, const Reference& ref) const;
  /// Turns `ref` into make_reference(image) in place, touching only changed patches.
  /// Suited to frame sequences where consecutive frames differ locally.
  void advance(Reference& ref, const Image& image) const;

  const VisualModel& model() const { return model_; }
  const Codebook& codebook() const { return codebook_; }

  /// Directory layout: codebook.fvcb, weights.fvvw.
  void save(const std::filesystem::path& dir) const;
  static VisualTokenizer load(const std::filesystem::path& dir);

 private:
  struct SlotCache;
  std::span<const float> decoded_code(int code) const;
  void check_codes(const VisualTokenSeq& codes) const;

  VisualModel model_;
  Codebook codebook_;
  std::unique_ptr<SlotCache> cache_;
};

}  // namespace fvla::visual
