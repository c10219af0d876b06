#pragma once

// Temporally adaptive cascaded compression: per-frame depth schedules, token
// budget arithmetic, and the strided-conv / 2x2 merger feature path.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fvla::compression {

inline constexpr int kDefaultMaxDepth = 2;

struct GridSize {
  int rows = 16;
  int cols = 16;
};

/// Frame counts per compression depth, oldest tier first: (N2, N1, N0).
struct Allocation {
  int deep = 0;  // depth 2
  int mid = 0;   // depth 1
  int full = 0;  // depth 0

  int total() const { return deep + mid + full; }
  friend bool operator==(const Allocation&, const Allocation&) = default;
};

std::string to_string(const Allocation& a);
Allocation parse_allocation(const std::string& text);  // "8,6,2"
GridSize parse_grid(const std::string& text);          // "16x16"

/// Row-major (row, col, channel) feature map.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int c);

  float& at(int r, int c, int ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  float at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  std::size_t tokens() const { return static_cast<std::size_t>(height) * width; }
};

struct CompressionSchedule {
  int horizon = 0;
  std::vector<int> depths;  // oldest frame first
  Allocation allocation;
};

/// Depth 2 for the N2 oldest frames, then depth 1, then depth 0 for the newest.
CompressionSchedule make_schedule(int horizon, const Allocation& allocation);

/// Tokens left after `depth` halvings and the final 2x2 merge.
std::int64_t tokens_per_frame(int depth, const GridSize& base_grid);

std::int64_t schedule_budget(const CompressionSchedule& schedule, const GridSize& base_grid);

/// Every (N2, N1, N0) summing to `horizon` whose budget fits, largest budget first.
std::vector<Allocation> enumerate_allocations(int horizon, std::int64_t budget,
                                              const GridSize& base_grid);

/// Stage k: 2x2 stride-2 conv kernel [out][in][kr][kc] plus bias. Merger:
/// [merged_dim][4 * channels] projection plus bias, input blocks ordered
/// top-left, top-right, bottom-left, bottom-right.
class CompressorWeights {
 public:
  struct Stage {
    std::vector<float> kernel;
    std::vector<float> bias;
  };

  CompressorWeights(int max_depth, int channels, int merged_dim, std::vector<Stage> stages,
                    std::vector<float> merger, std::vector<float> merger_bias);

  /// Seeded Gaussian init. With `shared`, every stage carries the same kernel.
  static CompressorWeights random(std::uint64_t seed, int channels, int merged_dim,
                                  int max_depth = kDefaultMaxDepth, bool shared = true);

  static CompressorWeights load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int max_depth() const { return max_depth_; }
  int channels() const { return channels_; }
  int merged_dim() const { return merged_dim_; }
  const Stage& stage(int k) const { return stages_.at(static_cast<std::size_t>(k)); }
  const std::vector<float>& merger() const { return merger_; }
  const std::vector<float>& merger_bias() const { return merger_bias_; }

 private:
  int max_depth_;
  int channels_;
  int merged_dim_;
  std::vector<Stage> stages_;
  std::vector<float> merger_;
  std::vector<float> merger_bias_;
};

/// tanh-approximated GeLU.
double gelu(double x);

/// `depth` successive (stride-2 conv -> GeLU) stages; depth 0 returns a copy.
FeatureGrid compress_frame(const FeatureGrid& features, int depth, const CompressorWeights& weights);

FeatureGrid merge_patches(const FeatureGrid& features, const CompressorWeights& weights);

}  // namespace fvla::compression
