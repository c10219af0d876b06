#include "fvla/compression.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "fvla/binio.hpp"
#include "fvla/error.hpp"

namespace fvla::compression {

namespace {

constexpr std::uint32_t kWeightsVersion = 1;

bool divisible(int value, std::int64_t by) { return by > 0 && value % by == 0; }

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "cannot parse " + what + " from '" + s + "'");
  }
}

}  // namespace

std::string to_string(const Allocation& a) {
  return std::to_string(a.deep) + ":" + std::to_string(a.mid) + ":" + std::to_string(a.full);
}

Allocation parse_allocation(const std::string& text) {
  std::vector<int> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(parse_int(item, "allocation"));
  if (parts.size() != 3)
    throw Error(ErrorCode::InvalidArgument, "allocation needs three counts N2,N1,N0: " + text);
  return {parts[0], parts[1], parts[2]};
}

GridSize parse_grid(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw Error(ErrorCode::InvalidArgument, "grid must look like 16x16");
  return {parse_int(text.substr(0, x), "grid rows"), parse_int(text.substr(x + 1), "grid cols")};
}

FeatureGrid::FeatureGrid(int h, int w, int c)
    : height(h), width(w), channels(c),
      data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c)) {
  if (h < 1 || w < 1 || c < 1)
    throw Error(ErrorCode::InvalidArgument, "feature grid dimensions must be positive");
}

CompressionSchedule make_schedule(int horizon, const Allocation& allocation) {
  if (allocation.deep < 0 || allocation.mid < 0 || allocation.full < 0)
    throw Error(ErrorCode::AllocationMismatch, "negative frame count in " + to_string(allocation));
  if (allocation.total() != horizon)
    throw Error(ErrorCode::AllocationMismatch, "allocation " + to_string(allocation) +
                                                   " sums to " + std::to_string(allocation.total()) +
                                                   ", horizon is " + std::to_string(horizon));
  CompressionSchedule s;
  s.horizon = horizon;
  s.allocation = allocation;
  s.depths.reserve(static_cast<std::size_t>(horizon));
  s.depths.insert(s.depths.end(), static_cast<std::size_t>(allocation.deep), 2);
  s.depths.insert(s.depths.end(), static_cast<std::size_t>(allocation.mid), 1);
  s.depths.insert(s.depths.end(), static_cast<std::size_t>(allocation.full), 0);
  return s;
}

std::int64_t tokens_per_frame(int depth, const GridSize& base_grid) {
  if (depth < 0 || depth > 30) throw Error(ErrorCode::DepthOutOfRange, "depth " + std::to_string(depth));
  const std::int64_t factor = std::int64_t{1} << (depth + 1);
  if (!divisible(base_grid.rows, factor) || !divisible(base_grid.cols, factor))
    throw Error(ErrorCode::IndivisibleGrid,
                std::to_string(base_grid.rows) + "x" + std::to_string(base_grid.cols) +
                    " is not divisible by " + std::to_string(factor) + " at depth " +
                    std::to_string(depth));
  return (base_grid.rows / factor) * (base_grid.cols / factor);
}

std::int64_t schedule_budget(const CompressionSchedule& schedule, const GridSize& base_grid) {
  if (static_cast<int>(schedule.depths.size()) != schedule.horizon)
    throw Error(ErrorCode::AllocationMismatch, "schedule depth list does not match its horizon");
  std::int64_t total = 0;
  for (int d : schedule.depths) total += tokens_per_frame(d, base_grid);
  return total;
}

std::vector<Allocation> enumerate_allocations(int horizon, std::int64_t budget,
                                              const GridSize& base_grid) {
  if (horizon < 1) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
  const std::int64_t c2 = tokens_per_frame(2, base_grid);
  const std::int64_t c1 = tokens_per_frame(1, base_grid);
  const std::int64_t c0 = tokens_per_frame(0, base_grid);
  std::vector<std::pair<std::int64_t, Allocation>> found;
  for (int n2 = horizon; n2 >= 0; --n2) {
    for (int n1 = horizon - n2; n1 >= 0; --n1) {
      const int n0 = horizon - n2 - n1;
      const std::int64_t cost = n2 * c2 + n1 * c1 + n0 * c0;
      if (cost <= budget) found.push_back({cost, {n2, n1, n0}});
    }
  }
  std::stable_sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    if (a.second.full != b.second.full) return a.second.full > b.second.full;
    return a.second.mid > b.second.mid;
  });
  std::vector<Allocation> out;
  out.reserve(found.size());
  for (const auto& f : found) out.push_back(f.second);
  return out;
}

CompressorWeights::CompressorWeights(int max_depth, int channels, int merged_dim,
                                     std::vector<Stage> stages, std::vector<float> merger,
                                     std::vector<float> merger_bias)
    : max_depth_(max_depth),
      channels_(channels),
      merged_dim_(merged_dim),
      stages_(std::move(stages)),
      merger_(std::move(merger)),
      merger_bias_(std::move(merger_bias)) {
  if (max_depth_ < 0 || channels_ < 1 || merged_dim_ < 1)
    throw Error(ErrorCode::WeightShapeMismatch, "invalid compressor dimensions");
  if (static_cast<int>(stages_.size()) != max_depth_)
    throw Error(ErrorCode::WeightShapeMismatch, "expected exactly max_depth conv stages");
  const std::size_t c = static_cast<std::size_t>(channels_);
  for (const auto& s : stages_) {
    if (s.kernel.size() != c * c * 4 || s.bias.size() != c)
      throw Error(ErrorCode::WeightShapeMismatch, "conv stage shape does not match channels");
  }
  if (merger_.size() != static_cast<std::size_t>(merged_dim_) * 4 * c ||
      merger_bias_.size() != static_cast<std::size_t>(merged_dim_))
    throw Error(ErrorCode::WeightShapeMismatch, "merger projection shape mismatch");
}

CompressorWeights CompressorWeights::random(std::uint64_t seed, int channels, int merged_dim,
                                            int max_depth, bool shared) {
  std::mt19937_64 rng(seed);
  const std::size_t c = static_cast<std::size_t>(std::max(channels, 1));
  std::normal_distribution<float> conv_init(0.0f, 1.0f / std::sqrt(4.0f * static_cast<float>(c)));
  std::normal_distribution<float> merge_init(0.0f, 1.0f / std::sqrt(4.0f * static_cast<float>(c)));
  auto make_stage = [&] {
    Stage s;
    s.kernel.resize(c * c * 4);
    s.bias.assign(c, 0.0f);
    for (float& v : s.kernel) v = conv_init(rng);
    return s;
  };
  std::vector<Stage> stages;
  if (max_depth > 0) {
    stages.push_back(make_stage());
    for (int k = 1; k < max_depth; ++k) stages.push_back(shared ? stages.front() : make_stage());
  }
  std::vector<float> merger(static_cast<std::size_t>(std::max(merged_dim, 1)) * 4 * c);
  for (float& v : merger) v = merge_init(rng);
  std::vector<float> merger_bias(static_cast<std::size_t>(std::max(merged_dim, 1)), 0.0f);
  return CompressorWeights(max_depth, channels, merged_dim, std::move(stages), std::move(merger),
                           std::move(merger_bias));
}

CompressorWeights CompressorWeights::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  binio::expect_magic(is, "FVCW");
  const auto version = binio::read_u32(is);
  if (version != kWeightsVersion)
    throw Error(ErrorCode::FormatError, "unsupported FVCW version " + std::to_string(version));
  const int max_depth = static_cast<int>(binio::read_u32(is));
  const int channels = static_cast<int>(binio::read_u32(is));
  const int merged_dim = static_cast<int>(binio::read_u32(is));
  if (max_depth > 16 || channels < 1 || channels > 4096 || merged_dim < 1 || merged_dim > 65536)
    throw Error(ErrorCode::WeightShapeMismatch, "implausible FVCW header");
  const std::size_t c = static_cast<std::size_t>(channels);
  std::vector<Stage> stages(static_cast<std::size_t>(max_depth));
  for (auto& s : stages) {
    s.kernel.resize(c * c * 4);
    s.bias.resize(c);
    binio::read_f32s(is, s.kernel);
    binio::read_f32s(is, s.bias);
  }
  std::vector<float> merger(static_cast<std::size_t>(merged_dim) * 4 * c);
  std::vector<float> merger_bias(static_cast<std::size_t>(merged_dim));
  binio::read_f32s(is, merger);
  binio::read_f32s(is, merger_bias);
  binio::expect_eof(is);
  return CompressorWeights(max_depth, channels, merged_dim, std::move(stages), std::move(merger),
                           std::move(merger_bias));
}

void CompressorWeights::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  binio::write_magic(os, "FVCW");
  binio::write_u32(os, kWeightsVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(max_depth_));
  binio::write_u32(os, static_cast<std::uint32_t>(channels_));
  binio::write_u32(os, static_cast<std::uint32_t>(merged_dim_));
  for (const auto& s : stages_) {
    binio::write_f32s(os, s.kernel);
    binio::write_f32s(os, s.bias);
  }
  binio::write_f32s(os, merger_);
  binio::write_f32s(os, merger_bias_);
}

double gelu(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

namespace {

FeatureGrid conv_stage(const FeatureGrid& in, const CompressorWeights::Stage& stage) {
  const int ch = in.channels;
  FeatureGrid out(in.height / 2, in.width / 2, ch);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      for (int o = 0; o < ch; ++o) {
        double acc = stage.bias[static_cast<std::size_t>(o)];
        const float* k = &stage.kernel[static_cast<std::size_t>(o) * ch * 4];
        for (int i = 0; i < ch; ++i) {
          for (int dr = 0; dr < 2; ++dr) {
            for (int dc = 0; dc < 2; ++dc) {
              acc += static_cast<double>(k[(i * 2 + dr) * 2 + dc]) *
                     in.at(2 * r + dr, 2 * c + dc, i);
            }
          }
        }
        out.at(r, c, o) = static_cast<float>(gelu(acc));
      }
    }
  }
  return out;
}

}  // namespace

FeatureGrid compress_frame(const FeatureGrid& features, int depth, const CompressorWeights& weights) {
  if (depth < 0 || depth > weights.max_depth())
    throw Error(ErrorCode::DepthOutOfRange,
                "depth " + std::to_string(depth) + " exceeds max_depth " +
                    std::to_string(weights.max_depth()));
  if (features.channels != weights.channels())
    throw Error(ErrorCode::WeightShapeMismatch,
                "features carry " + std::to_string(features.channels) + " channels, weights expect " +
                    std::to_string(weights.channels()));
  const int factor = 1 << depth;
  if (features.height % factor != 0 || features.width % factor != 0)
    throw Error(ErrorCode::IndivisibleGrid, "feature grid not divisible by " + std::to_string(factor));
  FeatureGrid x = features;
  for (int k = 0; k < depth; ++k) x = conv_stage(x, weights.stage(k));
  return x;
}

FeatureGrid merge_patches(const FeatureGrid& features, const CompressorWeights& weights) {
  if (features.height % 2 != 0 || features.width % 2 != 0)
    throw Error(ErrorCode::IndivisibleGrid, "merger needs even grid dimensions, got " +
                                                std::to_string(features.height) + "x" +
                                                std::to_string(features.width));
  if (features.channels != weights.channels())
    throw Error(ErrorCode::WeightShapeMismatch, "merger channel mismatch");
  const int ch = features.channels;
  const int out_dim = weights.merged_dim();
  FeatureGrid out(features.height / 2, features.width / 2, out_dim);
  std::vector<float> block(static_cast<std::size_t>(4 * ch));
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      for (int b = 0; b < 4; ++b) {
        for (int i = 0; i < ch; ++i)
          block[static_cast<std::size_t>(b * ch + i)] = features.at(2 * r + b / 2, 2 * c + b % 2, i);
      }
      for (int o = 0; o < out_dim; ++o) {
        double acc = weights.merger_bias()[static_cast<std::size_t>(o)];
        const float* w = &weights.merger()[static_cast<std::size_t>(o) * 4 * ch];
        for (int j = 0; j < 4 * ch; ++j) acc += static_cast<double>(w[j]) * block[static_cast<std::size_t>(j)];
        out.at(r, c, o) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

}  // namespace fvla::compression
