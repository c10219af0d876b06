#include "fvla/visual_codec.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <random>
#include <string>
#include <tuple>
#include <unordered_map>

#include "fvla/binio.hpp"
#include "fvla/error.hpp"

namespace fvla::visual {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr int kMaxPcaSamples = 30000;

void check_frame(const Image& image) {
  if (image.height % kPatch != 0 || image.width % kPatch != 0)
    throw Error(ErrorCode::IndivisibleImage, std::to_string(image.height) + "x" + std::to_string(image.width) +
                                                 " is not a multiple of " + std::to_string(kPatch));
  if (image.height != kImageSize || image.width != kImageSize)
    throw Error(ErrorCode::InvalidArgument, "visual codec expects 256x256 frames");
}

/// out[o] = sum_i in[i] * w[i][o], accumulated in ascending i.
void matvec(const float* w, const float* in, int n_in, int n_out, float* out) {
  std::fill(out, out + n_out, 0.0f);
  for (int i = 0; i < n_in; ++i) {
    const float x = in[i];
    const float* row = w + static_cast<std::size_t>(i) * n_out;
    for (int o = 0; o < n_out; ++o) out[o] += row[o] * x;
  }
}

int patch_row0(int p) { return (p / kGrid) * kPatch; }
int patch_col0(int p) { return (p % kGrid) * kPatch; }

void gather_patch(const Image& image, int p, float* out) {
  const int r0 = patch_row0(p);
  const int c0 = patch_col0(p);
  for (int r = 0; r < kPatch; ++r) {
    const float* src = image.data.data() + (static_cast<std::size_t>(r0 + r) * image.width + c0) * 3;
    std::copy(src, src + kPatch * 3, out + r * kPatch * 3);
  }
}

bool patch_equal(const Image& a, const Image& b, int p) {
  const int r0 = patch_row0(p);
  const int c0 = patch_col0(p);
  for (int r = 0; r < kPatch; ++r) {
    const std::size_t off = (static_cast<std::size_t>(r0 + r) * a.width + c0) * 3;
    if (std::memcmp(a.data.data() + off, b.data.data() + off, sizeof(float) * kPatch * 3) != 0) return false;
  }
  return true;
}

void embed_patch(const VisualModel& m, const float* raw, float* out) {
  float centered[kPatchDim];
  for (int j = 0; j < kPatchDim; ++j) centered[j] = raw[j] - m.patch_mean[static_cast<std::size_t>(j)];
  matvec(m.patch_proj.data(), centered, kPatchDim, m.dim, out);
}

/// `embeddings` points at the slot's 8 consecutive patch embeddings.
void slot_latent(const VisualModel& m, int slot, const float* embeddings, float* out) {
  matvec(m.slot_proj.data(), embeddings, kPatchesPerSlot * m.dim, m.dim, out);
  const float* bias = m.latent_bias.data() + static_cast<std::size_t>(slot) * m.dim;
  for (int d = 0; d < m.dim; ++d) out[d] += bias[d];
}

void decode_slot(const VisualModel& m, const float* z, float* y) {
  matvec(m.decoder.data(), z, m.dim, kSlotPixels, y);
}

/// Adds the slot's mask biases to a decoded strip, clamps, and writes it into `out`.
void paint_slot(const VisualModel& m, int slot, const float* y, Image& out) {
  for (int j = 0; j < kPatchesPerSlot; ++j) {
    const int p = slot * kPatchesPerSlot + j;
    const float* mask = m.mask_bias.data() + static_cast<std::size_t>(p) * kPatchDim;
    const float* src = y + static_cast<std::size_t>(j) * kPatchDim;
    const int r0 = patch_row0(p);
    const int c0 = patch_col0(p);
    for (int r = 0; r < kPatch; ++r) {
      float* dst = out.data.data() + (static_cast<std::size_t>(r0 + r) * out.width + c0) * 3;
      for (int q = 0; q < kPatch * 3; ++q)
        dst[q] = std::clamp(src[r * kPatch * 3 + q] + mask[r * kPatch * 3 + q], 0.0f, 1.0f);
    }
  }
}

std::uint64_t hash_row(const float* row, int dim) {
  std::uint64_t h = 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(dim);
  const auto* bytes = reinterpret_cast<const unsigned char*>(row);
  const std::size_t n = sizeof(float) * static_cast<std::size_t>(dim);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t w = 0;
    std::memcpy(&w, bytes + i, 8);
    h = (h ^ w) * 0x100000001B3ull;
    h ^= h >> 29;
  }
  for (; i < n; ++i) h = (h ^ bytes[i]) * 0x100000001B3ull;
  return h;
}

/// Set of distinct float rows with multiplicities.
class RowSet {
 public:
  explicit RowSet(int dim) : dim_(dim) {}

  int insert(const float* row, double weight = 1.0) {
    auto& bucket = index_[hash_row(row, dim_)];
    for (int id : bucket) {
      if (std::memcmp(this->row(id), row, sizeof(float) * static_cast<std::size_t>(dim_)) == 0) {
        weights_[static_cast<std::size_t>(id)] += weight;
        return id;
      }
    }
    const int id = size();
    rows_.insert(rows_.end(), row, row + dim_);
    weights_.push_back(weight);
    bucket.push_back(id);
    return id;
  }

  int size() const { return static_cast<int>(weights_.size()); }
  int dim() const { return dim_; }
  const float* row(int id) const { return rows_.data() + static_cast<std::size_t>(id) * dim_; }
  const std::vector<float>& rows() const { return rows_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  int dim_;
  std::vector<float> rows_;
  std::vector<double> weights_;
  std::unordered_map<std::uint64_t, std::vector<int>> index_;
};

/// Memoized patch embedding and slot latents for training passes over a corpus.
class CorpusEncoder {
 public:
  explicit CorpusEncoder(const VisualModel& m) : m_(m), patches_(kPatchDim) {}

  void latents(const Image& image, float* out) {
    check_frame(image);
    std::vector<float> raw(kPatchDim);
    std::vector<float> emb(static_cast<std::size_t>(kPatches) * m_.dim);
    for (int p = 0; p < kPatches; ++p) {
      gather_patch(image, p, raw.data());
      const int before = patches_.size();
      const int id = patches_.insert(raw.data());
      if (id == before) {
        embeddings_.resize(embeddings_.size() + static_cast<std::size_t>(m_.dim));
        embed_patch(m_, raw.data(), embeddings_.data() + static_cast<std::size_t>(id) * m_.dim);
      }
      std::copy_n(embeddings_.data() + static_cast<std::size_t>(id) * m_.dim, m_.dim,
                  emb.data() + static_cast<std::size_t>(p) * m_.dim);
    }
    for (int s = 0; s < kTokens; ++s)
      slot_latent(m_, s, emb.data() + static_cast<std::size_t>(s) * kPatchesPerSlot * m_.dim,
                  out + static_cast<std::size_t>(s) * m_.dim);
  }

 private:
  const VisualModel& m_;
  RowSet patches_;
  std::vector<float> embeddings_;
};

/// Top-`dim` principal directions of the rows, as an [in][dim] matrix, plus the row mean.
std::pair<std::vector<float>, std::vector<float>> pca(const RowSet& set, int dim, std::uint64_t seed) {
  const int in = set.dim();
  std::vector<int> pick(static_cast<std::size_t>(set.size()));
  for (int i = 0; i < set.size(); ++i) pick[static_cast<std::size_t>(i)] = i;
  if (set.size() > kMaxPcaSamples) {
    std::mt19937_64 rng(seed);
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(kMaxPcaSamples);
    std::sort(pick.begin(), pick.end());
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(in);
  for (int id : pick)
    for (int j = 0; j < in; ++j) mean[j] += set.row(id)[j];
  mean /= static_cast<double>(pick.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(in, in);
  constexpr std::size_t kBlock = 2048;
  for (std::size_t start = 0; start < pick.size(); start += kBlock) {
    const std::size_t n = std::min(kBlock, pick.size() - start);
    Eigen::MatrixXf x(static_cast<Eigen::Index>(n), in);
    for (std::size_t r = 0; r < n; ++r)
      for (int j = 0; j < in; ++j)
        x(static_cast<Eigen::Index>(r), j) = static_cast<float>(set.row(pick[start + r])[j] - mean[j]);
    cov += (x.transpose() * x).cast<double>();
  }
  cov /= static_cast<double>(std::max<std::size_t>(1, pick.size()));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::SingularSystem, "PCA eigendecomposition failed");
  std::vector<float> proj(static_cast<std::size_t>(in) * dim, 0.0f);
  for (int d = 0; d < dim && d < in; ++d) {
    Eigen::VectorXd v = eig.eigenvectors().col(in - 1 - d);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    for (int j = 0; j < in; ++j) proj[static_cast<std::size_t>(j) * dim + d] = static_cast<float>(v[j]);
  }
  std::vector<float> mean_f(static_cast<std::size_t>(in));
  for (int j = 0; j < in; ++j) mean_f[static_cast<std::size_t>(j)] = static_cast<float>(mean[j]);
  return {std::move(proj), std::move(mean_f)};
}

std::size_t pick_weighted(const std::vector<double>& w, double total, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, total);
  double target = u(rng);
  for (std::size_t i = 0; i < w.size(); ++i) {
    target -= w[i];
    if (target < 0.0) return i;
  }
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0.0) return i;
  return 0;
}

}  // namespace

// ---------------------------------------------------------------- patches

PatchSequence patchify_raw(const Image& image) {
  if (image.height % kPatch != 0 || image.width % kPatch != 0)
    throw Error(ErrorCode::IndivisibleImage, std::to_string(image.height) + "x" + std::to_string(image.width) +
                                                 " is not a multiple of " + std::to_string(kPatch));
  PatchSequence out{image.height / kPatch, image.width / kPatch, kPatchDim, {}};
  out.data.resize(static_cast<std::size_t>(out.count()) * kPatchDim);
  for (int pr = 0; pr < out.rows; ++pr)
    for (int pc = 0; pc < out.cols; ++pc)
      for (int r = 0; r < kPatch; ++r) {
        const float* src = image.data.data() + (static_cast<std::size_t>(pr * kPatch + r) * image.width + pc * kPatch) * 3;
        std::copy(src, src + kPatch * 3,
                  out.data.data() + static_cast<std::size_t>(pr * out.cols + pc) * kPatchDim + r * kPatch * 3);
      }
  return out;
}

Image unpatchify_raw(const PatchSequence& patches) {
  if (patches.dim != kPatchDim) throw Error(ErrorCode::InvalidArgument, "unpatchify needs raw 768-value patches");
  Image image(patches.rows * kPatch, patches.cols * kPatch);
  for (int pr = 0; pr < patches.rows; ++pr)
    for (int pc = 0; pc < patches.cols; ++pc)
      for (int r = 0; r < kPatch; ++r) {
        const float* src = patches.data.data() + static_cast<std::size_t>(pr * patches.cols + pc) * kPatchDim + r * kPatch * 3;
        std::copy(src, src + kPatch * 3,
                  image.data.data() + (static_cast<std::size_t>(pr * kPatch + r) * image.width + pc * kPatch) * 3);
      }
  return image;
}

// ---------------------------------------------------------------- codebook

Codebook::Codebook(int dim, std::vector<float> rows) : dim_(dim), rows_(std::move(rows)) {
  if (dim_ < 1) throw Error(ErrorCode::InvalidArgument, "codebook dimension must be positive");
  if (rows_.size() != static_cast<std::size_t>(kVocab) * dim_)
    throw Error(ErrorCode::InvalidArgument, "codebook must hold exactly 4096 rows");
  for (std::size_t i = 0; i < rows_.size(); ++i)
    if (!std::isfinite(rows_[i])) throw Error(ErrorCode::FormatError, "non-finite codebook entry", i);
  columns_.resize(rows_.size());
  for (int k = 0; k < kVocab; ++k)
    for (int d = 0; d < dim_; ++d)
      columns_[static_cast<std::size_t>(d) * kVocab + k] = rows_[static_cast<std::size_t>(k) * dim_ + d];
}

std::span<const float> Codebook::row(int k) const {
  if (k < 0 || k >= kVocab) throw Error(ErrorCode::IndexOutOfRange, "code " + std::to_string(k) + " >= 4096");
  return {rows_.data() + static_cast<std::size_t>(k) * dim_, static_cast<std::size_t>(dim_)};
}

int Codebook::nearest(std::span<const float> z) const {
  if (static_cast<int>(z.size()) != dim_) throw Error(ErrorCode::InvalidArgument, "latent dimension mismatch");
  alignas(64) float dist[kVocab] = {};
  for (int d = 0; d < dim_; ++d) {
    const float zd = z[static_cast<std::size_t>(d)];
    const float* col = columns_.data() + static_cast<std::size_t>(d) * kVocab;
    for (int k = 0; k < kVocab; ++k) {
      const float diff = zd - col[k];
      dist[k] += diff * diff;
    }
  }
  int best = 0;
  for (int k = 1; k < kVocab; ++k)
    if (dist[k] < dist[best]) best = k;
  return best;
}

int Codebook::nearest_bruteforce(std::span<const float> z) const {
  if (static_cast<int>(z.size()) != dim_) throw Error(ErrorCode::InvalidArgument, "latent dimension mismatch");
  int best = -1;
  float best_dist = 0.0f;
  for (int k = 0; k < kVocab; ++k) {
    float acc = 0.0f;
    for (int d = 0; d < dim_; ++d) {
      const float diff = z[static_cast<std::size_t>(d)] - rows_[static_cast<std::size_t>(k) * dim_ + d];
      acc += diff * diff;
    }
    if (best < 0 || acc < best_dist) {
      best = k;
      best_dist = acc;
    }
  }
  return best;
}

void Codebook::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  binio::write_magic(os, "FVCB");
  binio::write_u32(os, kFormatVersion);
  binio::write_u32(os, kVocab);
  binio::write_u32(os, static_cast<std::uint32_t>(dim_));
  binio::write_f32s(os, rows_);
}

Codebook Codebook::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  binio::expect_magic(is, "FVCB");
  if (binio::read_u32(is) != kFormatVersion) throw Error(ErrorCode::FormatError, "unsupported FVCB version");
  if (binio::read_u32(is) != kVocab) throw Error(ErrorCode::FormatError, "FVCB vocabulary must be 4096");
  const auto dim = binio::read_u32(is);
  if (dim < 1 || dim > 4096) throw Error(ErrorCode::FormatError, "implausible FVCB dimension");
  std::vector<float> rows(static_cast<std::size_t>(kVocab) * dim);
  binio::read_f32s(is, rows);
  binio::expect_eof(is);
  return Codebook(static_cast<int>(dim), std::move(rows));
}

// ---------------------------------------------------------------- model

void VisualModel::validate() const {
  const auto d = static_cast<std::size_t>(dim);
  if (dim < 1 || patch_mean.size() != kPatchDim || patch_proj.size() != kPatchDim * d ||
      slot_proj.size() != kPatchesPerSlot * d * d || latent_bias.size() != kTokens * d ||
      decoder.size() != d * kSlotPixels || mask_bias.size() != static_cast<std::size_t>(kPatches) * kPatchDim)
    throw Error(ErrorCode::WeightShapeMismatch, "visual model weights have inconsistent shapes");
}

void VisualModel::save(const std::filesystem::path& path) const {
  validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  binio::write_magic(os, "FVVW");
  binio::write_u32(os, kFormatVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(dim));
  binio::write_u32(os, kPatchDim);
  binio::write_u32(os, kTokens);
  binio::write_u32(os, kPatches);
  for (const auto* v : {&patch_mean, &patch_proj, &slot_proj, &latent_bias, &decoder, &mask_bias})
    binio::write_f32s(os, *v);
}

VisualModel VisualModel::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  binio::expect_magic(is, "FVVW");
  if (binio::read_u32(is) != kFormatVersion) throw Error(ErrorCode::FormatError, "unsupported FVVW version");
  VisualModel m;
  const auto dim = binio::read_u32(is);
  if (dim < 1 || dim > 1024) throw Error(ErrorCode::FormatError, "implausible FVVW dimension");
  if (binio::read_u32(is) != kPatchDim || binio::read_u32(is) != kTokens || binio::read_u32(is) != kPatches)
    throw Error(ErrorCode::FormatError, "FVVW geometry does not match this codec");
  m.dim = static_cast<int>(dim);
  const std::size_t d = dim;
  m.patch_mean.resize(kPatchDim);
  m.patch_proj.resize(kPatchDim * d);
  m.slot_proj.resize(kPatchesPerSlot * d * d);
  m.latent_bias.resize(kTokens * d);
  m.decoder.resize(d * kSlotPixels);
  m.mask_bias.resize(static_cast<std::size_t>(kPatches) * kPatchDim);
  for (auto* v : {&m.patch_mean, &m.patch_proj, &m.slot_proj, &m.latent_bias, &m.decoder, &m.mask_bias})
    binio::read_f32s(is, *v);
  binio::expect_eof(is);
  return m;
}

// ---------------------------------------------------------------- pipeline

PatchSequence patchify(const Image& image, const VisualModel& model) {
  check_frame(image);
  PatchSequence out{kGrid, kGrid, model.dim, std::vector<float>(static_cast<std::size_t>(kPatches) * model.dim)};
  float raw[kPatchDim];
  for (int p = 0; p < kPatches; ++p) {
    gather_patch(image, p, raw);
    embed_patch(model, raw, out.data.data() + static_cast<std::size_t>(p) * model.dim);
  }
  return out;
}

Latents encode_latents(const PatchSequence& patches, const VisualModel& model) {
  if (patches.count() != kPatches || patches.dim != model.dim)
    throw Error(ErrorCode::WeightShapeMismatch, "patch sequence does not match the encoder");
  Latents z{model.dim, std::vector<float>(static_cast<std::size_t>(kTokens) * model.dim)};
  for (int s = 0; s < kTokens; ++s)
    slot_latent(model, s, patches.data.data() + static_cast<std::size_t>(s) * kPatchesPerSlot * model.dim,
                z.data.data() + static_cast<std::size_t>(s) * model.dim);
  return z;
}

VisualTokenSeq quantize_latents(const Latents& z, const Codebook& codebook) {
  if (z.dim != codebook.dim() || z.data.size() != static_cast<std::size_t>(kTokens) * z.dim)
    throw Error(ErrorCode::InvalidArgument, "latents do not match the codebook");
  VisualTokenSeq out;
  out.codes.resize(kTokens);
  for (int i = 0; i < kTokens; ++i) out.codes[static_cast<std::size_t>(i)] = codebook.nearest(z.row(i));
  return out;
}

Latents lookup(const VisualTokenSeq& codes, const Codebook& codebook) {
  if (codes.codes.size() != kTokens)
    throw Error(ErrorCode::InvalidArgument, "expected 32 codes, got " + std::to_string(codes.codes.size()));
  Latents z{codebook.dim(), {}};
  z.data.reserve(static_cast<std::size_t>(kTokens) * codebook.dim());
  for (std::size_t i = 0; i < codes.codes.size(); ++i) {
    const int c = codes.codes[i];
    if (c < 0 || c >= kVocab) throw Error(ErrorCode::IndexOutOfRange, "code " + std::to_string(c) + " out of range", i);
    const auto row = codebook.row(c);
    z.data.insert(z.data.end(), row.begin(), row.end());
  }
  return z;
}

Image decode_image(const Latents& z, const VisualModel& model) {
  if (z.dim != model.dim || z.data.size() != static_cast<std::size_t>(kTokens) * z.dim)
    throw Error(ErrorCode::WeightShapeMismatch, "latents do not match the decoder");
  Image out(kImageSize, kImageSize);
  std::vector<float> y(kSlotPixels);
  for (int s = 0; s < kTokens; ++s) {
    decode_slot(model, z.row(s).data(), y.data());
    paint_slot(model, s, y.data(), out);
  }
  return out;
}

// ---------------------------------------------------------------- training

KMeansResult kmeans(std::span<const float> samples, int dim, int k, int iterations, std::uint64_t seed) {
  if (dim < 1 || k < 1 || iterations < 0) throw Error(ErrorCode::InvalidArgument, "bad k-means parameters");
  if (samples.size() % static_cast<std::size_t>(dim) != 0)
    throw Error(ErrorCode::InvalidArgument, "sample buffer is not a multiple of the dimension");
  const std::size_t total = samples.size() / static_cast<std::size_t>(dim);
  if (total < static_cast<std::size_t>(k))
    throw Error(ErrorCode::InsufficientData,
                std::to_string(total) + " samples cannot seed " + std::to_string(k) + " clusters");

  RowSet set(dim);
  for (std::size_t i = 0; i < total; ++i) set.insert(samples.data() + i * dim);
  const int n = set.size();
  const auto& w = set.weights();
  double weight_sum = 0.0;
  for (double x : w) weight_sum += x;

  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.k = k;
  res.dim = dim;
  res.centroids.assign(static_cast<std::size_t>(k) * dim, 0.0f);
  auto centroid = [&](int c) { return res.centroids.data() + static_cast<std::size_t>(c) * dim; };
  auto sqdist = [&](const float* a, const float* b) {
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(a[d]) - b[d];
      acc += diff * diff;
    }
    return acc;
  };

  // k-means++ seeding over the weighted distinct samples.
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<double> score(static_cast<std::size_t>(n));
  int first = static_cast<int>(pick_weighted(w, weight_sum, rng));
  std::copy_n(set.row(first), dim, centroid(0));
  for (int c = 1; c < k; ++c) {
    const float* prev = centroid(c - 1);
    double mass = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      d2[ui] = std::min(d2[ui], sqdist(set.row(i), prev));
      score[ui] = w[ui] * d2[ui];
      mass += score[ui];
    }
    const std::size_t next = mass > 0.0 ? pick_weighted(score, mass, rng) : pick_weighted(w, weight_sum, rng);
    std::copy_n(set.row(static_cast<int>(next)), dim, centroid(c));
  }

  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(set.rows().data(), n, dim);
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  constexpr Eigen::Index kBlock = 1024;
  for (int it = 0; it < iterations; ++it) {
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> cm(res.centroids.data(), k, dim);
    const Eigen::VectorXf norms = cm.rowwise().squaredNorm();
    double objective = 0.0;
    for (Eigen::Index start = 0; start < n; start += kBlock) {
      const Eigen::Index rows = std::min<Eigen::Index>(kBlock, n - start);
      const Eigen::MatrixXf dots = x.middleRows(start, rows) * cm.transpose();
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto i = static_cast<int>(start + r);
        int best = 0;
        float best_score = std::numeric_limits<float>::infinity();
        for (int c = 0; c < k; ++c) {
          const float s = norms[c] - 2.0f * dots(r, c);
          if (s < best_score) {
            best_score = s;
            best = c;
          }
        }
        // Keep the current cluster unless the float shortcut found a strictly closer one.
        const int cur = assign[static_cast<std::size_t>(i)];
        const double d_best = sqdist(set.row(i), centroid(best));
        const double d_cur = sqdist(set.row(i), centroid(cur));
        const int chosen = (it > 0 && d_cur <= d_best) ? cur : best;
        assign[static_cast<std::size_t>(i)] = chosen;
        objective += w[static_cast<std::size_t>(i)] * (chosen == best ? d_best : d_cur);
      }
    }
    res.objective.push_back(objective);

    std::vector<double> sums(static_cast<std::size_t>(k) * dim, 0.0);
    std::vector<double> mass(static_cast<std::size_t>(k), 0.0);
    for (int i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]);
      mass[c] += w[static_cast<std::size_t>(i)];
      for (int d = 0; d < dim; ++d) sums[c * dim + d] += w[static_cast<std::size_t>(i)] * set.row(i)[d];
    }
    for (int c = 0; c < k; ++c) {
      const auto uc = static_cast<std::size_t>(c);
      if (mass[uc] > 0.0) {
        for (int d = 0; d < dim; ++d) centroid(c)[d] = static_cast<float>(sums[uc * dim + d] / mass[uc]);
      } else {
        std::copy_n(set.row(static_cast<int>(pick_weighted(w, weight_sum, rng))), dim, centroid(c));
      }
    }
  }
  return res;
}

VisualModel fit_encoder(const FrameSource& frames, int dim, std::uint64_t seed) {
  if (frames.count == 0) throw Error(ErrorCode::InsufficientData, "no frames to fit the encoder on");
  if (dim < 1 || dim > kPatchDim) throw Error(ErrorCode::InvalidArgument, "latent dimension out of range");
  VisualModel m;
  m.dim = dim;
  const auto d = static_cast<std::size_t>(dim);

  RowSet patches(kPatchDim);
  std::vector<float> raw(kPatchDim);
  for (std::size_t i = 0; i < frames.count; ++i) {
    const Image f = frames.frame(i);
    check_frame(f);
    for (int p = 0; p < kPatches; ++p) {
      gather_patch(f, p, raw.data());
      patches.insert(raw.data());
    }
  }
  std::tie(m.patch_proj, m.patch_mean) = pca(patches, dim, seed);

  // Slot projection: PCA over concatenated patch embeddings.
  m.slot_proj.assign(kPatchesPerSlot * d * d, 0.0f);
  m.latent_bias.assign(kTokens * d, 0.0f);
  m.decoder.assign(d * kSlotPixels, 0.0f);
  m.mask_bias.assign(static_cast<std::size_t>(kPatches) * kPatchDim, 0.0f);
  std::vector<float> embeddings(static_cast<std::size_t>(patches.size()) * d);
  for (int i = 0; i < patches.size(); ++i) embed_patch(m, patches.row(i), embeddings.data() + static_cast<std::size_t>(i) * d);
  RowSet slots(kPatchesPerSlot * dim);
  std::vector<float> slot_in(kPatchesPerSlot * d);
  for (std::size_t i = 0; i < frames.count; ++i) {
    const Image f = frames.frame(i);
    for (int s = 0; s < kTokens; ++s) {
      for (int j = 0; j < kPatchesPerSlot; ++j) {
        gather_patch(f, s * kPatchesPerSlot + j, raw.data());
        const int id = patches.insert(raw.data(), 0.0);
        std::copy_n(embeddings.data() + static_cast<std::size_t>(id) * d, dim, slot_in.data() + j * d);
      }
      slots.insert(slot_in.data());
    }
  }
  std::vector<float> slot_mean;
  std::tie(m.slot_proj, slot_mean) = pca(slots, dim, seed + 1);

  // Centre the latents: L_i = -W * mean, identical for every slot.
  std::vector<float> centre(d);
  matvec(m.slot_proj.data(), slot_mean.data(), kPatchesPerSlot * dim, dim, centre.data());
  for (int s = 0; s < kTokens; ++s)
    for (std::size_t k = 0; k < d; ++k) m.latent_bias[static_cast<std::size_t>(s) * d + k] = -centre[k];
  return m;
}

Codebook train_codebook(const FrameSource& frames, const VisualModel& model, int iterations,
                        std::uint64_t seed, std::vector<double>* objective) {
  model.validate();
  const std::size_t available = frames.count * kTokens;
  if (available < static_cast<std::size_t>(kVocab))
    throw Error(ErrorCode::InsufficientData, std::to_string(available) + " latents; k-means needs at least 4096");
  std::vector<float> samples(available * static_cast<std::size_t>(model.dim));
  CorpusEncoder enc(model);
  for (std::size_t f = 0; f < frames.count; ++f)
    enc.latents(frames.frame(f), samples.data() + f * kTokens * static_cast<std::size_t>(model.dim));
  // Distinct latents, unit weight each.
  RowSet distinct(model.dim);
  for (std::size_t i = 0; i < available; ++i) distinct.insert(samples.data() + i * static_cast<std::size_t>(model.dim));
  auto res = distinct.size() >= kVocab ? kmeans(distinct.rows(), model.dim, kVocab, iterations, seed)
                                       : kmeans(samples, model.dim, kVocab, iterations, seed);
  if (objective) *objective = res.objective;
  return Codebook(model.dim, std::move(res.centroids));
}

Image mean_image(const FrameSource& frames) {
  if (frames.count == 0) throw Error(ErrorCode::InsufficientData, "mean of an empty corpus");
  const Image first = frames.frame(0);
  std::vector<double> acc(first.data.size(), 0.0);
  for (std::size_t n = 0; n < frames.count; ++n) {
    const Image f = n == 0 ? first : frames.frame(n);
    if (f.data.size() != acc.size()) throw Error(ErrorCode::InvalidArgument, "frames differ in shape");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f.data[i];
  }
  Image out(first.height, first.width);
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i] / static_cast<double>(frames.count));
  return out;
}

DecoderFit fit_decoder(const FrameSource& frames, VisualModel& model, const Codebook& codebook) {
  if (frames.count == 0) throw Error(ErrorCode::InsufficientData, "no frames to fit the decoder on");
  if (codebook.dim() != model.dim) throw Error(ErrorCode::WeightShapeMismatch, "codebook and encoder disagree on D");
  model.validate();
  const int dim = model.dim;
  const std::size_t nf = frames.count;

  // Pass 1: codes and per-slot means of targets and quantized latents.
  std::vector<int> codes(nf * kTokens);
  {
    CorpusEncoder enc(model);
    RowSet seen(dim);
    std::vector<int> memo;
    std::vector<float> z(static_cast<std::size_t>(kTokens) * dim);
    for (std::size_t f = 0; f < nf; ++f) {
      enc.latents(frames.frame(f), z.data());
      for (int s = 0; s < kTokens; ++s) {
        const float* row = z.data() + static_cast<std::size_t>(s) * dim;
        const int before = seen.size();
        const int id = seen.insert(row);
        if (id == before) memo.push_back(codebook.nearest({row, static_cast<std::size_t>(dim)}));
        codes[f * kTokens + static_cast<std::size_t>(s)] = memo[static_cast<std::size_t>(id)];
      }
    }
  }
  const Image mean = mean_image(frames);
  const PatchSequence mean_patches = patchify_raw(mean);
  Eigen::MatrixXd zbar = Eigen::MatrixXd::Zero(dim, kTokens);
  for (std::size_t f = 0; f < nf; ++f)
    for (int s = 0; s < kTokens; ++s) {
      const auto row = codebook.row(codes[f * kTokens + static_cast<std::size_t>(s)]);
      for (int d = 0; d < dim; ++d) zbar(d, s) += row[static_cast<std::size_t>(d)];
    }
  zbar /= static_cast<double>(nf);

  // Pass 2: pooled within-slot covariances.
  Eigen::MatrixXd czz = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd cyz = Eigen::MatrixXd::Zero(kSlotPixels, dim);
  constexpr std::size_t kBatch = 16;
  float raw[kPatchDim];
  for (std::size_t start = 0; start < nf; start += kBatch) {
    const std::size_t nb = std::min(kBatch, nf - start);
    const auto cols = static_cast<Eigen::Index>(nb * kTokens);
    Eigen::MatrixXf y(kSlotPixels, cols);
    Eigen::MatrixXf zc(dim, cols);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t f = start + b;
      const Image frame = frames.frame(f);
      for (int s = 0; s < kTokens; ++s) {
        const auto col = static_cast<Eigen::Index>(b * kTokens + static_cast<std::size_t>(s));
        for (int j = 0; j < kPatchesPerSlot; ++j) {
          const int p = s * kPatchesPerSlot + j;
          gather_patch(frame, p, raw);
          const auto mp = mean_patches.patch(p);
          for (int q = 0; q < kPatchDim; ++q)
            y(j * kPatchDim + q, col) = raw[q] - mp[static_cast<std::size_t>(q)];
        }
        const auto row = codebook.row(codes[f * kTokens + static_cast<std::size_t>(s)]);
        for (int d = 0; d < dim; ++d) zc(d, col) = static_cast<float>(row[static_cast<std::size_t>(d)] - zbar(d, s));
      }
    }
    czz += (zc * zc.transpose()).cast<double>();
    cyz += (y * zc.transpose()).cast<double>();
  }

  // U^T = Czz^-1 Czy, falling back to a ridge when Czz is singular.
  Eigen::MatrixXd ut;
  Eigen::LLT<Eigen::MatrixXd> llt(czz);
  const double scale = std::max(1.0, czz.diagonal().cwiseAbs().maxCoeff());
  bool ok = llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 1e-9 * std::sqrt(scale);
  if (ok) {
    ut = llt.solve(cyz.transpose());
  } else {
    Eigen::LLT<Eigen::MatrixXd> ridge(czz + 1e-6 * Eigen::MatrixXd::Identity(dim, dim));
    if (ridge.info() != Eigen::Success) throw Error(ErrorCode::SingularSystem, "decoder normal equations are singular");
    ut = ridge.solve(cyz.transpose());
  }
  if (!ut.allFinite()) throw Error(ErrorCode::SingularSystem, "decoder solution is not finite");

  for (int d = 0; d < dim; ++d)
    for (int o = 0; o < kSlotPixels; ++o)
      model.decoder[static_cast<std::size_t>(d) * kSlotPixels + o] = static_cast<float>(ut(d, o));
  // Mask biases: ybar_i - U zbar_i for every slot position.
  for (int s = 0; s < kTokens; ++s) {
    const Eigen::VectorXd shift = ut.transpose() * zbar.col(s);
    for (int j = 0; j < kPatchesPerSlot; ++j) {
      const int p = s * kPatchesPerSlot + j;
      const auto mp = mean_patches.patch(p);
      for (int q = 0; q < kPatchDim; ++q)
        model.mask_bias[static_cast<std::size_t>(p) * kPatchDim + q] =
            static_cast<float>(mp[static_cast<std::size_t>(q)] - shift[j * kPatchDim + q]);
    }
  }

  DecoderFit fit;
  std::unordered_map<int, std::vector<float>> strips;
  Image out(kImageSize, kImageSize);
  for (std::size_t f = 0; f < nf; ++f) {
    const Image frame = frames.frame(f);
    for (int s = 0; s < kTokens; ++s) {
      const int c = codes[f * kTokens + static_cast<std::size_t>(s)];
      auto it = strips.find(c);
      if (it == strips.end()) {
        std::vector<float> y(kSlotPixels);
        decode_slot(model, codebook.row(c).data(), y.data());
        it = strips.emplace(c, std::move(y)).first;
      }
      paint_slot(model, s, it->second.data(), out);
    }
    fit.train_mse += mse(out, frame);
    fit.baseline_mse += mse(mean, frame);
  }
  fit.train_mse /= static_cast<double>(nf);
  fit.baseline_mse /= static_cast<double>(nf);
  return fit;
}

// ---------------------------------------------------------------- tokenizer

struct VisualTokenizer::SlotCache {
  std::once_flag once[kVocab];
  std::vector<float> strips[kVocab];
};

VisualTokenizer::VisualTokenizer(VisualModel model, Codebook codebook)
    : model_(std::move(model)), codebook_(std::move(codebook)), cache_(std::make_unique<SlotCache>()) {
  model_.validate();
  if (codebook_.dim() != model_.dim) throw Error(ErrorCode::WeightShapeMismatch, "codebook and model disagree on D");
}

VisualTokenizer::VisualTokenizer(VisualTokenizer&&) noexcept = default;
VisualTokenizer& VisualTokenizer::operator=(VisualTokenizer&&) noexcept = default;
VisualTokenizer::~VisualTokenizer() = default;

VisualTokenizer VisualTokenizer::train(const FrameSource& frames, const TrainConfig& config, TrainReport* report) {
  VisualModel model = fit_encoder(frames, config.dim, config.seed);
  std::vector<double> objective;
  Codebook codebook = train_codebook(frames, model, config.iterations, config.seed, &objective);
  const DecoderFit fit = fit_decoder(frames, model, codebook);
  if (report) {
    report->kmeans_objective = std::move(objective);
    report->decoder = fit;
  }
  return VisualTokenizer(std::move(model), std::move(codebook));
}

std::span<const float> VisualTokenizer::decoded_code(int code) const {
  const auto c = static_cast<std::size_t>(code);
  std::call_once(cache_->once[c], [&] {
    cache_->strips[c].resize(kSlotPixels);
    decode_slot(model_, codebook_.row(code).data(), cache_->strips[c].data());
  });
  return cache_->strips[c];
}

void VisualTokenizer::check_codes(const VisualTokenSeq& codes) const {
  if (codes.codes.size() != kTokens)
    throw Error(ErrorCode::InvalidArgument, "expected 32 codes, got " + std::to_string(codes.codes.size()));
  for (std::size_t i = 0; i < codes.codes.size(); ++i)
    if (codes.codes[i] < 0 || codes.codes[i] >= kVocab)
      throw Error(ErrorCode::IndexOutOfRange, "code " + std::to_string(codes.codes[i]) + " out of range", i);
}

Latents VisualTokenizer::encode_latents(const Image& image) const {
  return visual::encode_latents(patchify(image, model_), model_);
}

VisualTokenSeq VisualTokenizer::encode(const Image& image) const {
  return quantize_latents(encode_latents(image), codebook_);
}

Image VisualTokenizer::decode(const VisualTokenSeq& codes) const {
  check_codes(codes);
  Image out(kImageSize, kImageSize);
  for (int s = 0; s < kTokens; ++s) paint_slot(model_, s, decoded_code(codes.codes[static_cast<std::size_t>(s)]).data(), out);
  return out;
}

VisualTokenizer::Reference VisualTokenizer::make_reference(const Image& image) const {
  Reference ref;
  ref.image = image;
  auto patches = patchify(image, model_);
  ref.codes = quantize_latents(visual::encode_latents(patches, model_), codebook_);
  ref.embeddings = std::move(patches.data);
  ref.decoded = decode(ref.codes);
  return ref;
}

VisualTokenSeq VisualTokenizer::encode(const Image& image, const Reference& ref) const {
  check_frame(image);
  const int dim = model_.dim;
  VisualTokenSeq out = ref.codes;
  std::vector<float> slot_emb(static_cast<std::size_t>(kPatchesPerSlot) * dim);
  std::vector<float> z(static_cast<std::size_t>(dim));
  float raw[kPatchDim];
  for (int s = 0; s < kTokens; ++s) {
    bool changed = false;
    for (int j = 0; j < kPatchesPerSlot; ++j) {
      const int p = s * kPatchesPerSlot + j;
      float* dst = slot_emb.data() + static_cast<std::size_t>(j) * dim;
      if (patch_equal(image, ref.image, p)) {
        std::copy_n(ref.embeddings.data() + static_cast<std::size_t>(p) * dim, dim, dst);
      } else {
        gather_patch(image, p, raw);
        embed_patch(model_, raw, dst);
        changed = true;
      }
    }
    if (!changed) continue;
    slot_latent(model_, s, slot_emb.data(), z.data());
    out.codes[static_cast<std::size_t>(s)] = codebook_.nearest(z);
  }
  return out;
}

Image VisualTokenizer::decode(const VisualTokenSeq& codes, const Reference& ref) const {
  check_codes(codes);
  Image out = ref.decoded;
  for (int s = 0; s < kTokens; ++s) {
    const int c = codes.codes[static_cast<std::size_t>(s)];
    if (c != ref.codes.codes[static_cast<std::size_t>(s)]) paint_slot(model_, s, decoded_code(c).data(), out);
  }
  return out;
}

void VisualTokenizer::advance(Reference& ref, const Image& image) const {
  check_frame(image);
  const int dim = model_.dim;
  std::vector<float> z(static_cast<std::size_t>(dim));
  float raw[kPatchDim];
  for (int s = 0; s < kTokens; ++s) {
    bool changed = false;
    for (int j = 0; j < kPatchesPerSlot; ++j) {
      const int p = s * kPatchesPerSlot + j;
      if (patch_equal(image, ref.image, p)) continue;
      gather_patch(image, p, raw);
      embed_patch(model_, raw, ref.embeddings.data() + static_cast<std::size_t>(p) * dim);
      changed = true;
    }
    if (!changed) continue;
    slot_latent(model_, s, ref.embeddings.data() + static_cast<std::size_t>(s) * kPatchesPerSlot * dim, z.data());
    const int code = codebook_.nearest(z);
    auto& slot_code = ref.codes.codes[static_cast<std::size_t>(s)];
    if (code != slot_code) paint_slot(model_, s, decoded_code(code).data(), ref.decoded);
    slot_code = code;
  }
  ref.image.data = image.data;
}

void VisualTokenizer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  codebook_.save(dir / "codebook.fvcb");
  model_.save(dir / "weights.fvvw");
}

VisualTokenizer VisualTokenizer::load(const std::filesystem::path& dir) {
  return VisualTokenizer(VisualModel::load(dir / "weights.fvvw"), Codebook::load(dir / "codebook.fvcb"));
}

}  // namespace fvla::visual
