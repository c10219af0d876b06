#pragma once

// Spectral action tokenization: normalize -> orthonormal DCT along time ->
// uniform quantization -> frequency-major flatten -> BPE, and the inverse.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fvla/bpe.hpp"

namespace fvla::actions {

inline constexpr double kDefaultDelta = 0.04;
inline constexpr double kDegenerateEpsilon = 1e-6;
inline constexpr int kQuantMin = -128;
inline constexpr int kQuantMax = 127;

/// H_a x D_a trajectory, time-major.
struct ActionChunk {
  int horizon = 0;
  int dims = 0;
  std::vector<double> values;

  ActionChunk() = default;
  ActionChunk(int h, int d);

  double& at(int t, int d) { return values[static_cast<std::size_t>(t) * dims + d]; }
  double at(int t, int d) const { return values[static_cast<std::size_t>(t) * dims + d]; }
  friend bool operator==(const ActionChunk&, const ActionChunk&) = default;
};

/// DCT coefficients, frequency-major (row k holds frequency k of every dim).
struct SpectralCoeffs {
  int frequencies = 0;
  int dims = 0;
  std::vector<double> values;

  double at(int k, int d) const { return values[static_cast<std::size_t>(k) * dims + d]; }
};

struct QuantizedCoeffs {
  int rows = 0;
  int cols = 0;
  std::vector<int> values;
  friend bool operator==(const QuantizedCoeffs&, const QuantizedCoeffs&) = default;
};

struct ActionTokenSeq {
  std::vector<int> codes;  // each < 2048
  friend bool operator==(const ActionTokenSeq&, const ActionTokenSeq&) = default;
};

class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(std::vector<double> lo, std::vector<double> hi);

  /// Per-dimension empirical quantiles (linear interpolation between order
  /// statistics). Constant dimensions are widened by +-epsilon.
  static Normalizer fit(std::span<const ActionChunk> dataset, double q_lo = 0.01, double q_hi = 0.99);

  int dims() const { return static_cast<int>(lo_.size()); }
  const std::vector<double>& lo() const { return lo_; }
  const std::vector<double>& hi() const { return hi_; }

  /// Maps [lo, hi] onto [-1, 1] per dimension; values outside are not clamped.
  ActionChunk normalize(const ActionChunk& chunk) const;
  ActionChunk denormalize(const ActionChunk& chunk) const;

  std::string to_text() const;
  static Normalizer from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Normalizer load(const std::filesystem::path& path);

 private:
  std::vector<double> lo_;
  std::vector<double> hi_;
};

/// Linear-interpolated quantile of `values` (copied, partially sorted).
double quantile(std::vector<double> values, double q);

SpectralCoeffs dct_forward(const ActionChunk& chunk);
ActionChunk dct_inverse(const SpectralCoeffs& coeffs);

/// Round-half-away-from-zero multiples of delta; Overflow outside [-128, 127].
QuantizedCoeffs quantize(const SpectralCoeffs& coeffs, double delta);
SpectralCoeffs dequantize(const QuantizedCoeffs& ints, double delta);

std::vector<int> flatten_interleave(const QuantizedCoeffs& ints);
QuantizedCoeffs unflatten_interleave(std::span<const int> seq, int rows, int cols);

/// Offsets a flattened coefficient sequence into the BPE base alphabet and back.
std::vector<int> to_symbols(std::span<const int> flat);
std::vector<int> from_symbols(std::span<const int> symbols);

ActionTokenSeq encode_chunk(const ActionChunk& chunk, const Normalizer& normalizer, double delta,
                            const BpeModel& bpe);
ActionChunk decode_chunk(const ActionTokenSeq& tokens, int horizon, const Normalizer& normalizer,
                         double delta, const BpeModel& bpe);

/// Quantized symbol stream of a chunk, the BPE training unit.
std::vector<int> chunk_symbols(const ActionChunk& chunk, const Normalizer& normalizer, double delta);

/// Bundles the fitted pieces of the codec for one embodiment.
class ActionTokenizer {
 public:
  ActionTokenizer(Normalizer normalizer, BpeModel bpe, int horizon, double delta = kDefaultDelta);

  /// Fits the normalizer (unless given) and BPE on a chunk corpus.
  static ActionTokenizer fit(std::span<const ActionChunk> corpus, int horizon, double delta = kDefaultDelta,
                             const Normalizer* fixed_normalizer = nullptr);

  ActionTokenSeq encode(const ActionChunk& chunk) const;
  ActionChunk decode(const ActionTokenSeq& tokens) const;

  /// Largest elementwise reconstruction error for dimension d:
  /// (hi - lo) / 2 * delta / 2 * sqrt(horizon).
  double error_bound(int dim) const;

  const Normalizer& normalizer() const { return normalizer_; }
  const BpeModel& bpe() const { return bpe_; }
  int horizon() const { return horizon_; }
  int dims() const { return normalizer_.dims(); }
  double delta() const { return delta_; }

  /// Directory layout: normalizer.txt, bpe.txt, codec.json.
  void save(const std::filesystem::path& dir) const;
  static ActionTokenizer load(const std::filesystem::path& dir);

 private:
  Normalizer normalizer_;
  BpeModel bpe_;
  int horizon_;
  double delta_;
};

}  // namespace fvla::actions
