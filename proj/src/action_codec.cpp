#include "fvla/action_codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "fvla/error.hpp"
#include "json.hpp"

namespace fvla::actions {

ActionChunk::ActionChunk(int h, int d)
    : horizon(h), dims(d), values(static_cast<std::size_t>(std::max(h, 0)) * static_cast<std::size_t>(std::max(d, 0)), 0.0) {
  if (h < 1 || d < 1) throw Error(ErrorCode::InvalidArgument, "action chunk needs horizon >= 1 and dims >= 1");
}

Normalizer::Normalizer(std::vector<double> lo, std::vector<double> hi) : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size() || lo_.empty())
    throw Error(ErrorCode::InvalidArgument, "normalizer bounds must be non-empty and paired");
  for (std::size_t d = 0; d < lo_.size(); ++d) {
    if (!(lo_[d] < hi_[d]) || !std::isfinite(lo_[d]) || !std::isfinite(hi_[d]))
      throw Error(ErrorCode::DegenerateDimension, "normalizer bound lo >= hi", d);
  }
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of an empty set");
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto below = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(below);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(below), values.end());
  const double lower = values[below];
  if (frac == 0.0 || below + 1 >= values.size()) return lower;
  const double upper = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(below) + 1, values.end());
  return lower + frac * (upper - lower);
}

Normalizer Normalizer::fit(std::span<const ActionChunk> dataset, double q_lo, double q_hi) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidArgument, "cannot fit a normalizer on an empty dataset");
  if (!(0.0 <= q_lo && q_lo < q_hi && q_hi <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "quantiles must satisfy 0 <= q_lo < q_hi <= 1");
  const int dims = dataset.front().dims;
  std::vector<std::vector<double>> per_dim(static_cast<std::size_t>(dims));
  for (const auto& chunk : dataset) {
    if (chunk.dims != dims) throw Error(ErrorCode::LengthMismatch, "chunks disagree on action dims");
    for (int t = 0; t < chunk.horizon; ++t)
      for (int d = 0; d < dims; ++d) per_dim[static_cast<std::size_t>(d)].push_back(chunk.at(t, d));
  }
  std::vector<double> lo(static_cast<std::size_t>(dims));
  std::vector<double> hi(static_cast<std::size_t>(dims));
  for (std::size_t d = 0; d < per_dim.size(); ++d) {
    lo[d] = quantile(per_dim[d], q_lo);
    hi[d] = quantile(per_dim[d], q_hi);
    if (!(lo[d] < hi[d])) {
      lo[d] -= kDegenerateEpsilon;
      hi[d] += kDegenerateEpsilon;
    }
  }
  return Normalizer(std::move(lo), std::move(hi));
}

ActionChunk Normalizer::normalize(const ActionChunk& chunk) const {
  if (chunk.dims != dims()) throw Error(ErrorCode::LengthMismatch, "chunk dims do not match the normalizer");
  ActionChunk out = chunk;
  for (int t = 0; t < chunk.horizon; ++t) {
    for (int d = 0; d < chunk.dims; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      out.at(t, d) = 2.0 * (chunk.at(t, d) - lo_[ud]) / (hi_[ud] - lo_[ud]) - 1.0;
    }
  }
  return out;
}

ActionChunk Normalizer::denormalize(const ActionChunk& chunk) const {
  if (chunk.dims != dims()) throw Error(ErrorCode::LengthMismatch, "chunk dims do not match the normalizer");
  ActionChunk out = chunk;
  for (int t = 0; t < chunk.horizon; ++t) {
    for (int d = 0; d < chunk.dims; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      out.at(t, d) = (chunk.at(t, d) + 1.0) * 0.5 * (hi_[ud] - lo_[ud]) + lo_[ud];
    }
  }
  return out;
}

std::string Normalizer::to_text() const {
  std::ostringstream os;
  os << "fvnorm v1 dims=" << dims() << "\n" << std::setprecision(17);
  for (int d = 0; d < dims(); ++d) os << lo_[static_cast<std::size_t>(d)] << ' ' << hi_[static_cast<std::size_t>(d)] << "\n";
  return os.str();
}

Normalizer Normalizer::from_text(const std::string& text) {
  std::istringstream is(text);
  std::string magic, version, dtok;
  is >> magic >> version >> dtok;
  if (magic != "fvnorm" || version != "v1" || dtok.rfind("dims=", 0) != 0)
    throw Error(ErrorCode::FormatError, "bad normalizer header", 1);
  int dims = 0;
  try {
    dims = std::stoi(dtok.substr(5));
  } catch (const std::exception&) {
    throw Error(ErrorCode::FormatError, "bad normalizer dims", 1);
  }
  if (dims < 1 || dims > 4096) throw Error(ErrorCode::FormatError, "implausible normalizer dims", 1);
  std::vector<double> lo(static_cast<std::size_t>(dims));
  std::vector<double> hi(static_cast<std::size_t>(dims));
  for (int d = 0; d < dims; ++d) {
    if (!(is >> lo[static_cast<std::size_t>(d)] >> hi[static_cast<std::size_t>(d)]))
      throw Error(ErrorCode::FormatError, "truncated normalizer bounds", static_cast<std::size_t>(d) + 2);
  }
  return Normalizer(std::move(lo), std::move(hi));
}

void Normalizer::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os << to_text();
}

Normalizer Normalizer::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

namespace {

/// Orthonormal DCT-II basis, basis[k * H + t].
std::vector<double> dct_basis(int horizon) {
  std::vector<double> basis(static_cast<std::size_t>(horizon) * static_cast<std::size_t>(horizon));
  const double h = static_cast<double>(horizon);
  for (int k = 0; k < horizon; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
    for (int t = 0; t < horizon; ++t)
      basis[static_cast<std::size_t>(k * horizon + t)] =
          scale * std::cos(std::numbers::pi * (2.0 * t + 1.0) * k / (2.0 * h));
  }
  return basis;
}

}  // namespace

SpectralCoeffs dct_forward(const ActionChunk& chunk) {
  const int h = chunk.horizon;
  const auto basis = dct_basis(h);
  SpectralCoeffs out{h, chunk.dims, std::vector<double>(chunk.values.size(), 0.0)};
  for (int k = 0; k < h; ++k) {
    for (int d = 0; d < chunk.dims; ++d) {
      double acc = 0.0;
      for (int t = 0; t < h; ++t) acc += basis[static_cast<std::size_t>(k * h + t)] * chunk.at(t, d);
      out.values[static_cast<std::size_t>(k) * chunk.dims + d] = acc;
    }
  }
  return out;
}

ActionChunk dct_inverse(const SpectralCoeffs& coeffs) {
  const int h = coeffs.frequencies;
  const auto basis = dct_basis(h);
  ActionChunk out(h, coeffs.dims);
  for (int t = 0; t < h; ++t) {
    for (int d = 0; d < coeffs.dims; ++d) {
      double acc = 0.0;
      for (int k = 0; k < h; ++k) acc += basis[static_cast<std::size_t>(k * h + t)] * coeffs.at(k, d);
      out.at(t, d) = acc;
    }
  }
  return out;
}

QuantizedCoeffs quantize(const SpectralCoeffs& coeffs, double delta) {
  if (!(delta > 0.0)) throw Error(ErrorCode::InvalidArgument, "quantization step must be positive");
  QuantizedCoeffs out{coeffs.frequencies, coeffs.dims, std::vector<int>(coeffs.values.size())};
  for (std::size_t i = 0; i < coeffs.values.size(); ++i) {
    const double q = std::round(coeffs.values[i] / delta);  // half away from zero
    if (!(q >= kQuantMin && q <= kQuantMax))
      throw Error(ErrorCode::Overflow,
                  "coefficient " + std::to_string(coeffs.values[i]) + " exceeds the quantizer range", i);
    out.values[i] = static_cast<int>(q);
  }
  return out;
}

SpectralCoeffs dequantize(const QuantizedCoeffs& ints, double delta) {
  if (!(delta > 0.0)) throw Error(ErrorCode::InvalidArgument, "quantization step must be positive");
  SpectralCoeffs out{ints.rows, ints.cols, std::vector<double>(ints.values.size())};
  for (std::size_t i = 0; i < ints.values.size(); ++i) out.values[i] = ints.values[i] * delta;
  return out;
}

std::vector<int> flatten_interleave(const QuantizedCoeffs& ints) { return ints.values; }

QuantizedCoeffs unflatten_interleave(std::span<const int> seq, int rows, int cols) {
  if (rows < 0 || cols < 0 || seq.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
    throw Error(ErrorCode::LengthMismatch, "sequence of length " + std::to_string(seq.size()) +
                                               " cannot fill a " + std::to_string(rows) + "x" +
                                               std::to_string(cols) + " matrix");
  return {rows, cols, std::vector<int>(seq.begin(), seq.end())};
}

std::vector<int> to_symbols(std::span<const int> flat) {
  std::vector<int> out(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] < kQuantMin || flat[i] > kQuantMax)
      throw Error(ErrorCode::Overflow, "quantized value outside the symbol alphabet", i);
    out[i] = flat[i] - kQuantMin;
  }
  return out;
}

std::vector<int> from_symbols(std::span<const int> symbols) {
  std::vector<int> out(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (symbols[i] < 0 || symbols[i] >= BpeModel::kAlphabet)
      throw Error(ErrorCode::MalformedTokens, "symbol outside the base alphabet", i);
    out[i] = symbols[i] + kQuantMin;
  }
  return out;
}

std::vector<int> chunk_symbols(const ActionChunk& chunk, const Normalizer& normalizer, double delta) {
  for (double v : chunk.values)
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "action chunk holds a non-finite value");
  return to_symbols(flatten_interleave(quantize(dct_forward(normalizer.normalize(chunk)), delta)));
}

ActionTokenSeq encode_chunk(const ActionChunk& chunk, const Normalizer& normalizer, double delta,
                            const BpeModel& bpe) {
  return {bpe.encode(chunk_symbols(chunk, normalizer, delta))};
}

ActionChunk decode_chunk(const ActionTokenSeq& tokens, int horizon, const Normalizer& normalizer,
                         double delta, const BpeModel& bpe) {
  const auto symbols = bpe.decode(tokens.codes);
  const int dims = normalizer.dims();
  if (symbols.size() != static_cast<std::size_t>(horizon) * static_cast<std::size_t>(dims))
    throw Error(ErrorCode::MalformedTokens, "tokens expand to " + std::to_string(symbols.size()) +
                                                " symbols, expected " + std::to_string(horizon * dims));
  const auto ints = unflatten_interleave(from_symbols(symbols), horizon, dims);
  return normalizer.denormalize(dct_inverse(dequantize(ints, delta)));
}

ActionTokenizer::ActionTokenizer(Normalizer normalizer, BpeModel bpe, int horizon, double delta)
    : normalizer_(std::move(normalizer)), bpe_(std::move(bpe)), horizon_(horizon), delta_(delta) {
  if (horizon_ < 1) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 1");
  if (!(delta_ > 0.0)) throw Error(ErrorCode::InvalidArgument, "quantization step must be positive");
}

ActionTokenizer ActionTokenizer::fit(std::span<const ActionChunk> corpus, int horizon, double delta,
                                     const Normalizer* fixed_normalizer) {
  Normalizer norm = fixed_normalizer ? *fixed_normalizer : Normalizer::fit(corpus);
  std::vector<std::vector<int>> symbols;
  symbols.reserve(corpus.size());
  for (const auto& chunk : corpus) {
    if (chunk.horizon != horizon) throw Error(ErrorCode::LengthMismatch, "corpus chunk horizon mismatch");
    symbols.push_back(chunk_symbols(chunk, norm, delta));
  }
  return ActionTokenizer(std::move(norm), BpeModel::train(symbols), horizon, delta);
}

ActionTokenSeq ActionTokenizer::encode(const ActionChunk& chunk) const {
  if (chunk.horizon != horizon_) throw Error(ErrorCode::LengthMismatch, "chunk horizon does not match the codec");
  return encode_chunk(chunk, normalizer_, delta_, bpe_);
}

ActionChunk ActionTokenizer::decode(const ActionTokenSeq& tokens) const {
  return decode_chunk(tokens, horizon_, normalizer_, delta_, bpe_);
}

double ActionTokenizer::error_bound(int dim) const {
  const auto d = static_cast<std::size_t>(dim);
  return (normalizer_.hi()[d] - normalizer_.lo()[d]) / 2.0 * delta_ / 2.0 * std::sqrt(static_cast<double>(horizon_));
}

void ActionTokenizer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  normalizer_.save(dir / "normalizer.txt");
  bpe_.save(dir / "bpe.txt");
  nlohmann::json j = {{"horizon", horizon_}, {"dims", dims()}, {"delta", delta_}};
  std::ofstream os(dir / "codec.json");
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + (dir / "codec.json").string());
  os << j.dump(2) << "\n";
}

ActionTokenizer ActionTokenizer::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "codec.json");
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + (dir / "codec.json").string());
  nlohmann::json j;
  try {
    is >> j;
    auto norm = Normalizer::load(dir / "normalizer.txt");
    if (j.at("dims").get<int>() != norm.dims())
      throw Error(ErrorCode::FormatError, "codec.json dims disagree with normalizer.txt");
    return ActionTokenizer(std::move(norm), BpeModel::load(dir / "bpe.txt"), j.at("horizon").get<int>(),
                           j.at("delta").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("codec.json: ") + e.what());
  }
}

}  // namespace fvla::actions
