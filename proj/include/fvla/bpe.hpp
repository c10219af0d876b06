#pragma once

// Byte-pair encoding over a fixed integer alphabet. Ids below alphabet() are
// base symbols; merge i creates id alphabet() + i.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fvla {

class BpeModel {
 public:
  static constexpr int kAlphabet = 256;
  static constexpr int kVocab = 2048;

  using Merge = std::pair<int, int>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Merge> merges, int vocab_size = kVocab);

  /// Greedy merge learning; ties go to the lexicographically smallest pair.
  /// Stops at `target_vocab` ids or when no pair occurs twice.
  static BpeModel train(std::span<const std::vector<int>> corpus, int target_vocab = kVocab);

  std::vector<int> encode(std::span<const int> symbols) const;
  /// Throws MalformedTokens on ids outside the learned vocabulary.
  std::vector<int> decode(std::span<const int> tokens) const;

  /// Size of the token id space; fixed at construction.
  int vocab_size() const { return vocab_size_; }
  int alphabet() const { return kAlphabet; }
  int learned_vocab() const { return kAlphabet + static_cast<int>(merges_.size()); }
  const std::vector<Merge>& merges() const { return merges_; }

  std::string to_text() const;
  static BpeModel from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  void index();

  int vocab_size_ = kVocab;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, int> rank_;  // pair key -> merge index
};

}  // namespace fvla
