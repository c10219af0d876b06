#include "fvla/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <sstream>

#include "fvla/error.hpp"

namespace fvla {

namespace {

std::uint64_t key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace

BpeModel::BpeModel(std::vector<Merge> merges, int vocab_size)
    : vocab_size_(vocab_size), merges_(std::move(merges)) {
  if (vocab_size_ < kAlphabet)
    throw Error(ErrorCode::AlphabetTooLarge, "vocabulary smaller than the base alphabet");
  if (learned_vocab() > vocab_size_)
    throw Error(ErrorCode::FormatError, "more merges than the vocabulary allows");
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    const int id = kAlphabet + static_cast<int>(i);
    const auto [a, b] = merges_[i];
    if (a < 0 || b < 0 || a >= id || b >= id)
      throw Error(ErrorCode::FormatError, "merge refers to an id not yet defined", i);
  }
  index();
}

void BpeModel::index() {
  rank_.clear();
  rank_.reserve(merges_.size() * 2);
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    const auto [it, inserted] = rank_.emplace(key(merges_[i].first, merges_[i].second), static_cast<int>(i));
    if (!inserted) throw Error(ErrorCode::FormatError, "duplicate merge", i);
  }
}

BpeModel BpeModel::train(std::span<const std::vector<int>> corpus, int target_vocab) {
  if (target_vocab < kAlphabet)
    throw Error(ErrorCode::AlphabetTooLarge, "target vocabulary below the base alphabet");

  // Flat doubly linked list over every symbol; sequences never link across.
  std::vector<int> sym;
  std::vector<int> prev;
  std::vector<int> next;
  for (const auto& seq : corpus) {
    const int start = static_cast<int>(sym.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || seq[i] >= kAlphabet)
        throw Error(ErrorCode::AlphabetTooLarge,
                    "symbol " + std::to_string(seq[i]) + " outside the base alphabet");
      sym.push_back(seq[i]);
      prev.push_back(i == 0 ? -1 : static_cast<int>(sym.size()) - 2);
      next.push_back(-1);
      if (i > 0) next[sym.size() - 2] = static_cast<int>(sym.size()) - 1;
    }
    (void)start;
  }

  std::unordered_map<std::uint64_t, std::int64_t> count;
  std::unordered_map<std::uint64_t, std::vector<int>> where;
  for (std::size_t i = 0; i < sym.size(); ++i) {
    if (next[i] < 0) continue;
    const auto k = key(sym[i], sym[static_cast<std::size_t>(next[i])]);
    ++count[k];
    where[k].push_back(static_cast<int>(i));
  }

  struct Entry {
    std::int64_t n;
    std::uint64_t pair;
  };
  // Highest count first; among equal counts the smallest (a, b).
  auto worse = [](const Entry& x, const Entry& y) {
    if (x.n != y.n) return x.n < y.n;
    return x.pair > y.pair;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (const auto& [k, n] : count) heap.push({n, k});

  std::vector<Merge> merges;
  std::vector<std::uint64_t> touched;
  int next_id = kAlphabet;
  while (next_id < target_vocab && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    const auto it = count.find(top.pair);
    if (it == count.end() || it->second != top.n) continue;  // stale
    if (top.n < 2) break;

    const int a = static_cast<int>(top.pair >> 32);
    const int b = static_cast<int>(top.pair & 0xFFFFFFFFu);
    const int id = next_id++;
    merges.emplace_back(a, b);

    std::vector<int> positions = std::move(where[top.pair]);
    where.erase(top.pair);
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());

    touched.clear();
    auto bump = [&](int left, int right, std::int64_t delta, int pos) {
      const auto k = key(left, right);
      auto& c = count[k];
      c += delta;
      touched.push_back(k);
      if (delta > 0) where[k].push_back(pos);
    };

    for (int i : positions) {
      const auto ui = static_cast<std::size_t>(i);
      if (sym[ui] != a) continue;
      const int j = next[ui];
      if (j < 0 || sym[static_cast<std::size_t>(j)] != b) continue;
      const auto uj = static_cast<std::size_t>(j);
      const int p = prev[ui];
      const int n = next[uj];
      if (p >= 0) bump(sym[static_cast<std::size_t>(p)], a, -1, p);
      if (n >= 0) bump(b, sym[static_cast<std::size_t>(n)], -1, j);
      bump(a, b, -1, i);
      sym[ui] = id;
      sym[uj] = -1;
      next[ui] = n;
      if (n >= 0) prev[static_cast<std::size_t>(n)] = i;
      if (p >= 0) bump(sym[static_cast<std::size_t>(p)], id, +1, p);
      if (n >= 0) bump(id, sym[static_cast<std::size_t>(n)], +1, i);
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (auto k : touched) {
      const auto c = count[k];
      if (c <= 0) {
        count.erase(k);
        where.erase(k);
      } else {
        heap.push({c, k});
      }
    }
  }
  return BpeModel(std::move(merges), std::max(target_vocab, kVocab));
}

std::vector<int> BpeModel::encode(std::span<const int> symbols) const {
  std::vector<int> seq(symbols.begin(), symbols.end());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] < 0 || seq[i] >= kAlphabet)
      throw Error(ErrorCode::AlphabetTooLarge, "symbol " + std::to_string(seq[i]) + " outside alphabet", i);
  }
  while (seq.size() > 1) {
    int best = -1;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const auto it = rank_.find(key(seq[i], seq[i + 1]));
      if (it != rank_.end() && (best < 0 || it->second < best)) best = it->second;
    }
    if (best < 0) break;
    const auto [a, b] = merges_[static_cast<std::size_t>(best)];
    const int id = kAlphabet + best;
    std::vector<int> out;
    out.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
        out.push_back(id);
        ++i;
      } else {
        out.push_back(seq[i]);
      }
    }
    seq = std::move(out);
  }
  return seq;
}

std::vector<int> BpeModel::decode(std::span<const int> tokens) const {
  std::vector<int> out;
  std::vector<int> stack;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= learned_vocab())
      throw Error(ErrorCode::MalformedTokens, "token " + std::to_string(t) + " is not in the vocabulary", i);
    stack.push_back(t);
    while (!stack.empty()) {
      const int s = stack.back();
      stack.pop_back();
      if (s < kAlphabet) {
        out.push_back(s);
      } else {
        const auto [a, b] = merges_[static_cast<std::size_t>(s - kAlphabet)];
        stack.push_back(b);
        stack.push_back(a);
      }
    }
  }
  return out;
}

std::string BpeModel::to_text() const {
  std::ostringstream os;
  os << "fvbpe v1 vocab=" << vocab_size_ << " alphabet=" << kAlphabet << "\n";
  for (std::size_t i = 0; i < merges_.size(); ++i)
    os << "merge " << merges_[i].first << ' ' << merges_[i].second << " -> " << kAlphabet + static_cast<int>(i) << "\n";
  return os.str();
}

BpeModel BpeModel::from_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::FormatError, "empty BPE model", 1);
  int vocab = 0;
  int alphabet = 0;
  {
    std::istringstream hs(line);
    std::string magic, version, vtok, atok;
    hs >> magic >> version >> vtok >> atok;
    if (magic != "fvbpe" || version != "v1" || vtok.rfind("vocab=", 0) != 0 || atok.rfind("alphabet=", 0) != 0)
      throw Error(ErrorCode::FormatError, "bad BPE header: " + line, 1);
    try {
      vocab = std::stoi(vtok.substr(6));
      alphabet = std::stoi(atok.substr(9));
    } catch (const std::exception&) {
      throw Error(ErrorCode::FormatError, "bad BPE header numbers: " + line, 1);
    }
    if (alphabet != kAlphabet) throw Error(ErrorCode::FormatError, "unsupported alphabet size", 1);
  }
  std::vector<Merge> merges;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word, arrow, extra;
    long long a = -1, b = -1, id = -1;
    ls >> word >> a >> b >> arrow >> id;
    if (!ls || word != "merge" || arrow != "->" || (ls >> extra))
      throw Error(ErrorCode::FormatError, "malformed merge line: " + line, lineno);
    if (id != kAlphabet + static_cast<long long>(merges.size()))
      throw Error(ErrorCode::FormatError, "merge ids must be consecutive", lineno);
    merges.emplace_back(static_cast<int>(a), static_cast<int>(b));
  }
  return BpeModel(std::move(merges), vocab);
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  os << to_text();
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_text(ss.str());
}

}  // namespace fvla
