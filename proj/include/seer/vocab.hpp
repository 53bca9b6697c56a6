#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace seer {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kNumReserved = 4;
inline const char* kUnkSurface = "<unk>";

inline std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream in(line);
  std::string t;
  while (in >> t) toks.push_back(std::move(t));
  return toks;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

/// Token <-> id bijection with reserved ids PAD=0, BOS=1, EOS=2, UNK=3.
class Vocabulary {
 public:
  Vocabulary() : id_to_token_{"<pad>", "<bos>", "<eos>", kUnkSurface} {}

  /// Keeps the most frequent tokens (ties broken lexicographically) up to
  /// max_size total entries including the four reserved ids.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          int min_freq = 1, int max_size = 1 << 30) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    std::map<std::string, long long> freq;
    for (const auto& sent : corpus)
      for (const auto& tok : sent) ++freq[tok];
    std::vector<std::pair<std::string, long long>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) {
                       if (a.second != b.second) return a.second > b.second;
                       return a.first < b.first;
                     });
    Vocabulary v;
    for (const auto& [tok, n] : items) {
      if (n < min_freq) break;
      if (static_cast<int>(v.size()) >= max_size) break;
      v.add(tok);
    }
    return v;
  }

  int add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
  }

  std::size_t size() const { return id_to_token_.size(); }

  int id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_token_.size()))
      throw DataError("vocab: id " + std::to_string(id) + " out of range");
    return id_to_token_[id];
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : split_tokens(text)) ids.push_back(id_of(tok));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    for (int id : ids) toks.push_back(token_of(id));
    return join_tokens(toks);
  }

  /// Non-reserved tokens in id order (id = 4 + line number).
  std::vector<std::string> surface_tokens() const {
    return std::vector<std::string>(id_to_token_.begin() + kNumReserved,
                                    id_to_token_.end());
  }

  static Vocabulary from_surface_tokens(const std::vector<std::string>& toks) {
    Vocabulary v;
    for (const auto& t : toks) v.add(t);
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("vocab: cannot write " + path);
    for (std::size_t i = kNumReserved; i < id_to_token_.size(); ++i)
      out << id_to_token_[i] << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("vocab: cannot read " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) v.add(line);
    }
    return v;
  }

  bool operator==(const Vocabulary& o) const {
    return id_to_token_ == o.id_to_token_;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace seer
