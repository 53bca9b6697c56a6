#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "seer/rng.hpp"
#include "seer/vocab.hpp"

namespace seer {

struct SentencePair {
  std::vector<std::string> src;
  std::vector<std::string> tgt;
};

/// Aligned source/target sentences, stored raw: no BOS/EOS decoration.
/// Consumers decorate (the batcher appends EOS; decoders add BOS/EOS).
struct ParallelCorpus {
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
};

inline std::vector<std::vector<std::string>> read_sentences(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_tokens(line));
  return out;
}

inline ParallelCorpus load_parallel(const std::string& src_path,
                                    const std::string& tgt_path) {
  auto src = read_sentences(src_path);
  auto tgt = read_sentences(tgt_path);
  if (src.size() != tgt.size())
    throw DataError("corpus line counts differ: " + src_path + " has " +
                    std::to_string(src.size()) + ", " + tgt_path + " has " +
                    std::to_string(tgt.size()));
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty())
      throw DataError("empty sentence at line " + std::to_string(i + 1) +
                      " of " + (src[i].empty() ? src_path : tgt_path));
    c.pairs.push_back({std::move(src[i]), std::move(tgt[i])});
  }
  return c;
}

inline void save_parallel(const ParallelCorpus& c, const std::string& src_path,
                          const std::string& tgt_path) {
  std::ofstream s(src_path), t(tgt_path);
  if (!s || !t) throw DataError("cannot write corpus files");
  for (const auto& p : c.pairs) {
    s << join_tokens(p.src) << "\n";
    t << join_tokens(p.tgt) << "\n";
  }
}

/// Padded id matrices for one batch. Row content is the sentence ids followed
/// by EOS; positions past each length hold PAD. Lengths count the EOS.
struct Batch {
  int size = 0;     // B
  int src_width = 0;  // J: max src content length in the batch
  int tgt_width = 0;  // I: max tgt content length in the batch
  std::vector<int> src_ids;  // B x src_width
  std::vector<int> tgt_ids;  // B x tgt_width
  std::vector<int> src_lens, tgt_lens;
  std::vector<std::uint8_t> src_pad, tgt_pad;  // 1 where PAD

  /// Source ids of sentence b without padding (EOS-terminated).
  std::vector<int> src_content(int b) const {
    return {src_ids.begin() + static_cast<std::size_t>(b) * src_width,
            src_ids.begin() + static_cast<std::size_t>(b) * src_width +
                src_lens[b]};
  }
  /// Target ids of sentence b without padding (EOS-terminated).
  std::vector<int> tgt_content(int b) const {
    return {tgt_ids.begin() + static_cast<std::size_t>(b) * tgt_width,
            tgt_ids.begin() + static_cast<std::size_t>(b) * tgt_width +
                tgt_lens[b]};
  }
};

namespace detail {

inline void fill_side(const std::vector<std::vector<int>>& rows, int width,
                      std::vector<int>& ids, std::vector<int>& lens,
                      std::vector<std::uint8_t>& pad) {
  for (const auto& row : rows) {
    lens.push_back(static_cast<int>(row.size()) + 1);
    for (int i = 0; i < width; ++i) {
      int id = kPadId;
      if (i < static_cast<int>(row.size()))
        id = row[i];
      else if (i == static_cast<int>(row.size()))
        id = kEosId;
      ids.push_back(id);
      pad.push_back(id == kPadId && i >= static_cast<int>(row.size()) + 1 ? 1 : 0);
    }
  }
}

}  // namespace detail

inline Batch make_batch(const std::vector<std::vector<int>>& src_rows,
                        const std::vector<std::vector<int>>& tgt_rows) {
  Batch b;
  b.size = static_cast<int>(src_rows.size());
  for (const auto& r : src_rows)
    b.src_width = std::max(b.src_width, static_cast<int>(r.size()) + 1);
  for (const auto& r : tgt_rows)
    b.tgt_width = std::max(b.tgt_width, static_cast<int>(r.size()) + 1);
  detail::fill_side(src_rows, b.src_width, b.src_ids, b.src_lens, b.src_pad);
  detail::fill_side(tgt_rows, b.tgt_width, b.tgt_ids, b.tgt_lens, b.tgt_pad);
  return b;
}

/// Length-bucketed batching. Pairs with either side longer than max_len are
/// dropped; order is a deterministic function of the seed; batch_tokens caps
/// sentences-per-batch times the longest raw sentence in the batch.
inline std::vector<Batch> make_batches(const ParallelCorpus& corpus,
                                       const Vocabulary& src_vocab,
                                       const Vocabulary& tgt_vocab,
                                       int batch_tokens, int max_len,
                                       std::uint64_t seed) {
  if (batch_tokens < max_len)
    throw DataError("make_batches: batch_tokens " + std::to_string(batch_tokens) +
                    " < max_len " + std::to_string(max_len));
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus.pairs[i];
    if (static_cast<int>(p.src.size()) <= max_len &&
        static_cast<int>(p.tgt.size()) <= max_len)
      keep.push_back(i);
  }
  if (keep.empty()) throw DataError("make_batches: corpus empty after length filter");

  Rng rng(seed);
  rng.shuffle(keep);
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    return corpus.pairs[a].tgt.size() < corpus.pairs[b].tgt.size();
  });

  std::vector<Batch> batches;
  std::vector<std::vector<int>> src_rows, tgt_rows;
  int longest = 0;
  auto flush = [&] {
    if (!src_rows.empty()) {
      batches.push_back(make_batch(src_rows, tgt_rows));
      src_rows.clear();
      tgt_rows.clear();
      longest = 0;
    }
  };
  for (std::size_t idx : keep) {
    const auto& p = corpus.pairs[idx];
    int len = static_cast<int>(std::max(p.src.size(), p.tgt.size()));
    int new_longest = std::max(longest, len);
    if (!src_rows.empty() &&
        static_cast<int>(src_rows.size() + 1) * new_longest > batch_tokens)
      flush();
    longest = std::max(longest, len);
    src_rows.push_back(src_vocab.encode(join_tokens(p.src)));
    tgt_rows.push_back(tgt_vocab.encode(join_tokens(p.tgt)));
  }
  flush();
  rng.shuffle(batches);
  return batches;
}

enum class SyntheticTask { kCopy, kReverse, kLexicon };

inline SyntheticTask parse_task(const std::string& name) {
  if (name == "copy") return SyntheticTask::kCopy;
  if (name == "reverse") return SyntheticTask::kReverse;
  if (name == "lexicon") return SyntheticTask::kLexicon;
  throw DataError("unknown synthetic task '" + name + "'");
}

/// Deterministic toy corpora. vocab_size counts the four reserved ids, so the
/// surface inventory has vocab_size-4 word types. The lexicon task maps each
/// token through a seed-fixed bijection and then swaps adjacent pairs, so a
/// model must learn both the mapping and the reordering.
inline ParallelCorpus gen_synthetic(SyntheticTask task, int n, int vocab_size,
                                    int min_len, int max_len,
                                    std::uint64_t seed) {
  if (vocab_size <= kNumReserved)
    throw DataError("gen_synthetic: vocab_size must exceed " +
                    std::to_string(kNumReserved));
  if (min_len < 1 || max_len < min_len)
    throw DataError("gen_synthetic: bad length range");
  const int n_types = vocab_size - kNumReserved;
  const int width = n_types <= 100 ? 2 : 3;
  std::vector<std::string> inventory;
  for (int i = 0; i < n_types; ++i) {
    std::string tok = "w" + std::to_string(i);
    while (static_cast<int>(tok.size()) < width + 1)
      tok.insert(tok.begin() + 1, '0');
    inventory.push_back(tok);
  }

  Rng root(seed);
  std::vector<int> lexicon(n_types);
  std::iota(lexicon.begin(), lexicon.end(), 0);
  Rng lex_rng = root.stream("lexicon");
  lex_rng.shuffle(lexicon);

  Rng sent_rng = root.stream("sentences");
  ParallelCorpus corpus;
  for (int k = 0; k < n; ++k) {
    int len = sent_rng.range(min_len, max_len);
    std::vector<int> src(len);
    for (int& t : src) t = sent_rng.range(0, n_types - 1);
    std::vector<int> tgt;
    switch (task) {
      case SyntheticTask::kCopy:
        tgt = src;
        break;
      case SyntheticTask::kReverse:
        tgt.assign(src.rbegin(), src.rend());
        break;
      case SyntheticTask::kLexicon: {
        tgt.resize(len);
        for (int i = 0; i < len; ++i) tgt[i] = lexicon[src[i]];
        for (int i = 0; i + 1 < len; i += 2) std::swap(tgt[i], tgt[i + 1]);
        break;
      }
    }
    SentencePair p;
    for (int t : src) p.src.push_back(inventory[t]);
    for (int t : tgt) p.tgt.push_back(inventory[t]);
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

}  // namespace seer
