#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "seer/vocab.hpp"

namespace seer {

struct BleuResult {
  double score = 0;              // 0..100
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1;
  long long hyp_len = 0, ref_len = 0;
};

/// Corpus BLEU, n up to 4, exponential smoothing: a zero-match order n >= 2
/// contributes 1/(2^z * total_n) where z counts zero-match orders so far;
/// zero unigram matches give score 0 outright. Tokens compare verbatim.
inline BleuResult corpus_bleu(
    const std::vector<std::vector<std::string>>& hyps,
    const std::vector<std::vector<std::string>>& refs, int max_n = 4) {
  if (hyps.size() != refs.size())
    throw DataError("corpus_bleu: " + std::to_string(hyps.size()) +
                    " hypotheses vs " + std::to_string(refs.size()) +
                    " references");
  auto count_ngrams = [](const std::vector<std::string>& sent, int n) {
    std::map<std::string, long long> counts;
    if (static_cast<int>(sent.size()) >= n)
      for (std::size_t i = 0; i + n <= sent.size(); ++i) {
        std::string key;
        for (int j = 0; j < n; ++j) {
          key += sent[i + j];
          key += '\x1f';
        }
        ++counts[key];
      }
    return counts;
  };

  BleuResult r;
  std::vector<long long> matches(max_n, 0), totals(max_n, 0);
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    r.hyp_len += static_cast<long long>(hyps[s].size());
    r.ref_len += static_cast<long long>(refs[s].size());
    for (int n = 1; n <= max_n; ++n) {
      auto h = count_ngrams(hyps[s], n);
      auto g = count_ngrams(refs[s], n);
      for (const auto& [key, c] : h) {
        totals[n - 1] += c;
        auto it = g.find(key);
        if (it != g.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }

  if (r.hyp_len == 0 || matches[0] == 0) return r;  // score 0 by definition

  double log_sum = 0;
  int orders = 0;
  long long smooth_denominator = 1;
  for (int n = 1; n <= max_n; ++n) {
    if (totals[n - 1] == 0) break;  // no hypothesis this long
    double p;
    if (matches[n - 1] > 0) {
      p = static_cast<double>(matches[n - 1]) / totals[n - 1];
    } else {
      smooth_denominator *= 2;
      p = 1.0 / (static_cast<double>(smooth_denominator) * totals[n - 1]);
    }
    r.precisions[n - 1] = p;
    log_sum += std::log(p);
    ++orders;
  }
  r.brevity_penalty =
      r.hyp_len >= r.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(r.ref_len) / r.hyp_len);
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / orders);
  return r;
}

struct LengthBin {
  int min_len = 0, max_len = 0;
  int count = 0;
  BleuResult bleu;
};

/// Partitions sentences into n_bins equal-population bins by source length
/// (populations differ by at most one) and scores each bin.
inline std::vector<LengthBin> length_binned_bleu(
    const std::vector<std::vector<std::string>>& hyps,
    const std::vector<std::vector<std::string>>& refs,
    const std::vector<std::vector<std::string>>& srcs, int n_bins = 8) {
  if (n_bins < 1) throw DataError("length_binned_bleu: n_bins must be >= 1");
  if (hyps.size() != refs.size() || hyps.size() != srcs.size())
    throw DataError("length_binned_bleu: input sizes differ");
  const int n = static_cast<int>(hyps.size());
  if (n < n_bins)
    throw DataError("length_binned_bleu: " + std::to_string(n) +
                    " sentences is fewer than " + std::to_string(n_bins) +
                    " bins");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return srcs[a].size() < srcs[b].size();
  });

  std::vector<LengthBin> bins;
  const int base = n / n_bins, extra = n % n_bins;
  int cursor = 0;
  for (int b = 0; b < n_bins; ++b) {
    const int take = base + (b < extra ? 1 : 0);
    std::vector<std::vector<std::string>> h, r;
    LengthBin bin;
    bin.min_len = static_cast<int>(srcs[order[cursor]].size());
    for (int i = 0; i < take; ++i, ++cursor) {
      bin.max_len = static_cast<int>(srcs[order[cursor]].size());
      h.push_back(hyps[order[cursor]]);
      r.push_back(refs[order[cursor]]);
    }
    bin.count = take;
    bin.bleu = corpus_bleu(h, r);
    bins.push_back(std::move(bin));
  }
  return bins;
}

}  // namespace seer
