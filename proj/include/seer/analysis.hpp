#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "seer/data.hpp"
#include "seer/optimizer.hpp"
#include "seer/transformer.hpp"

namespace seer {

/// Bag size for position i (1-based) under a length-J source:
/// max(2, (J - i) * 2), so a bag always holds at least two words.
inline int bow_bag_size(int src_len, int position) {
  return std::max(2, (src_len - position) * 2);
}

/// Linear probe over conventional-decoder states predicting the bag of
/// future ground-truth words. Training touches only ww.
template <typename Real>
struct BowProbe {
  Tensor<Real> ww;  // |V| x d_model
  std::string trained_on;

  static BowProbe zeros(int vocab_size, int d_model) {
    return {Tensor<Real>({vocab_size, d_model}, Real(0), true), ""};
  }

  /// Untrained baseline with random weights.
  static BowProbe random(int vocab_size, int d_model, std::uint64_t seed) {
    BowProbe p = zeros(vocab_size, d_model);
    Rng rng(seed);
    for (auto& v : p.ww.value())
      v = static_cast<Real>(rng.normal() * 0.1);
    return p;
  }
};

namespace detail {

/// Teacher-forced student states for prediction positions 1..I, with the
/// model frozen (no tape).
template <typename Real>
Tensor<Real> student_states(Model<Real>& model, const std::vector<int>& src,
                            const std::vector<int>& raw_tgt) {
  DropoutCtx<Real> drop;
  auto memory = model.encode(src, drop);
  std::vector<int> content = raw_tgt;
  content.push_back(kEosId);
  auto out = model.decode_conventional(content, memory, drop);
  return slice_rows(out.states, 0, static_cast<int>(raw_tgt.size()));
}

}  // namespace detail

/// Fits ww by maximizing the likelihood of every future bag word, cycling
/// the corpus for the given number of Adam steps; every other parameter is
/// frozen and bitwise untouched.
template <typename Real>
BowProbe<Real> train_bow_probe(Model<Real>& model, const ParallelCorpus& corpus,
                               const Vocabulary& src_vocab,
                               const Vocabulary& tgt_vocab, int steps,
                               int sentences_per_step = 8,
                               double lr_factor = 2.0) {
  if (corpus.size() == 0) throw DataError("train_bow_probe: empty corpus");
  const int v = model.target_vocab_size();
  const int d = model.config().d_model;
  model.params().set_requires_grad(false);

  ParamStore<Real> probe_params(0);
  auto& ww = probe_params.create("probe.ww", {v, d}, Init::kZeros);
  TrainConfig opt_cfg;
  opt_cfg.lr_factor = lr_factor;
  opt_cfg.warmup_steps = std::max(1, steps / 10);
  Adam<Real> opt(opt_cfg, d);

  std::size_t cursor = 0;
  for (int step = 0; step < steps; ++step) {
    for (int k = 0; k < sentences_per_step; ++k, ++cursor) {
      const auto& pair = corpus.pairs[cursor % corpus.size()];
      auto src = src_vocab.encode(join_tokens(pair.src));
      src.push_back(kEosId);
      auto raw = tgt_vocab.encode(join_tokens(pair.tgt));
      const int len = static_cast<int>(raw.size());
      if (len < 2) continue;  // position I has an empty bag; nothing to fit

      auto states = detail::student_states(model, src, raw);
      Tensor<Real> bag_indicator({len, v}, Real(0));
      bool any = false;
      for (int i = 1; i <= len; ++i)
        for (int j = i; j < len; ++j) {  // bag of position i: tokens after it
          bag_indicator.at(i - 1, raw[j]) = Real(1);
          any = true;
        }
      if (!any) continue;
      auto logp = log_softmax(matmul_nt(states, ww));
      backward(scale(sum_all(mul(bag_indicator, logp)), Real(-1)));
    }
    opt.step(probe_params);
  }
  model.params().set_requires_grad(true);
  return {ww, ""};
}

struct BowScores {
  double accuracy = 0, recall = 0, f1 = 0;
  long long positions = 0;
};

/// Micro-averaged accuracy/recall/F1 of the top-I_b predicted bags against
/// the gold future bags (set semantics; positions with empty gold skipped).
template <typename Real>
BowScores eval_bow_probe(Model<Real>& model, const BowProbe<Real>& probe,
                         const ParallelCorpus& corpus,
                         const Vocabulary& src_vocab,
                         const Vocabulary& tgt_vocab) {
  model.params().set_requires_grad(false);
  const int v = model.target_vocab_size();
  long long hit = 0, picked = 0, gold_total = 0, positions = 0;
  for (const auto& pair : corpus.pairs) {
    auto src = src_vocab.encode(join_tokens(pair.src));
    const int src_len = static_cast<int>(src.size());
    src.push_back(kEosId);
    auto raw = tgt_vocab.encode(join_tokens(pair.tgt));
    const int len = static_cast<int>(raw.size());
    if (len < 2) continue;
    auto states = detail::student_states(model, src, raw);
    auto scores = matmul_nt(states, detach(probe.ww));
    for (int i = 1; i < len; ++i) {  // gold bag nonempty only for i < I
      std::set<int> gold(raw.begin() + i, raw.end());
      const int bag = std::min(bow_bag_size(src_len, i), v);
      std::vector<int> order(v);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + bag, order.end(),
                        [&](int a, int b) {
                          if (scores.at(i - 1, a) != scores.at(i - 1, b))
                            return scores.at(i - 1, a) > scores.at(i - 1, b);
                          return a < b;
                        });
      for (int k = 0; k < bag; ++k) hit += gold.count(order[k]) ? 1 : 0;
      picked += bag;
      gold_total += static_cast<long long>(gold.size());
      ++positions;
    }
  }
  model.params().set_requires_grad(true);
  if (positions == 0) throw DataError("eval_bow_probe: no scorable positions");
  BowScores out;
  out.positions = positions;
  out.accuracy = static_cast<double>(hit) / picked;
  out.recall = static_cast<double>(hit) / gold_total;
  out.f1 = (out.accuracy + out.recall) > 0
               ? 2 * out.accuracy * out.recall / (out.accuracy + out.recall)
               : 0;
  return out;
}

struct FusionSimilarityRow {
  int position = 0;  // 1-based target position
  long long n = 0;
  double cos_past = 0, cos_future = 0;
};

template <typename Real>
double cosine_rows(const Tensor<Real>& a, const Tensor<Real>& b, int row) {
  double dot = 0, na = 0, nb = 0;
  for (int j = 0; j < a.cols(); ++j) {
    const double x = a.at(row, j), y = b.at(row, j);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) return 0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Per-position mean cosine similarity of the fused representation A to its
/// weighted past and future parts, over sentences whose target length falls
/// in [min_len, max_len]. Rows cover positions 1..max_len even when empty.
template <typename Real>
std::vector<FusionSimilarityRow> fusion_similarity(Model<Real>& model,
                                                   const ParallelCorpus& corpus,
                                                   const Vocabulary& src_vocab,
                                                   const Vocabulary& tgt_vocab,
                                                   int min_len = 15,
                                                   int max_len = 25) {
  if (!model.has_seer())
    throw CapabilityError("fusion analysis requires the seer decoder");
  model.params().set_requires_grad(false);
  std::vector<FusionSimilarityRow> rows(max_len);
  for (int p = 0; p < max_len; ++p) rows[p].position = p + 1;
  std::vector<double> sum_past(max_len, 0), sum_future(max_len, 0);

  long long used = 0;
  DropoutCtx<Real> drop;
  for (const auto& pair : corpus.pairs) {
    const int len = static_cast<int>(pair.tgt.size());
    if (len < min_len || len > max_len) continue;
    auto src = src_vocab.encode(join_tokens(pair.src));
    src.push_back(kEosId);
    auto raw = tgt_vocab.encode(join_tokens(pair.tgt));
    auto memory = model.encode(src, drop);
    FusionCapture<Real> cap;
    model.seer_forward(raw, memory, drop, true, &cap);
    for (int i = 0; i < len && i < max_len; ++i) {
      if (cap.has_past)
        sum_past[i] += cosine_rows(cap.fused, cap.past_part, i);
      if (cap.has_future)
        sum_future[i] += cosine_rows(cap.fused, cap.future_part, i);
      ++rows[i].n;
    }
    ++used;
  }
  model.params().set_requires_grad(true);
  if (used == 0)
    throw DataError("fusion_similarity: no sentences with target length in [" +
                    std::to_string(min_len) + "," + std::to_string(max_len) +
                    "]");
  for (int p = 0; p < max_len; ++p) {
    if (rows[p].n == 0) continue;
    rows[p].cos_past = sum_past[p] / rows[p].n;
    rows[p].cos_future = sum_future[p] / rows[p].n;
  }
  return rows;
}

/// Companion metadata written next to every analysis CSV.
inline void write_run_metadata(
    const std::string& path, const std::string& checkpoint_id,
    const std::string& config_hash,
    const std::map<std::string, std::string>& inputs,
    const std::map<std::string, std::string>& extra = {}) {
  nlohmann::json meta = {{"checkpoint", checkpoint_id},
                         {"config_hash", config_hash}};
  for (const auto& [k, v] : inputs) meta["inputs"][k] = v;
  for (const auto& [k, v] : extra) meta[k] = v;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << meta.dump(1) << "\n";
}

}  // namespace seer
