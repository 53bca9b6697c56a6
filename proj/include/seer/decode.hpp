#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "seer/config.hpp"
#include "seer/transformer.hpp"

namespace seer {

/// Output length cap for a raw source length J:
/// min(max_len_factor * J + margin, model max_len).
inline int decode_length_cap(const EvalConfig& cfg, int src_raw_len,
                             int model_max_len) {
  const int cap = static_cast<int>(cfg.max_len_factor * src_raw_len) +
                  cfg.max_len_margin;
  return std::min(cap, model_max_len);
}

namespace detail {

// PAD and BOS are never emitted; EOS terminates.
template <typename Real>
void forbid_non_emittable(std::vector<Real>& row) {
  row[kPadId] = -std::numeric_limits<Real>::infinity();
  row[kBosId] = -std::numeric_limits<Real>::infinity();
}

template <typename Real>
std::vector<Real> last_row_logprobs(Model<Real>& model,
                                    const std::vector<int>& prefix,
                                    const Tensor<Real>& memory) {
  DropoutCtx<Real> drop;
  auto out = model.decode_conventional_prefix(prefix, memory, drop);
  const int v = out.logits.cols();
  const int last = out.logits.rows() - 1;
  std::vector<Real> row(v);
  Real mx = -std::numeric_limits<Real>::infinity();
  for (int j = 0; j < v; ++j) mx = std::max(mx, out.logits.at(last, j));
  Real z = 0;
  for (int j = 0; j < v; ++j) z += std::exp(out.logits.at(last, j) - mx);
  const Real lse = mx + std::log(z);
  for (int j = 0; j < v; ++j) row[j] = out.logits.at(last, j) - lse;
  forbid_non_emittable(row);
  return row;
}

inline double length_penalty_norm(double penalty, int emitted_len) {
  return std::pow((5.0 + emitted_len) / 6.0, penalty);
}

}  // namespace detail

/// Iterative argmax from BOS until EOS or the length cap. Returns emitted
/// token ids without BOS/EOS. Run with frozen (requires_grad=false) params.
template <typename Real>
std::vector<int> greedy_decode(Model<Real>& model,
                               const std::vector<int>& src_content,
                               const EvalConfig& cfg) {
  DropoutCtx<Real> drop;
  auto memory = model.encode(src_content, drop);
  const int raw_len = static_cast<int>(src_content.size()) - 1;
  const int cap = decode_length_cap(cfg, std::max(raw_len, 1),
                                    model.config().max_len);
  std::vector<int> prefix = {kBosId};
  std::vector<int> out;
  for (int t = 0; t < cap; ++t) {
    auto row = detail::last_row_logprobs(model, prefix, memory);
    int best = 0;
    for (int j = 1; j < static_cast<int>(row.size()); ++j)
      if (row[j] > row[best]) best = j;
    if (best == kEosId) break;
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

/// Length-normalized beam search; beam_size 1 reproduces greedy_decode
/// exactly. Hypotheses are ranked by logp / ((5+len)/6)^penalty once
/// finished; live beams of equal length compare on raw log probability.
template <typename Real>
std::vector<int> beam_search(Model<Real>& model,
                             const std::vector<int>& src_content,
                             const EvalConfig& cfg) {
  if (cfg.beam_size < 1) throw ConfigError("beam_search: beam_size must be >= 1");
  if (cfg.beam_size == 1) return greedy_decode(model, src_content, cfg);
  DropoutCtx<Real> drop;
  auto memory = model.encode(src_content, drop);
  const int raw_len = static_cast<int>(src_content.size()) - 1;
  const int cap = decode_length_cap(cfg, std::max(raw_len, 1),
                                    model.config().max_len);

  struct Hyp {
    std::vector<int> tokens;  // without BOS/EOS
    double logp = 0;
  };
  std::vector<Hyp> live = {{{}, 0.0}};
  std::vector<Hyp> done;

  for (int t = 0; t < cap && !live.empty(); ++t) {
    struct Cand {
      int beam, token;
      double logp;
    };
    std::vector<Cand> cands;
    for (int b = 0; b < static_cast<int>(live.size()); ++b) {
      std::vector<int> prefix = {kBosId};
      prefix.insert(prefix.end(), live[b].tokens.begin(), live[b].tokens.end());
      auto row = detail::last_row_logprobs(model, prefix, memory);
      for (int v = 0; v < static_cast<int>(row.size()); ++v)
        if (std::isfinite(static_cast<double>(row[v])))
          cands.push_back({b, v, live[b].logp + static_cast<double>(row[v])});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.token != b.token) return a.token < b.token;
      return a.beam < b.beam;
    });
    std::vector<Hyp> next;
    for (const auto& c : cands) {
      if (static_cast<int>(next.size()) >= cfg.beam_size) break;
      Hyp h = live[c.beam];
      h.logp = c.logp;
      if (c.token == kEosId) {
        done.push_back(h);
      } else {
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) done.push_back(h);  // ran into the cap unfinished

  double best_score = -std::numeric_limits<double>::infinity();
  const Hyp* best = nullptr;
  for (const auto& h : done) {
    const double score =
        h.logp / detail::length_penalty_norm(cfg.length_penalty,
                                             static_cast<int>(h.tokens.size()));
    if (!best || score > best_score) {
      best_score = score;
      best = &h;
    }
  }
  return best ? best->tokens : std::vector<int>{};
}

/// Normalized score of a fixed candidate under the model, for comparing
/// search strategies on one objective.
template <typename Real>
double sequence_score(Model<Real>& model, const std::vector<int>& src_content,
                      const std::vector<int>& tokens, const EvalConfig& cfg) {
  DropoutCtx<Real> drop;
  auto memory = model.encode(src_content, drop);
  std::vector<int> prefix = {kBosId};
  double logp = 0;
  for (std::size_t t = 0; t <= tokens.size(); ++t) {
    auto row = detail::last_row_logprobs(model, prefix, memory);
    const int tok = t < tokens.size() ? tokens[t] : kEosId;
    logp += static_cast<double>(row[tok]);
    prefix.push_back(tok);
  }
  return logp / detail::length_penalty_norm(cfg.length_penalty,
                                            static_cast<int>(tokens.size()));
}

enum class DecoderKind { kConventional, kSeer };

/// Per-position argmax with gold context: the conventional decoder sees the
/// past reference, the seer decoder past and future. Returns one predicted
/// token per reference position.
template <typename Real>
std::vector<int> teacher_forced_argmax(Model<Real>& model, DecoderKind kind,
                                       bool cross_attention,
                                       const std::vector<int>& src_content,
                                       const std::vector<int>& ref_raw) {
  if (ref_raw.empty()) return {};
  DropoutCtx<Real> drop;
  auto memory = model.encode(src_content, drop);
  Tensor<Real> logits;
  if (kind == DecoderKind::kConventional) {
    std::vector<int> content = ref_raw;
    content.push_back(kEosId);
    auto out = model.decode_conventional(content, memory, drop, cross_attention);
    logits = slice_rows(out.logits, 0, static_cast<int>(ref_raw.size()));
  } else {
    logits = model.seer_forward(ref_raw, memory, drop, cross_attention).logits;
  }
  std::vector<int> pred(ref_raw.size());
  for (int i = 0; i < logits.rows(); ++i) {
    int best = -1;
    for (int v = 0; v < logits.cols(); ++v) {
      if (v == kPadId || v == kBosId) continue;
      if (best < 0 || logits.at(i, v) > logits.at(i, best)) best = v;
    }
    pred[i] = best;
  }
  return pred;
}

}  // namespace seer
