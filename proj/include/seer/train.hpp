#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "seer/bleu.hpp"
#include "seer/checkpoint.hpp"
#include "seer/config.hpp"
#include "seer/data.hpp"
#include "seer/decode.hpp"
#include "seer/losses.hpp"
#include "seer/optimizer.hpp"
#include "seer/transformer.hpp"

namespace seer {

struct LossReport {
  long long step = 0;
  double l_c = 0, l_s = 0, l_transfer = 0, l_total = 0;  // batch sums
  long long tokens_c = 0, tokens_s = 0;

  double per_token_c() const { return tokens_c ? l_c / tokens_c : 0; }
};

struct ValidationReport {
  double ce_per_token = 0;
  double bleu = 0;
};

/// Run-directory root override; relative io.run_dir paths land under it.
inline std::string resolve_run_dir(const std::string& run_dir) {
  const char* root = std::getenv("SEER_RUN_ROOT");
  if (!root || !*root) return run_dir;
  std::filesystem::path p(run_dir);
  if (p.is_absolute()) return run_dir;
  return (std::filesystem::path(root) / p).string();
}

/// Owns one training run: model, optimizer, data order, metrics, and
/// checkpoints. All randomness is derived from train.seed via named streams,
/// so a (config, seed) pair fixes every artifact byte.
class Trainer {
 public:
  using Real = float;

  Trainer(const RunConfig& cfg, ParallelCorpus train_corpus,
          ParallelCorpus valid_corpus, Vocabulary src_vocab,
          Vocabulary tgt_vocab)
      : cfg_(cfg),
        train_corpus_(std::move(train_corpus)),
        valid_corpus_(std::move(valid_corpus)),
        src_vocab_(std::move(src_vocab)),
        tgt_vocab_(std::move(tgt_vocab)),
        root_(cfg.train.seed),
        model_(cfg.model, static_cast<int>(src_vocab_.size()),
               static_cast<int>(tgt_vocab_.size()), cfg.train.mechanism,
               cfg.train.ablation, cfg.train.seed),
        opt_(cfg.train, cfg.model.d_model),
        gate_open_(std::make_shared<bool>(true)) {}

  Model<Real>& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  const Vocabulary& source_vocab() const { return src_vocab_; }
  const Vocabulary& target_vocab() const { return tgt_vocab_; }
  long long step_index() const { return step_; }

  /// One optimizer step over one batch.
  LossReport train_step(const Batch& batch) {
    const Mechanism mech = cfg_.train.mechanism;
    const bool use_seer = model_.has_seer();
    const Real ls = static_cast<Real>(cfg_.train.label_smoothing);

    DropoutCtx<Real> drop;
    drop.rate = static_cast<Real>(cfg_.model.dropout);
    drop.rng = root_.stream("dropout", static_cast<std::uint64_t>(step_));
    drop.enabled = drop.rate > 0;

    std::optional<Tensor<Real>> sum_c, sum_s, sum_t;
    auto fold = [](std::optional<Tensor<Real>>& acc, Tensor<Real> x) {
      acc = acc ? add(*acc, std::move(x)) : std::move(x);
    };

    LossReport report;
    report.step = step_;
    *gate_open_ = true;

    std::optional<Discriminator<Real>> disc;
    if (mech == Mechanism::kAl)
      disc = Discriminator<Real>::from_store(model_.params());

    for (int b = 0; b < batch.size; ++b) {
      const auto src = batch.src_content(b);
      const auto tgt = batch.tgt_content(b);
      std::vector<int> raw(tgt.begin(), tgt.end() - 1);
      report.tokens_c += static_cast<long long>(tgt.size());
      report.tokens_s += static_cast<long long>(raw.size());

      auto memory = model_.encode(src, drop);
      // the gate lets the l2 phase cut the encoder out of the transfer term
      auto student_memory =
          mech == Mechanism::kL2 ? grad_gate(memory, gate_open_) : memory;
      auto conv = model_.decode_conventional(tgt, student_memory, drop);
      fold(sum_c, loss_conventional(conv.logits, tgt, ls));

      if (!use_seer) continue;
      if (raw.empty()) continue;
      auto seer = model_.seer_forward(raw, memory, drop);
      fold(sum_s, loss_seer(seer.logits, raw, ls));

      const int pred_rows = static_cast<int>(raw.size());
      switch (mech) {
        case Mechanism::kKd: {
          auto teacher = detach(masked_softmax(seer.logits));
          fold(sum_t, loss_kd(teacher, slice_rows(conv.logits, 0, pred_rows)));
          break;
        }
        case Mechanism::kL2:
          fold(sum_t, loss_l2(slice_rows(conv.states, 0, pred_rows),
                              detach(seer.states), model_.params().get("l2.g")));
          break;
        case Mechanism::kAl:
          fold(sum_t, loss_adversarial(slice_rows(conv.states, 0, pred_rows),
                                       detach(seer.states), *disc,
                                       static_cast<Real>(cfg_.train.grl_scale)));
          break;
        case Mechanism::kNone:
          break;
      }
    }

    if (!sum_c) throw DataError("train_step: empty batch");
    report.l_c = sum_c->item();
    report.l_s = sum_s ? sum_s->item() : 0.0;
    report.l_transfer = sum_t ? sum_t->item() : 0.0;

    switch (mech) {
      case Mechanism::kKd: {
        auto total = total_loss(*sum_s, *sum_c,
                                sum_t ? *sum_t : Tensor<Real>({1}),
                                static_cast<Real>(cfg_.train.lambda));
        report.l_total = total.item();
        abort_on_non_finite(report);
        backward(total);
        break;
      }
      case Mechanism::kL2: {
        const double w = l2_weight(cfg_.train, step_);
        auto base = add(*sum_c, *sum_s);
        report.l_total = base.item() + (sum_t ? w * sum_t->item() : 0.0);
        abort_on_non_finite(report);
        backward(base);
        if (sum_t && w > 0) {
          *gate_open_ = false;  // transfer gradients stop at the encoder
          backward(scale(*sum_t, static_cast<Real>(w)));
          *gate_open_ = true;
        }
        break;
      }
      case Mechanism::kAl: {
        auto total = total_loss_aux(*sum_s, *sum_c,
                                    sum_t ? *sum_t : Tensor<Real>({1}),
                                    static_cast<Real>(cfg_.train.alpha));
        report.l_total = total.item();
        abort_on_non_finite(report);
        backward(total);
        break;
      }
      case Mechanism::kNone: {
        auto total = sum_s ? add(*sum_c, *sum_s) : *sum_c;
        report.l_total = total.item();
        abort_on_non_finite(report);
        backward(total);
        break;
      }
    }

    opt_.step(model_.params());
    ++step_;
    return report;
  }

  /// Teacher-forced CE per token plus greedy BLEU on a capped prefix of the
  /// held-out split. Runs with gradients off and dropout disabled.
  ValidationReport validate() {
    ValidationReport rep;
    model_.params().set_requires_grad(false);
    DropoutCtx<Real> drop;
    double ce = 0;
    long long tokens = 0;
    std::vector<std::vector<std::string>> hyps, refs;
    const int bleu_cap = cfg_.train.valid_bleu_sentences;
    for (std::size_t i = 0; i < valid_corpus_.size(); ++i) {
      const auto& pair = valid_corpus_.pairs[i];
      auto src = src_vocab_.encode(join_tokens(pair.src));
      src.push_back(kEosId);
      auto tgt = tgt_vocab_.encode(join_tokens(pair.tgt));
      tgt.push_back(kEosId);
      auto memory = model_.encode(src, drop);
      auto out = model_.decode_conventional(tgt, memory, drop);
      ce += cross_entropy(out.logits, tgt).item();
      tokens += static_cast<long long>(tgt.size());
      if (static_cast<int>(i) < bleu_cap) {
        auto ids = greedy_decode(model_, src, cfg_.eval);
        hyps.push_back(split_tokens(tgt_vocab_.decode(ids)));
        refs.push_back(pair.tgt);
      }
    }
    model_.params().set_requires_grad(true);
    rep.ce_per_token = tokens ? ce / tokens : 0;
    rep.bleu = hyps.empty() ? 0 : corpus_bleu(hyps, refs).score;
    return rep;
  }

  /// Full run: periodic validation and checkpoints, metrics CSV, best and
  /// final checkpoints. Returns the last validation report.
  ValidationReport train_loop() {
    namespace fs = std::filesystem;
    const std::string run_dir = resolve_run_dir(cfg_.io.run_dir);
    fs::create_directories(run_dir);
    cfg_.write_file(run_dir + "/config.ini");
    src_vocab_.save(run_dir + "/src_vocab.txt");
    tgt_vocab_.save(run_dir + "/tgt_vocab.txt");

    std::ofstream metrics(run_dir + "/metrics.csv",
                          resumed_ ? std::ios::app : std::ios::out);
    if (!metrics) throw DataError("cannot write " + run_dir + "/metrics.csv");
    if (!resumed_)
      metrics << "step,l_c,l_s,l_transfer,l_total,valid_ce,valid_bleu\n";

    save_checkpoint(run_dir + "/ckpt_initial");

    ValidationReport last_valid;
    double best_bleu = -1;
    char line[256];
    while (step_ < cfg_.train.steps) {
      const Batch& batch = next_batch();
      LossReport rep = train_step(batch);
      const bool log_now = cfg_.train.log_every > 0 &&
                           (rep.step % cfg_.train.log_every == 0 ||
                            rep.step + 1 == cfg_.train.steps);
      const bool valid_now = cfg_.train.valid_every > 0 &&
                             ((rep.step + 1) % cfg_.train.valid_every == 0 ||
                              rep.step + 1 == cfg_.train.steps);
      std::string valid_cols = ",";
      if (valid_now) {
        last_valid = validate();
        std::snprintf(line, sizeof line, "%.6f,%.4f", last_valid.ce_per_token,
                      last_valid.bleu);
        valid_cols = line;
        if (last_valid.bleu > best_bleu) {
          best_bleu = last_valid.bleu;
          save_checkpoint(run_dir + "/ckpt_best");
        }
      }
      if (log_now || valid_now) {
        std::snprintf(line, sizeof line, "%lld,%.6f,%.6f,%.6f,%.6f,", rep.step,
                      rep.l_c, rep.l_s, rep.l_transfer, rep.l_total);
        metrics << line << valid_cols << "\n";
        metrics.flush();
      }
      if (cfg_.train.ckpt_every > 0 && (rep.step + 1) % cfg_.train.ckpt_every == 0)
        save_checkpoint(run_dir + "/ckpt_step" + std::to_string(rep.step + 1));
    }
    if (cfg_.train.steps > 0) save_checkpoint(run_dir + "/ckpt_final");
    return last_valid;
  }

  Checkpoint snapshot() const {
    Checkpoint ck;
    ck.step = step_;
    ck.config = cfg_;
    ck.src_vocab = src_vocab_;
    ck.tgt_vocab = tgt_vocab_;
    ck.put_params(model_.params());
    ck.opt_step = opt_.step_count();
    for (const auto& [name, slot] : opt_.state()) {
      auto shape = model_.params().get(name).shape();
      std::vector<float> m(slot.m.begin(), slot.m.end());
      std::vector<float> v(slot.v.begin(), slot.v.end());
      ck.opt_state["opt.m." + name] = {shape, std::move(m)};
      ck.opt_state["opt.v." + name] = {shape, std::move(v)};
    }
    return ck;
  }

  void save_checkpoint(const std::string& prefix) const {
    snapshot().save(prefix);
  }

  /// Restores parameters, optimizer state, and data position. The checkpoint
  /// must come from the same effective config.
  void resume_from(const Checkpoint& ck) {
    if (ck.config.semantic_hash() != cfg_.semantic_hash())
      throw CapabilityError(
          "resume conflict: checkpoint config hash " + ck.config.hash_hex() +
          " does not match run config " + cfg_.hash_hex());
    ck.load_into(model_.params());
    for (const auto& [name, entry] : ck.opt_state) {
      const bool is_m = name.rfind("opt.m.", 0) == 0;
      const bool is_v = name.rfind("opt.v.", 0) == 0;
      if (!is_m && !is_v) continue;
      auto& slot = opt_.state()[name.substr(6)];
      auto& dest = is_m ? slot.m : slot.v;
      dest.assign(entry.second.begin(), entry.second.end());
    }
    opt_.set_step_count(ck.opt_step);
    step_ = ck.step;
    // replay the epoch sequence to restore the batch cursor
    epoch_ = 0;
    cursor_ = 0;
    batches_.clear();
    long long remaining = step_;
    while (true) {
      load_epoch(epoch_);
      if (remaining < static_cast<long long>(batches_.size())) {
        cursor_ = static_cast<std::size_t>(remaining);
        break;
      }
      remaining -= static_cast<long long>(batches_.size());
      ++epoch_;
    }
    resumed_ = true;
  }

 private:
  void abort_on_non_finite(const LossReport& rep) const {
    if (!std::isfinite(rep.l_total))
      throw DataError("non-finite loss at step " + std::to_string(rep.step) +
                      " (epoch " + std::to_string(epoch_) + ", batch " +
                      std::to_string(cursor_) + ")");
  }

  void load_epoch(long long epoch) {
    batches_ = make_batches(
        train_corpus_, src_vocab_, tgt_vocab_, cfg_.data.batch_tokens,
        cfg_.data.max_len,
        root_.stream("data", static_cast<std::uint64_t>(epoch)).next_u64());
    if (batches_.empty()) throw DataError("no batches in epoch");
  }

  const Batch& next_batch() {
    if (batches_.empty()) load_epoch(epoch_);
    if (cursor_ >= batches_.size()) {
      ++epoch_;
      load_epoch(epoch_);
      cursor_ = 0;
    }
    return batches_[cursor_++];
  }

  RunConfig cfg_;
  ParallelCorpus train_corpus_, valid_corpus_;
  Vocabulary src_vocab_, tgt_vocab_;
  Rng root_;
  Model<Real> model_;
  Adam<Real> opt_;
  std::shared_ptr<bool> gate_open_;
  long long step_ = 0;
  long long epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<Batch> batches_;
  bool resumed_ = false;
};

}  // namespace seer
