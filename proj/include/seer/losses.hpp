#pragma once

#include <optional>
#include <vector>

#include "seer/config.hpp"
#include "seer/params.hpp"
#include "seer/tensor.hpp"

namespace seer {

/// Summed cross-entropy of the conventional decoder over one sentence:
/// logits rows are the BOS-shifted positions, targets the EOS-terminated
/// content. Per-sentence; the batch loop adds sentences up.
template <typename Real>
Tensor<Real> loss_conventional(const Tensor<Real>& logits,
                               const std::vector<int>& tgt_content,
                               Real label_smoothing = 0) {
  return cross_entropy(logits, tgt_content, label_smoothing);
}

/// Seer cross-entropy over the I prediction positions (no EOS slot).
template <typename Real>
Tensor<Real> loss_seer(const Tensor<Real>& seer_logits,
                       const std::vector<int>& raw_tgt,
                       Real label_smoothing = 0) {
  return cross_entropy(seer_logits, raw_tgt, label_smoothing);
}

/// Knowledge distillation: -sum_i sum_l p_s(l) log p_c(l). The teacher
/// distribution must already be detached (plain values); gradient reaches the
/// student logits only.
template <typename Real>
Tensor<Real> loss_kd(const Tensor<Real>& teacher_probs,
                     const Tensor<Real>& student_logits) {
  if (teacher_probs.shape() != student_logits.shape())
    throw std::invalid_argument("loss_kd: teacher " +
                                shape_str(teacher_probs.shape()) +
                                " vs student " +
                                shape_str(student_logits.shape()));
  if (teacher_probs.requires_grad())
    throw std::invalid_argument("loss_kd: teacher distribution must be detached");
  return scale(sum_all(mul(teacher_probs, log_softmax(student_logits))),
               Real(-1));
}

/// L2 transfer term: sum_i || g(s_ti) - s_si ||_2 (Euclidean norm, not
/// squared). The seer states must be detached by the caller; blocking the
/// encoder path is the training step's job (grad_gate on H).
template <typename Real>
Tensor<Real> loss_l2(const Tensor<Real>& student_states,
                     const Tensor<Real>& seer_states_detached,
                     const Tensor<Real>& g_map) {
  if (seer_states_detached.requires_grad())
    throw std::invalid_argument("loss_l2: seer states must be detached");
  return l2norm_rows_sum(
      sub(matmul_nt(student_states, g_map), seer_states_detached));
}

/// Phase weight of the L2 term: zero while pretraining the two decoders
/// together, alpha afterwards.
inline double l2_weight(const TrainConfig& cfg, long long step) {
  return step < cfg.pretrain_steps ? 0.0 : cfg.alpha;
}

/// CNN discriminator over hidden-state sequences: two width-3 convolutions
/// with 64 channels, ReLU, max-over-time pooling, linear head.
template <typename Real>
struct Discriminator {
  Tensor<Real> conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b;

  static Discriminator from_store(ParamStore<Real>& store) {
    return {store.get("disc.conv1.w"), store.get("disc.conv1.b"),
            store.get("disc.conv2.w"), store.get("disc.conv2.b"),
            store.get("disc.head.w"),  store.get("disc.head.b")};
  }

  /// Width-3 same-padded convolution written as im2col + matmul.
  static Tensor<Real> conv3(const Tensor<Real>& x, const Tensor<Real>& w,
                            const Tensor<Real>& b) {
    const int t = x.rows(), d = x.cols();
    Tensor<Real> zero_row({1, d});
    auto padded = concat_rows<Real>({zero_row, x, zero_row});
    auto windows = concat_cols<Real>({slice_rows(padded, 0, t),
                                      slice_rows(padded, 1, t + 1),
                                      slice_rows(padded, 2, t + 2)});
    return add_rowvec(matmul_nt(windows, w), b);
  }

  /// Scalar logit; sigmoid of it is the probability the sequence is real
  /// (i.e. came from the seer decoder).
  Tensor<Real> logit(const Tensor<Real>& states) const {
    auto h1 = relu(conv3(states, conv1_w, conv1_b));
    auto h2 = relu(conv3(h1, conv2_w, conv2_b));
    auto pooled = max_over_rows(h2);
    return add_rowvec(matmul_nt(pooled, head_w), head_b);
  }
};

/// Adversarial transfer term for one sentence: the discriminator is trained
/// to call seer states real and student states fake; the student states pass
/// through gradient reversal, so the same minimization pushes the student to
/// imitate the seer. Returns the summed BCE of the two classifications.
template <typename Real>
Tensor<Real> loss_adversarial(const Tensor<Real>& student_states,
                              const Tensor<Real>& seer_states_detached,
                              const Discriminator<Real>& disc,
                              Real grl_scale) {
  if (seer_states_detached.requires_grad())
    throw std::invalid_argument("loss_adversarial: seer states must be detached");
  auto real_logit = disc.logit(seer_states_detached);
  auto fake_logit = disc.logit(grad_reversal(student_states, grl_scale));
  return add(bce_with_logit(real_logit, Real(1)),
             bce_with_logit(fake_logit, Real(0)));
}

/// Final objective of the knowledge-distillation system:
/// L = L_s + lambda L_c + (1-lambda) L_kd.
template <typename Real>
Tensor<Real> total_loss(const Tensor<Real>& l_s, const Tensor<Real>& l_c,
                        const Tensor<Real>& l_kd, Real lambda) {
  if (lambda < Real(0) || lambda > Real(1))
    throw std::invalid_argument("total_loss: lambda must be in [0,1]");
  return add(l_s, add(scale(l_c, lambda), scale(l_kd, Real(1) - lambda)));
}

/// Objective of the L2 / adversarial systems: L = L_c + L_s + weight * L_aux.
template <typename Real>
Tensor<Real> total_loss_aux(const Tensor<Real>& l_s, const Tensor<Real>& l_c,
                            const Tensor<Real>& l_aux, Real weight) {
  return add(add(l_c, l_s), scale(l_aux, weight));
}

}  // namespace seer
