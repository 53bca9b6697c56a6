#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "seer/config.hpp"
#include "seer/mask.hpp"
#include "seer/params.hpp"
#include "seer/tensor.hpp"
#include "seer/vocab.hpp"

namespace seer {

/// Dropout context threaded through forward passes. Disabled (empty) in every
/// evaluation and verification path; training derives one per step from the
/// run seed so that resumed runs replay identical masks.
template <typename Real>
struct DropoutCtx {
  Real rate = 0;
  Rng rng{0};
  bool enabled = false;

  Tensor<Real> operator()(const Tensor<Real>& x) {
    if (!enabled || rate <= Real(0)) return x;
    return dropout(x, rate, rng);
  }
};

template <typename Real>
struct MhaParams {
  Tensor<Real> wq, wk, wv, wo;
};

/// Scaled dot-product multi-head attention. Weights are [d x d]; heads are
/// column slices of the projected tensors.
template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& q_in,
                                  const Tensor<Real>& k_in,
                                  const Tensor<Real>& v_in,
                                  const MhaParams<Real>& p, const Mask& mask,
                                  int n_heads) {
  const int d = p.wq.rows();
  if (d % n_heads != 0)
    throw std::invalid_argument("multi_head_attention: d_model " +
                                std::to_string(d) + " not divisible by " +
                                std::to_string(n_heads) + " heads");
  auto q = matmul_nt(q_in, p.wq);
  auto k = matmul_nt(k_in, p.wk);
  auto v = matmul_nt(v_in, p.wv);
  const int dh = d / n_heads;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  std::vector<Tensor<Real>> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = slice_cols(v, h * dh, (h + 1) * dh);
    auto attn = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    heads.push_back(matmul(attn, vh));
  }
  return matmul_nt(n_heads == 1 ? heads[0] : concat_cols(heads), p.wo);
}

template <typename Real>
struct AttnBlockParams {
  MhaParams<Real> proj;
  Tensor<Real> ln_g, ln_b;
};

template <typename Real>
struct FfnBlockParams {
  Tensor<Real> w1, b1, w2, b2, ln_g, ln_b;
};

template <typename Real>
struct EncoderLayerParams {
  AttnBlockParams<Real> mha;
  FfnBlockParams<Real> ffn;
};

template <typename Real>
struct DecoderLayerParams {
  AttnBlockParams<Real> mha;
  AttnBlockParams<Real> cross;
  FfnBlockParams<Real> ffn;
};

template <typename Real>
struct FusionParams {
  AttnBlockParams<Real> mha;  // one set, applied to both the past and future paths
  Tensor<Real> wp, wf;
  AttnBlockParams<Real> cross;
  FfnBlockParams<Real> ffn;
};

// Post-norm residual sublayers, as in the original Transformer.

template <typename Real>
Tensor<Real> self_attention_block(const Tensor<Real>& x, const Mask& mask,
                                  const AttnBlockParams<Real>& p, int n_heads,
                                  DropoutCtx<Real>& drop) {
  auto a = drop(multi_head_attention(x, x, x, p.proj, mask, n_heads));
  return layer_norm(add(x, a), p.ln_g, p.ln_b);
}

/// With cross-attention disabled the sublayer output is replaced by zeros;
/// residual and norm stay in place, so the result is layer_norm(x).
template <typename Real>
Tensor<Real> cross_attention_block(const Tensor<Real>& x,
                                   const Tensor<Real>& memory,
                                   const AttnBlockParams<Real>& p, int n_heads,
                                   bool enabled, DropoutCtx<Real>& drop) {
  if (!enabled) return layer_norm(x, p.ln_g, p.ln_b);
  auto a = drop(multi_head_attention(x, memory, memory, p.proj, Mask(), n_heads));
  return layer_norm(add(x, a), p.ln_g, p.ln_b);
}

template <typename Real>
Tensor<Real> ffn_block(const Tensor<Real>& x, const FfnBlockParams<Real>& p,
                       DropoutCtx<Real>& drop) {
  auto h = relu(add_rowvec(matmul_nt(x, p.w1), p.b1));
  auto y = drop(add_rowvec(matmul_nt(h, p.w2), p.b2));
  return layer_norm(add(x, y), p.ln_g, p.ln_b);
}

/// Sinusoidal position encodings; row 0 is [0,1,0,1,...].
template <typename Real>
Tensor<Real> sinusoidal_positions(int max_positions, int d_model) {
  Tensor<Real> pe({max_positions, d_model});
  for (int pos = 0; pos < max_positions; ++pos)
    for (int j = 0; j < d_model; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / d_model;
      const double angle = pos / std::pow(10000.0, exponent);
      pe.at(pos, j) =
          static_cast<Real>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

template <typename Real>
struct SeerForwardResult {
  Tensor<Real> states;  // I x d_model, one row per prediction position
  Tensor<Real> logits;  // I x |V|
};

/// Captures of the fusion internals for the similarity analysis.
template <typename Real>
struct FusionCapture {
  Tensor<Real> fused;        // A
  Tensor<Real> past_part;    // Wp H'p
  Tensor<Real> future_part;  // Wf H''f
  bool has_past = false, has_future = false;
};

/// Masks over the BOS y*_1..y*_I EOS decorated sequence, with one row per
/// decorated index. Rows are assigned to prediction positions so that each
/// query row's own input embedding lies inside its permitted set (residual
/// connections re-inject the row's own embedding, so a row whose token were
/// excluded by its mask would still leak it):
///   prediction i is served by row i-1 under mp, visible {BOS, y*_<i},
///   and by row i+1 under mf, visible {y*_>i, EOS}.
/// The BOS/EOS decoration guarantees those rows exist for i=1 and i=I and
/// that no row of either mask is fully forbidden.
struct SeerMasks {
  Mask mp, mf;

  static int past_row(int prediction_pos) { return prediction_pos - 1; }
  static int future_row(int prediction_pos) { return prediction_pos + 1; }
};

inline SeerMasks build_seer_masks(int target_len) {
  if (target_len < 1)
    throw std::invalid_argument("build_seer_masks: target_len must be >= 1");
  const int n = target_len + 2;
  SeerMasks m{Mask(n, n, true), Mask(n, n, true)};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j <= i) m.mp.set_forbidden(i, j, false);
      if (j >= i) m.mf.set_forbidden(i, j, false);
    }
  return m;
}

/// Encoder, conventional decoder, and seer decoder over one parameter store.
/// All forward passes run per sentence on unpadded id sequences.
template <typename Real>
class Model {
 public:
  Model(const ModelConfig& cfg, int src_vocab_size, int tgt_vocab_size,
        Mechanism mechanism, Ablation ablation, std::uint64_t seed)
      : cfg_(cfg),
        ablation_(ablation),
        src_vocab_size_(src_vocab_size),
        tgt_vocab_size_(tgt_vocab_size),
        store_(seed),
        posenc_(sinusoidal_positions<Real>(cfg.max_len + 2, cfg.d_model)) {
    const int d = cfg.d_model;
    src_embed_ = store_.create("src_embed.weight", {src_vocab_size, d},
                               Init::kEmbedding);
    tgt_embed_ = store_.create("tgt_embed.weight", {tgt_vocab_size, d},
                               Init::kEmbedding);
    wo_ = store_.create("out.wo", {tgt_vocab_size, d}, Init::kXavier);
    for (int i = 0; i < cfg.n_layers; ++i) {
      std::string p = "encoder.layer" + std::to_string(i) + ".";
      enc_layers_.push_back(
          {make_attn_block(p + "mha."), make_ffn_block(p + "ffn.")});
    }
    for (int i = 0; i < cfg.n_layers; ++i) {
      std::string p = "decoder.layer" + std::to_string(i) + ".";
      dec_layers_.push_back({make_attn_block(p + "mha."),
                             make_attn_block(p + "cross."),
                             make_ffn_block(p + "ffn.")});
    }
    if (ablation != Ablation::kNoSeer) {
      for (int i = 0; i + 1 < cfg.n_layers; ++i) {
        std::string p = "seer.sub.layer" + std::to_string(i) + ".";
        seer_sub_layers_.push_back({make_attn_block(p + "mha."),
                                    make_attn_block(p + "cross."),
                                    make_ffn_block(p + "ffn.")});
      }
      fusion_ = FusionParams<Real>{
          make_attn_block("seer.fusion.mha."),
          store_.create("seer.fusion.wp", {d, d}, Init::kXavier),
          store_.create("seer.fusion.wf", {d, d}, Init::kXavier),
          make_attn_block("seer.fusion.cross."),
          make_ffn_block("seer.fusion.ffn.")};
    }
    if (mechanism == Mechanism::kL2)
      store_.create("l2.g", {d, d}, Init::kXavier);
    if (mechanism == Mechanism::kAl) {
      store_.create("disc.conv1.w", {64, 3 * d}, Init::kXavier);
      store_.create("disc.conv1.b", {64}, Init::kZeros);
      store_.create("disc.conv2.w", {64, 3 * 64}, Init::kXavier);
      store_.create("disc.conv2.b", {64}, Init::kZeros);
      store_.create("disc.head.w", {1, 64}, Init::kXavier);
      store_.create("disc.head.b", {1}, Init::kZeros);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Ablation ablation() const { return ablation_; }
  ParamStore<Real>& params() { return store_; }
  const ParamStore<Real>& params() const { return store_; }
  Tensor<Real>& output_matrix() { return wo_; }
  bool has_seer() const { return ablation_ != Ablation::kNoSeer; }
  int target_vocab_size() const { return tgt_vocab_size_; }

  /// Token embeddings (scaled by sqrt(d)) plus position encodings.
  Tensor<Real> embed(const Tensor<Real>& table, const std::vector<int>& ids,
                     DropoutCtx<Real>& drop) {
    const int t = static_cast<int>(ids.size());
    if (t > cfg_.max_len + 2)
      throw DataError("sequence of length " + std::to_string(t) +
                      " exceeds model max_len " + std::to_string(cfg_.max_len));
    auto e = scale(embedding(table, ids),
                   static_cast<Real>(std::sqrt(double(cfg_.d_model))));
    return drop(add(e, slice_rows(posenc_, 0, t)));
  }

  /// Source hidden states H for one EOS-terminated sentence.
  Tensor<Real> encode(const std::vector<int>& src_content,
                      DropoutCtx<Real>& drop) {
    auto x = embed(src_embed_, src_content, drop);
    for (auto& layer : enc_layers_) {
      x = self_attention_block(x, Mask(), layer.mha, cfg_.n_heads, drop);
      x = ffn_block(x, layer.ffn, drop);
    }
    return x;
  }

  struct DecodeResult {
    Tensor<Real> states;  // L x d_model
    Tensor<Real> logits;  // L x |V|
  };

  /// Causal decoder over the BOS-shifted input: position r predicts
  /// tgt_content[r], so the last position predicts EOS.
  DecodeResult decode_conventional(const std::vector<int>& tgt_content,
                                   const Tensor<Real>& memory,
                                   DropoutCtx<Real>& drop,
                                   bool cross_attention = true) {
    std::vector<int> input(tgt_content.size());
    input[0] = kBosId;
    std::copy(tgt_content.begin(), tgt_content.end() - 1, input.begin() + 1);
    return decode_conventional_prefix(input, memory, drop, cross_attention);
  }

  /// Same stack over an arbitrary BOS-led prefix (used by search).
  DecodeResult decode_conventional_prefix(const std::vector<int>& input,
                                          const Tensor<Real>& memory,
                                          DropoutCtx<Real>& drop,
                                          bool cross_attention = true) {
    if (input.empty() || input[0] != kBosId)
      throw DataError("conventional decoder input must begin with BOS");
    auto x = embed(tgt_embed_, input, drop);
    Mask causal = Mask::causal(static_cast<int>(input.size()));
    for (auto& layer : dec_layers_) {
      x = self_attention_block(x, causal, layer.mha, cfg_.n_heads, drop);
      x = cross_attention_block(x, memory, layer.cross, cfg_.n_heads,
                                cross_attention, drop);
      x = ffn_block(x, layer.ffn, drop);
    }
    return {x, matmul_nt(x, wo_)};
  }

  /// Past/future subdecoder stack (shared parameters; the mask is the only
  /// difference) over the decorated sequence.
  Tensor<Real> subdecoder_forward(const std::vector<int>& decorated,
                                  const Mask& mask, const Tensor<Real>& memory,
                                  DropoutCtx<Real>& drop,
                                  bool cross_attention = true) {
    auto x = embed(tgt_embed_, decorated, drop);
    for (auto& layer : seer_sub_layers_) {
      x = self_attention_block(x, mask, layer.mha, cfg_.n_heads, drop);
      x = cross_attention_block(x, memory, layer.cross, cfg_.n_heads,
                                cross_attention, drop);
      x = ffn_block(x, layer.ffn, drop);
    }
    return x;
  }

  /// Full seer pass for one raw target (no EOS). Rows 1..I of the decorated
  /// sequence are the prediction positions.
  SeerForwardResult<Real> seer_forward(const std::vector<int>& raw_tgt,
                                       const Tensor<Real>& memory,
                                       DropoutCtx<Real>& drop,
                                       bool cross_attention = true,
                                       FusionCapture<Real>* capture = nullptr) {
    if (!has_seer())
      throw CapabilityError("seer decoder absent (ablation=no_seer)");
    if (raw_tgt.empty()) throw DataError("seer_forward: empty target");
    const int len = static_cast<int>(raw_tgt.size());
    std::vector<int> decorated;
    decorated.reserve(len + 2);
    decorated.push_back(kBosId);
    decorated.insert(decorated.end(), raw_tgt.begin(), raw_tgt.end());
    decorated.push_back(kEosId);

    SeerMasks masks = build_seer_masks(len);
    const bool use_past = ablation_ != Ablation::kNoPast;
    const bool use_future = ablation_ != Ablation::kNoFuture;

    // Fusion: re-encode each subdecoder output under its own mask, align the
    // two by prediction position (past row i-1, future row i+1 both serve
    // prediction i), fuse linearly (no bias, no residual), then
    // cross-attention and FFN over the I prediction rows.
    std::optional<Tensor<Real>> fused;
    FusionCapture<Real> local;
    if (use_past) {
      auto hp = subdecoder_forward(decorated, masks.mp, memory, drop,
                                   cross_attention);
      auto hp2 = self_attention_block(hp, masks.mp, fusion_->mha, cfg_.n_heads,
                                      drop);
      auto aligned = slice_rows(hp2, SeerMasks::past_row(1),
                                SeerMasks::past_row(len) + 1);
      local.past_part = matmul_nt(aligned, fusion_->wp);
      local.has_past = true;
      fused = local.past_part;
    }
    if (use_future) {
      auto hf = subdecoder_forward(decorated, masks.mf, memory, drop,
                                   cross_attention);
      auto hf2 = self_attention_block(hf, masks.mf, fusion_->mha, cfg_.n_heads,
                                      drop);
      auto aligned = slice_rows(hf2, SeerMasks::future_row(1),
                                SeerMasks::future_row(len) + 1);
      local.future_part = matmul_nt(aligned, fusion_->wf);
      local.has_future = true;
      fused = fused ? add(*fused, local.future_part) : local.future_part;
    }
    if (!fused)
      throw CapabilityError("seer decoder has neither subdecoder enabled");
    local.fused = *fused;
    if (capture) *capture = local;

    auto crossed = cross_attention_block(*fused, memory, fusion_->cross,
                                         cfg_.n_heads, cross_attention, drop);
    auto states = ffn_block(crossed, fusion_->ffn, drop);
    return {states, matmul_nt(states, wo_)};
  }

 private:
  AttnBlockParams<Real> make_attn_block(const std::string& prefix) {
    const int d = cfg_.d_model;
    return {MhaParams<Real>{store_.create(prefix + "wq", {d, d}, Init::kXavier),
                            store_.create(prefix + "wk", {d, d}, Init::kXavier),
                            store_.create(prefix + "wv", {d, d}, Init::kXavier),
                            store_.create(prefix + "wo", {d, d}, Init::kXavier)},
            store_.create(prefix + "ln.g", {d}, Init::kOnes),
            store_.create(prefix + "ln.b", {d}, Init::kZeros)};
  }

  FfnBlockParams<Real> make_ffn_block(const std::string& prefix) {
    const int d = cfg_.d_model, f = cfg_.d_ffn;
    return {store_.create(prefix + "w1", {f, d}, Init::kXavier),
            store_.create(prefix + "b1", {f}, Init::kZeros),
            store_.create(prefix + "w2", {d, f}, Init::kXavier),
            store_.create(prefix + "b2", {d}, Init::kZeros),
            store_.create(prefix + "ln.g", {d}, Init::kOnes),
            store_.create(prefix + "ln.b", {d}, Init::kZeros)};
  }

  ModelConfig cfg_;
  Ablation ablation_;
  int src_vocab_size_, tgt_vocab_size_;
  ParamStore<Real> store_;
  Tensor<Real> posenc_;
  Tensor<Real> src_embed_, tgt_embed_, wo_;
  std::vector<EncoderLayerParams<Real>> enc_layers_;
  std::vector<DecoderLayerParams<Real>> dec_layers_;
  std::vector<DecoderLayerParams<Real>> seer_sub_layers_;
  std::optional<FusionParams<Real>> fusion_;
};

}  // namespace seer
