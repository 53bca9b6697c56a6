#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "seer/gradcheck.hpp"
#include "seer/transformer.hpp"

using namespace seer;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.dropout = 0;
  cfg.max_len = 32;
  return cfg;
}

template <typename Real>
Model<Real> tiny_model(std::uint64_t seed = 1,
                       Ablation ablation = Ablation::kFull) {
  return Model<Real>(tiny_config(), 12, 12, Mechanism::kNone, ablation, seed);
}

std::set<int> permitted(const Mask& m, int row) {
  std::set<int> out;
  for (int j = 0; j < m.cols(); ++j)
    if (!m.forbidden(row, j)) out.insert(j);
  return out;
}

}  // namespace

TEST_CASE("seer masks") {
  SECTION("I=1 boundary: prediction 1 sees BOS only / EOS only") {
    auto m = build_seer_masks(1);
    CHECK(permitted(m.mp, SeerMasks::past_row(1)) == std::set<int>{0});
    CHECK(permitted(m.mf, SeerMasks::future_row(1)) == std::set<int>{2});
  }

  SECTION("I=3, i=2 matches the printed definition") {
    auto m = build_seer_masks(3);
    CHECK(permitted(m.mp, SeerMasks::past_row(2)) == std::set<int>{0, 1});
    CHECK(permitted(m.mf, SeerMasks::future_row(2)) == std::set<int>{3, 4});
  }

  SECTION("no prediction may see its own token, no row is empty") {
    for (int len : {1, 2, 5, 9}) {
      auto m = build_seer_masks(len);
      for (int i = 1; i <= len; ++i) {
        auto past = permitted(m.mp, SeerMasks::past_row(i));
        auto future = permitted(m.mf, SeerMasks::future_row(i));
        CHECK(past == [&] {
          std::set<int> want;
          for (int j = 0; j < i; ++j) want.insert(j);
          return want;
        }());
        CHECK_FALSE(past.count(i));
        CHECK_FALSE(future.count(i));
        for (int j : past) CHECK_FALSE(future.count(j));  // disjoint
      }
      for (int i = 0; i < len + 2; ++i) {
        CHECK_FALSE(permitted(m.mp, i).empty());
        CHECK_FALSE(permitted(m.mf, i).empty());
      }
    }
  }
}

TEST_CASE("subdecoder information flow follows its mask") {
  auto model = tiny_model<float>(11);
  DropoutCtx<float> drop;
  auto memory = model.encode({4, 5, 6, kEosId}, drop);
  std::vector<int> raw = {6, 7, 8, 9};
  const int len = static_cast<int>(raw.size());
  auto masks = build_seer_masks(len);
  auto decorate = [&](const std::vector<int>& t) {
    std::vector<int> d = {kBosId};
    d.insert(d.end(), t.begin(), t.end());
    d.push_back(kEosId);
    return d;
  };

  auto hp = model.subdecoder_forward(decorate(raw), masks.mp, memory, drop);
  auto hf = model.subdecoder_forward(decorate(raw), masks.mf, memory, drop);

  // Perturbing y*_j must leave the past representation of prediction i
  // untouched for every j >= i, and the future representation untouched for
  // every j <= i.
  for (int flip = 0; flip < len; ++flip) {
    auto moved = raw;
    moved[flip] = moved[flip] == 6 ? 7 : 6;
    auto hp2 = model.subdecoder_forward(decorate(moved), masks.mp, memory, drop);
    auto hf2 = model.subdecoder_forward(decorate(moved), masks.mf, memory, drop);
    const int j = flip + 1;  // 1-based prediction index of the flipped token
    for (int i = 1; i <= len; ++i)
      for (int c = 0; c < 16; ++c) {
        if (j >= i) {
          const int r = SeerMasks::past_row(i);
          CHECK(std::abs(hp.at(r, c) - hp2.at(r, c)) < 1e-6f);
        }
        if (j <= i) {
          const int r = SeerMasks::future_row(i);
          CHECK(std::abs(hf.at(r, c) - hf2.at(r, c)) < 1e-6f);
        }
      }
  }
}

TEST_CASE("shared subdecoder parameters receive both path gradients") {
  auto model = tiny_model<double>(13);
  DropoutCtx<double> drop;
  std::vector<int> src = {4, 5, kEosId};
  std::vector<int> raw = {6, 7, 8};

  auto fn = [&] {
    auto memory = model.encode(src, drop);
    auto out = model.seer_forward(raw, memory, drop);
    return cross_entropy(out.logits, raw);
  };
  std::vector<Tensor<double>> shared = {
      model.params().get("seer.sub.layer0.mha.wq"),
      model.params().get("seer.sub.layer0.cross.wv"),
      model.params().get("seer.sub.layer0.ffn.w1"),
  };
  auto rep = grad_check<double>(fn, shared, 1e-5, 24);
  INFO(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("exactly one subdecoder parameter set exists") {
  auto model = tiny_model<float>();
  int sub_sets = 0;
  for (const auto& name : model.params().names()) {
    CHECK(name.find("past") == std::string::npos);
    CHECK(name.find("future") == std::string::npos);
    if (name == "seer.sub.layer0.mha.wq") ++sub_sets;
  }
  CHECK(sub_sets == 1);
}

TEST_CASE("seer path depth is N layers of decoder compute") {
  auto model = tiny_model<float>();
  // N-1 subdecoder layers plus the fusion layer
  int sub_layers = 0;
  for (const auto& name : model.params().names())
    if (name.find("seer.sub.layer") == 0 && name.find(".mha.wq") != std::string::npos)
      ++sub_layers;
  bool has_fusion = model.params().has("seer.fusion.wp");
  CHECK(sub_layers == tiny_config().n_layers - 1);
  CHECK(has_fusion);
}

TEST_CASE("fusion linear combination") {
  auto model = tiny_model<float>(19);
  DropoutCtx<float> drop;
  auto memory = model.encode({4, 5, kEosId}, drop);
  std::vector<int> raw = {6, 7, 8};

  SECTION("Wp = identity, Wf = 0 makes A the re-encoded past exactly") {
    auto& wp = model.params().get("seer.fusion.wp");
    auto& wf = model.params().get("seer.fusion.wf");
    std::fill(wp.value().begin(), wp.value().end(), 0.0f);
    for (int i = 0; i < 16; ++i) wp.at(i, i) = 1.0f;
    std::fill(wf.value().begin(), wf.value().end(), 0.0f);

    FusionCapture<float> cap;
    model.seer_forward(raw, memory, drop, true, &cap);
    REQUIRE(cap.has_past);
    for (std::size_t i = 0; i < cap.fused.numel(); ++i) {
      CHECK(cap.fused.value()[i] == Catch::Approx(cap.past_part.value()[i]));
      CHECK(cap.future_part.value()[i] == 0.0f);
    }
  }

  SECTION("reverse_rows flips row order") {
    Tensor<float> h({3, 2}, {1, 2, 3, 4, 5, 6});
    auto r = reverse_rows(h);
    CHECK(r.value() == std::vector<float>{5, 6, 3, 4, 1, 2});
  }
}

TEST_CASE("seer distribution never peeks at the predicted token") {
  auto model = tiny_model<float>(23);
  DropoutCtx<float> drop;
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const int src_len = rng.range(2, 5);
    const int len = rng.range(1, 6);
    std::vector<int> src(src_len);
    for (int& t : src) t = rng.range(4, 11);
    src.push_back(kEosId);
    std::vector<int> raw(len);
    for (int& t : raw) t = rng.range(4, 11);

    auto memory = model.encode(src, drop);
    auto base = masked_softmax(model.seer_forward(raw, memory, drop).logits);

    const int i = rng.range(0, len - 1);
    auto moved = raw;
    moved[i] = moved[i] == 4 ? 5 : 4;
    auto out = masked_softmax(model.seer_forward(moved, memory, drop).logits);
    for (int v = 0; v < 12; ++v)
      CHECK(std::abs(base.at(i, v) - out.at(i, v)) < 1e-6f);
  }
}

TEST_CASE("seer distribution rows normalize") {
  auto model = tiny_model<float>(29);
  DropoutCtx<float> drop;
  auto memory = model.encode({4, 7, kEosId}, drop);
  auto p = masked_softmax(model.seer_forward({5, 6, 9}, memory, drop).logits);
  for (int i = 0; i < p.rows(); ++i) {
    float s = 0;
    for (int v = 0; v < p.cols(); ++v) s += p.at(i, v);
    CHECK(s == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("subdecoder ablations drop one path") {
  DropoutCtx<float> drop;

  auto no_future = tiny_model<float>(31, Ablation::kNoFuture);
  auto memory = no_future.encode({4, 5, kEosId}, drop);
  FusionCapture<float> cap;
  no_future.seer_forward({6, 7}, memory, drop, true, &cap);
  CHECK(cap.has_past);
  CHECK_FALSE(cap.has_future);

  auto no_past = tiny_model<float>(31, Ablation::kNoPast);
  auto memory2 = no_past.encode({4, 5, kEosId}, drop);
  FusionCapture<float> cap2;
  no_past.seer_forward({6, 7}, memory2, drop, true, &cap2);
  CHECK(cap2.has_future);
  CHECK_FALSE(cap2.has_past);

  auto no_seer = tiny_model<float>(31, Ablation::kNoSeer);
  auto memory3 = no_seer.encode({4, 5, kEosId}, drop);
  CHECK_THROWS_AS(no_seer.seer_forward({6, 7}, memory3, drop),
                  CapabilityError);
}
