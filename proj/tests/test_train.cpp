#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "seer/train.hpp"

using namespace seer;

namespace {

RunConfig toy_config(const std::string& run_dir, Mechanism mech,
                     Ablation ablation = Ablation::kFull, int steps = 6) {
  RunConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.d_ffn = 32;
  cfg.model.dropout = 0.1;
  cfg.model.max_len = 16;
  cfg.data.batch_tokens = 24;
  cfg.data.max_len = 16;
  cfg.train.steps = steps;
  cfg.train.mechanism = mech;
  cfg.train.ablation = ablation;
  cfg.train.warmup_steps = 4;
  cfg.train.valid_every = 3;
  cfg.train.ckpt_every = 3;
  cfg.train.log_every = 1;
  cfg.train.valid_bleu_sentences = 4;
  cfg.io.run_dir = run_dir;
  cfg.validate();
  return cfg;
}

struct Corpora {
  ParallelCorpus train, valid;
  Vocabulary vocab;
};

Corpora toy_data(std::uint64_t seed = 51) {
  Corpora c;
  c.train = gen_synthetic(SyntheticTask::kLexicon, 24, 16, 2, 6, seed);
  c.valid = gen_synthetic(SyntheticTask::kLexicon, 6, 16, 2, 6, seed + 1);
  std::vector<std::vector<std::string>> all;
  for (const auto& p : c.train.pairs) {
    all.push_back(p.src);
    all.push_back(p.tgt);
  }
  c.vocab = Vocabulary::build(all);
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<LossReport> run_steps(Trainer& t, int n) {
  std::vector<LossReport> reports;
  auto data = toy_data();
  auto batches = make_batches(data.train, data.vocab, data.vocab, 24, 16, 7);
  for (int i = 0; i < n; ++i)
    reports.push_back(t.train_step(batches[i % batches.size()]));
  return reports;
}

}  // namespace

TEST_CASE("identical seeds give identical loss streams") {
  auto data = toy_data();
  for (Mechanism mech : {Mechanism::kKd, Mechanism::kAl}) {
    auto cfg = toy_config("/tmp/seer_t0", mech);
    Trainer a(cfg, data.train, data.valid, data.vocab, data.vocab);
    Trainer b(cfg, data.train, data.valid, data.vocab, data.vocab);
    auto ra = run_steps(a, 4);
    auto rb = run_steps(b, 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(ra[i].l_total == rb[i].l_total);
      CHECK(ra[i].l_c == rb[i].l_c);
      CHECK(ra[i].l_transfer == rb[i].l_transfer);
    }
  }
}

TEST_CASE("metrics CSV is byte-identical across reruns") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t1", Mechanism::kKd);
  std::filesystem::remove_all("/tmp/seer_t1");
  Trainer(cfg, data.train, data.valid, data.vocab, data.vocab).train_loop();
  auto first = slurp("/tmp/seer_t1/metrics.csv");
  std::filesystem::remove_all("/tmp/seer_t1");
  Trainer(cfg, data.train, data.valid, data.vocab, data.vocab).train_loop();
  CHECK(first == slurp("/tmp/seer_t1/metrics.csv"));
  CHECK(first.rfind("step,l_c,l_s,l_transfer,l_total,valid_ce,valid_bleu\n", 0) == 0);
}

TEST_CASE("kd loss report satisfies the lambda identity") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t2", Mechanism::kKd);
  cfg.train.lambda = 0.25;
  Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
  for (const auto& rep : run_steps(t, 3)) {
    CHECK(rep.l_total ==
          Catch::Approx(rep.l_s + 0.25 * rep.l_c + 0.75 * rep.l_transfer)
              .epsilon(1e-5));
  }
}

TEST_CASE("max_steps=0 emits the initial checkpoint only") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t3", Mechanism::kKd, Ablation::kFull, 0);
  std::filesystem::remove_all("/tmp/seer_t3");
  Trainer(cfg, data.train, data.valid, data.vocab, data.vocab).train_loop();
  CHECK(std::filesystem::exists("/tmp/seer_t3/ckpt_initial.json"));
  CHECK(std::filesystem::exists("/tmp/seer_t3/ckpt_initial.bin"));
  CHECK_FALSE(std::filesystem::exists("/tmp/seer_t3/ckpt_final.json"));
}

TEST_CASE("resume reproduces the next loss report exactly") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t4", Mechanism::kKd, Ablation::kFull, 6);
  std::filesystem::remove_all("/tmp/seer_t4");

  Trainer full(cfg, data.train, data.valid, data.vocab, data.vocab);
  full.train_loop();

  // ckpt_step3 was written after step index 2; a resumed trainer must
  // replay steps 3.. with identical losses
  Trainer fresh(cfg, data.train, data.valid, data.vocab, data.vocab);
  fresh.resume_from(Checkpoint::load("/tmp/seer_t4/ckpt_step3"));
  CHECK(fresh.step_index() == 3);

  // continuation through the public loop: compare metrics rows
  std::filesystem::remove_all("/tmp/seer_t4b");
  auto cfg_b = cfg;
  cfg_b.io.run_dir = "/tmp/seer_t4b";
  Trainer resumed(cfg_b, data.train, data.valid, data.vocab, data.vocab);
  resumed.resume_from(Checkpoint::load("/tmp/seer_t4/ckpt_step3"));
  resumed.train_loop();

  // rows for steps 3..5 must match the uninterrupted run byte for byte
  auto tail_of = [](const std::string& csv, int from_step) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line))
      if (line.rfind(std::to_string(from_step) + ",", 0) == 0 ||
          (!line.empty() && std::isdigit(line[0]) &&
           std::stoi(line) >= from_step))
        out += line + "\n";
    return out;
  };
  auto full_csv = slurp("/tmp/seer_t4/metrics.csv");
  auto resumed_csv = slurp("/tmp/seer_t4b/metrics.csv");
  CHECK(tail_of(full_csv, 3) == tail_of(resumed_csv, 3));

  SECTION("config mismatch is a resume conflict") {
    auto other = cfg;
    other.train.lambda = 0.125;
    Trainer t(other, data.train, data.valid, data.vocab, data.vocab);
    CHECK_THROWS_AS(t.resume_from(Checkpoint::load("/tmp/seer_t4/ckpt_step3")),
                    CapabilityError);
  }
}

TEST_CASE("ablations") {
  auto data = toy_data();

  SECTION("no_kd forces mechanism none and zero transfer loss") {
    auto cfg = toy_config("/tmp/seer_t5", Mechanism::kKd, Ablation::kNoKd);
    CHECK(cfg.train.mechanism == Mechanism::kNone);
    Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
    for (const auto& rep : run_steps(t, 2)) {
      CHECK(rep.l_transfer == 0.0);
      CHECK(rep.l_s > 0.0);
    }
  }

  SECTION("no_future and no_past still train") {
    for (Ablation a : {Ablation::kNoFuture, Ablation::kNoPast}) {
      auto cfg = toy_config("/tmp/seer_t6", Mechanism::kKd, a);
      Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
      auto reps = run_steps(t, 2);
      CHECK(reps[1].l_total < reps[0].l_total * 2);  // finite and moving
      CHECK(reps[1].l_transfer > 0.0);               // kd still active
    }
  }

  SECTION("no_seer trains the conventional decoder alone") {
    auto cfg = toy_config("/tmp/seer_t7", Mechanism::kKd, Ablation::kNoSeer);
    CHECK(cfg.train.mechanism == Mechanism::kNone);
    Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
    auto reps = run_steps(t, 2);
    CHECK(reps[0].l_s == 0.0);
    CHECK(reps[0].l_c > 0.0);
    for (const auto& name : t.model().params().names())
      CHECK(name.rfind("seer.", 0) != 0);
  }
}

TEST_CASE("l2 schedule switches the transfer term on") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t8", Mechanism::kL2);
  cfg.train.pretrain_steps = 2;
  cfg.train.alpha = 0.2;
  Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
  auto reps = run_steps(t, 4);
  // phase 1: total excludes the (still reported) l2 value
  CHECK(reps[0].l_total == Catch::Approx(reps[0].l_c + reps[0].l_s));
  CHECK(reps[0].l_transfer > 0.0);
  // phase 2: total includes alpha * l2
  CHECK(reps[2].l_total ==
        Catch::Approx(reps[2].l_c + reps[2].l_s + 0.2 * reps[2].l_transfer)
            .epsilon(1e-5));
}

TEST_CASE("non-finite loss aborts with batch context") {
  auto data = toy_data();
  auto cfg = toy_config("/tmp/seer_t9", Mechanism::kKd);
  Trainer t(cfg, data.train, data.valid, data.vocab, data.vocab);
  auto& b2 = t.model().params().get("encoder.layer0.ffn.b2");
  b2.value()[0] = std::numeric_limits<float>::quiet_NaN();
  auto batches = make_batches(data.train, data.vocab, data.vocab, 24, 16, 7);
  CHECK_THROWS_WITH(t.train_step(batches[0]),
                    Catch::Matchers::ContainsSubstring("non-finite") &&
                        Catch::Matchers::ContainsSubstring("batch"));
}
