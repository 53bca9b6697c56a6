#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace seer {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CapabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mechanism { kKd, kL2, kAl, kNone };
enum class Ablation { kFull, kNoFuture, kNoPast, kNoKd, kNoSeer };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::kKd: return "kd";
    case Mechanism::kL2: return "l2";
    case Mechanism::kAl: return "al";
    case Mechanism::kNone: return "none";
  }
  return "?";
}

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoFuture: return "no_future";
    case Ablation::kNoPast: return "no_past";
    case Ablation::kNoKd: return "no_kd";
    case Ablation::kNoSeer: return "no_seer";
  }
  return "?";
}

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 256;
  double dropout = 0.1;
  int max_len = 128;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | files
  std::string train_src, train_tgt, valid_src, valid_tgt;
  int min_freq = 1;
  int max_vocab = 50000;
  std::string task = "lexicon";
  int n_train = 10000;
  int n_valid = 500;
  int vocab_size = 50;
  int gen_min_len = 5;
  int gen_max_len = 15;
  int batch_tokens = 96;
  int max_len = 128;
};

struct TrainConfig {
  int steps = 5000;
  std::uint64_t seed = 1;
  double lambda = 0.5;
  Mechanism mechanism = Mechanism::kKd;
  double alpha = 0.2;
  Ablation ablation = Ablation::kFull;
  int warmup_steps = 400;
  double lr_factor = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.0;
  int pretrain_steps = 0;  // l2 phase boundary
  double grl_scale = 1.0;
  int valid_every = 1000;
  int ckpt_every = 1000;
  int log_every = 50;
  int valid_bleu_sentences = 200;
};

struct EvalConfig {
  int beam_size = 4;
  double length_penalty = 0.6;
  double max_len_factor = 1.5;
  int max_len_margin = 5;
  int bins = 8;
};

struct IoConfig {
  std::string run_dir = "run";
};

/// Full run configuration. Every field has a default; parsing rejects
/// unknown keys; the hash is over the effective sorted key/value list and is
/// therefore stable under key reordering in the file.
struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  IoConfig io;

  std::vector<std::pair<std::string, std::string>> flatten() const;
  std::uint64_t hash() const;
  std::uint64_t semantic_hash() const;
  std::string hash_hex() const;
  void validate();

  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text,
                              const std::string& origin = "<config>");
  void write_file(const std::string& path) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

struct KvSetter {
  std::map<std::string, std::function<void(const std::string&, int)>> setters;

  static int to_int(const std::string& v, const std::string& key, int line) {
    try {
      std::size_t pos = 0;
      int x = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (...) {
      throw ConfigError("config error: field " + key + ", line " +
                        std::to_string(line) + ": not an integer: '" + v + "'");
    }
  }
  static double to_double(const std::string& v, const std::string& key, int line) {
    try {
      std::size_t pos = 0;
      double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (...) {
      throw ConfigError("config error: field " + key + ", line " +
                        std::to_string(line) + ": not a number: '" + v + "'");
    }
  }
  static std::uint64_t to_u64(const std::string& v, const std::string& key,
                              int line) {
    try {
      std::size_t pos = 0;
      unsigned long long x = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (...) {
      throw ConfigError("config error: field " + key + ", line " +
                        std::to_string(line) + ": not an unsigned integer: '" +
                        v + "'");
    }
  }

  void reg_int(const std::string& key, int* slot) {
    setters[key] = [slot, key](const std::string& v, int line) {
      *slot = to_int(v, key, line);
    };
  }
  void reg_double(const std::string& key, double* slot) {
    setters[key] = [slot, key](const std::string& v, int line) {
      *slot = to_double(v, key, line);
    };
  }
  void reg_u64(const std::string& key, std::uint64_t* slot) {
    setters[key] = [slot, key](const std::string& v, int line) {
      *slot = to_u64(v, key, line);
    };
  }
  void reg_string(const std::string& key, std::string* slot) {
    setters[key] = [slot](const std::string& v, int) { *slot = v; };
  }
  void reg_mechanism(const std::string& key, Mechanism* slot) {
    setters[key] = [slot, key](const std::string& v, int line) {
      if (v == "kd") *slot = Mechanism::kKd;
      else if (v == "l2") *slot = Mechanism::kL2;
      else if (v == "al") *slot = Mechanism::kAl;
      else if (v == "none") *slot = Mechanism::kNone;
      else
        throw ConfigError("config error: field " + key + ", line " +
                          std::to_string(line) +
                          ": expected kd|l2|al|none, got '" + v + "'");
    };
  }
  void reg_ablation(const std::string& key, Ablation* slot) {
    setters[key] = [slot, key](const std::string& v, int line) {
      if (v == "full") *slot = Ablation::kFull;
      else if (v == "no_future") *slot = Ablation::kNoFuture;
      else if (v == "no_past") *slot = Ablation::kNoPast;
      else if (v == "no_kd") *slot = Ablation::kNoKd;
      else if (v == "no_seer") *slot = Ablation::kNoSeer;
      else
        throw ConfigError(
            "config error: field " + key + ", line " + std::to_string(line) +
            ": expected full|no_future|no_past|no_kd|no_seer, got '" + v + "'");
    };
  }
};

inline KvSetter make_schema(RunConfig& c) {
  KvSetter s;
  s.reg_int("model.n_layers", &c.model.n_layers);
  s.reg_int("model.d_model", &c.model.d_model);
  s.reg_int("model.n_heads", &c.model.n_heads);
  s.reg_int("model.d_ffn", &c.model.d_ffn);
  s.reg_double("model.dropout", &c.model.dropout);
  s.reg_int("model.max_len", &c.model.max_len);

  s.reg_string("data.source", &c.data.source);
  s.reg_string("data.train_src", &c.data.train_src);
  s.reg_string("data.train_tgt", &c.data.train_tgt);
  s.reg_string("data.valid_src", &c.data.valid_src);
  s.reg_string("data.valid_tgt", &c.data.valid_tgt);
  s.reg_int("data.min_freq", &c.data.min_freq);
  s.reg_int("data.max_vocab", &c.data.max_vocab);
  s.reg_string("data.task", &c.data.task);
  s.reg_int("data.n_train", &c.data.n_train);
  s.reg_int("data.n_valid", &c.data.n_valid);
  s.reg_int("data.vocab_size", &c.data.vocab_size);
  s.reg_int("data.gen_min_len", &c.data.gen_min_len);
  s.reg_int("data.gen_max_len", &c.data.gen_max_len);
  s.reg_int("data.batch_tokens", &c.data.batch_tokens);
  s.reg_int("data.max_len", &c.data.max_len);

  s.reg_int("train.steps", &c.train.steps);
  s.reg_u64("train.seed", &c.train.seed);
  s.reg_double("train.lambda", &c.train.lambda);
  s.reg_mechanism("train.mechanism", &c.train.mechanism);
  s.reg_double("train.alpha", &c.train.alpha);
  s.reg_ablation("train.ablation", &c.train.ablation);
  s.reg_int("train.warmup_steps", &c.train.warmup_steps);
  s.reg_double("train.lr_factor", &c.train.lr_factor);
  s.reg_double("train.adam_beta1", &c.train.adam_beta1);
  s.reg_double("train.adam_beta2", &c.train.adam_beta2);
  s.reg_double("train.adam_eps", &c.train.adam_eps);
  s.reg_double("train.label_smoothing", &c.train.label_smoothing);
  s.reg_int("train.pretrain_steps", &c.train.pretrain_steps);
  s.reg_double("train.grl_scale", &c.train.grl_scale);
  s.reg_int("train.valid_every", &c.train.valid_every);
  s.reg_int("train.ckpt_every", &c.train.ckpt_every);
  s.reg_int("train.log_every", &c.train.log_every);
  s.reg_int("train.valid_bleu_sentences", &c.train.valid_bleu_sentences);

  s.reg_int("eval.beam_size", &c.eval.beam_size);
  s.reg_double("eval.length_penalty", &c.eval.length_penalty);
  s.reg_double("eval.max_len_factor", &c.eval.max_len_factor);
  s.reg_int("eval.max_len_margin", &c.eval.max_len_margin);
  s.reg_int("eval.bins", &c.eval.bins);

  s.reg_string("io.run_dir", &c.io.run_dir);
  return s;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> RunConfig::flatten()
    const {
  using detail::fmt_double;
  std::vector<std::pair<std::string, std::string>> kv;
  auto put = [&](const std::string& k, const std::string& v) {
    kv.emplace_back(k, v);
  };
  put("model.n_layers", std::to_string(model.n_layers));
  put("model.d_model", std::to_string(model.d_model));
  put("model.n_heads", std::to_string(model.n_heads));
  put("model.d_ffn", std::to_string(model.d_ffn));
  put("model.dropout", fmt_double(model.dropout));
  put("model.max_len", std::to_string(model.max_len));
  put("data.source", data.source);
  put("data.train_src", data.train_src);
  put("data.train_tgt", data.train_tgt);
  put("data.valid_src", data.valid_src);
  put("data.valid_tgt", data.valid_tgt);
  put("data.min_freq", std::to_string(data.min_freq));
  put("data.max_vocab", std::to_string(data.max_vocab));
  put("data.task", data.task);
  put("data.n_train", std::to_string(data.n_train));
  put("data.n_valid", std::to_string(data.n_valid));
  put("data.vocab_size", std::to_string(data.vocab_size));
  put("data.gen_min_len", std::to_string(data.gen_min_len));
  put("data.gen_max_len", std::to_string(data.gen_max_len));
  put("data.batch_tokens", std::to_string(data.batch_tokens));
  put("data.max_len", std::to_string(data.max_len));
  put("train.steps", std::to_string(train.steps));
  put("train.seed", std::to_string(train.seed));
  put("train.lambda", fmt_double(train.lambda));
  put("train.mechanism", to_string(train.mechanism));
  put("train.alpha", fmt_double(train.alpha));
  put("train.ablation", to_string(train.ablation));
  put("train.warmup_steps", std::to_string(train.warmup_steps));
  put("train.lr_factor", fmt_double(train.lr_factor));
  put("train.adam_beta1", fmt_double(train.adam_beta1));
  put("train.adam_beta2", fmt_double(train.adam_beta2));
  put("train.adam_eps", fmt_double(train.adam_eps));
  put("train.label_smoothing", fmt_double(train.label_smoothing));
  put("train.pretrain_steps", std::to_string(train.pretrain_steps));
  put("train.grl_scale", fmt_double(train.grl_scale));
  put("train.valid_every", std::to_string(train.valid_every));
  put("train.ckpt_every", std::to_string(train.ckpt_every));
  put("train.log_every", std::to_string(train.log_every));
  put("train.valid_bleu_sentences", std::to_string(train.valid_bleu_sentences));
  put("eval.beam_size", std::to_string(eval.beam_size));
  put("eval.length_penalty", fmt_double(eval.length_penalty));
  put("eval.max_len_factor", fmt_double(eval.max_len_factor));
  put("eval.max_len_margin", std::to_string(eval.max_len_margin));
  put("eval.bins", std::to_string(eval.bins));
  put("io.run_dir", io.run_dir);
  std::sort(kv.begin(), kv.end());
  return kv;
}

inline std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : flatten()) {
    h = detail::fnv1a64(k.data(), k.size(), h);
    h = detail::fnv1a64("=", 1, h);
    h = detail::fnv1a64(v.data(), v.size(), h);
    h = detail::fnv1a64("\n", 1, h);
  }
  return h;
}

/// Hash of everything that affects training semantics; the io section is
/// excluded so a checkpoint may be resumed into a different run directory.
inline std::uint64_t RunConfig::semantic_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : flatten()) {
    if (k.rfind("io.", 0) == 0) continue;
    h = detail::fnv1a64(k.data(), k.size(), h);
    h = detail::fnv1a64("=", 1, h);
    h = detail::fnv1a64(v.data(), v.size(), h);
    h = detail::fnv1a64("\n", 1, h);
  }
  return h;
}

inline std::string RunConfig::hash_hex() const {
  std::ostringstream out;
  out << std::hex << hash();
  return out.str();
}

inline void RunConfig::validate() {
  auto fail = [](const std::string& field, const std::string& reason) {
    throw ConfigError("config error: field " + field + ": " + reason);
  };
  if (model.n_layers < 1) fail("model.n_layers", "must be >= 1");
  if (model.d_model < 1) fail("model.d_model", "must be >= 1");
  if (model.n_heads < 1 || model.d_model % model.n_heads != 0)
    fail("model.n_heads", "d_model must be divisible by n_heads");
  if (model.dropout < 0 || model.dropout >= 1)
    fail("model.dropout", "must be in [0,1)");
  if (train.lambda < 0 || train.lambda > 1)
    fail("train.lambda", "must be in [0,1]");
  if (data.source != "synthetic" && data.source != "files")
    fail("data.source", "expected synthetic|files");
  if (data.task != "copy" && data.task != "reverse" && data.task != "lexicon")
    fail("data.task", "expected copy|reverse|lexicon");
  if (data.batch_tokens < data.max_len)
    fail("data.batch_tokens", "must be >= data.max_len");
  if (eval.beam_size < 1) fail("eval.beam_size", "must be >= 1");
  if (train.steps < 0) fail("train.steps", "must be >= 0");
  // no_kd and no_seer train without a transfer loss by definition
  if (train.ablation == Ablation::kNoKd || train.ablation == Ablation::kNoSeer)
    train.mechanism = Mechanism::kNone;
}

inline RunConfig RunConfig::parse_text(const std::string& text,
                                       const std::string& origin) {
  RunConfig cfg;
  auto schema = detail::make_schema(cfg);
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config error: " + origin + ", line " +
                          std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config error: " + origin + ", line " +
                        std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    std::string full = section.empty() ? key : section + "." + key;
    auto it = schema.setters.find(full);
    if (it == schema.setters.end())
      throw ConfigError("config error: field " + full + ", line " +
                        std::to_string(lineno) + ": unknown key");
    it->second(value, lineno);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config error: cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

inline void RunConfig::write_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("config error: cannot write " + path);
  std::string prev_section;
  for (const auto& [k, v] : flatten()) {
    std::string section = k.substr(0, k.find('.'));
    std::string key = k.substr(k.find('.') + 1);
    if (section != prev_section) {
      if (!prev_section.empty()) out << "\n";
      out << "[" << section << "]\n";
      prev_section = section;
    }
    out << key << " = " << v << "\n";
  }
}

}  // namespace seer
