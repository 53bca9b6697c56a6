#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "seer/config.hpp"
#include "seer/params.hpp"
#include "seer/vocab.hpp"

namespace seer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32");

/// Checkpoint = <prefix>.json manifest + <prefix>.bin payload.
/// The manifest records format version, config snapshot, both vocabularies,
/// a name/shape/offset table for model parameters and optimizer state, and
/// an FNV-1a 64 checksum of the payload. The payload is raw little-endian
/// 32-bit floats in manifest order.
struct Checkpoint {
  int format_version = 1;
  long long step = 0;
  RunConfig config;
  Vocabulary src_vocab, tgt_vocab;
  // name -> values, in float32 regardless of the compute precision
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> params;
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> opt_state;
  long long opt_step = 0;

  template <typename Real>
  void put_params(const ParamStore<Real>& store) {
    for (const auto& [name, t] : store.all()) {
      std::vector<float> vals(t.numel());
      for (std::size_t i = 0; i < vals.size(); ++i)
        vals[i] = static_cast<float>(t.value()[i]);
      params[name] = {t.shape(), std::move(vals)};
    }
  }

  template <typename Real>
  void load_into(ParamStore<Real>& store) const {
    for (const auto& [name, entry] : params) {
      Tensor<Real>& t = store.has(name)
                            ? store.get(name)
                            : store.create(name, entry.first, Init::kZeros);
      if (t.shape() != entry.first)
        throw DataError("checkpoint: shape mismatch for " + name);
      for (std::size_t i = 0; i < entry.second.size(); ++i)
        t.value()[i] = static_cast<Real>(entry.second[i]);
    }
  }

  void save(const std::string& prefix) const;
  static Checkpoint load(const std::string& prefix);

  bool has_seer() const { return params.count("seer.fusion.wp") != 0; }
};

inline void Checkpoint::save(const std::string& prefix) const {
  std::vector<float> payload;
  nlohmann::json param_table = nlohmann::json::array();
  nlohmann::json opt_table = nlohmann::json::array();
  auto emit = [&payload](nlohmann::json& table, const std::string& name,
                         const std::pair<std::vector<int>, std::vector<float>>& e) {
    table.push_back({{"name", name},
                     {"shape", e.first},
                     {"offset", payload.size()}});
    payload.insert(payload.end(), e.second.begin(), e.second.end());
  };
  for (const auto& [name, e] : params) emit(param_table, name, e);
  for (const auto& [name, e] : opt_state) emit(opt_table, name, e);

  const std::uint64_t checksum = detail::fnv1a64(
      payload.data(), payload.size() * sizeof(float));

  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : config.flatten()) cfg[k] = v;

  nlohmann::json manifest = {
      {"kind", "seer-checkpoint"},
      {"format_version", format_version},
      {"step", step},
      {"config", cfg},
      {"config_hash", config.hash_hex()},
      {"src_vocab", src_vocab.surface_tokens()},
      {"tgt_vocab", tgt_vocab.surface_tokens()},
      {"params", param_table},
      {"opt_state", opt_table},
      {"opt_step", opt_step},
      {"payload_floats", payload.size()},
      {"checksum", "fnv1a64:" + [&] {
         std::ostringstream h;
         h << std::hex << checksum;
         return h.str();
       }()}};

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw DataError("checkpoint: cannot write " + prefix + ".bin");
  bin.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  std::ofstream man(prefix + ".json");
  if (!man) throw DataError("checkpoint: cannot write " + prefix + ".json");
  man << manifest.dump(1) << "\n";
}

inline Checkpoint Checkpoint::load(const std::string& prefix) {
  std::ifstream man(prefix + ".json");
  if (!man) throw DataError("checkpoint: cannot read " + prefix + ".json");
  nlohmann::json manifest;
  try {
    man >> manifest;
  } catch (const std::exception& e) {
    throw DataError("checkpoint: bad manifest " + prefix + ".json: " + e.what());
  }
  if (manifest.value("kind", "") != "seer-checkpoint")
    throw DataError("checkpoint: " + prefix + ".json is not a seer checkpoint");

  Checkpoint ck;
  ck.format_version = manifest.at("format_version").get<int>();
  ck.step = manifest.at("step").get<long long>();
  ck.opt_step = manifest.value("opt_step", 0LL);

  std::string cfg_text;
  for (auto& [k, v] : manifest.at("config").items()) {
    std::size_t dot = k.find('.');
    cfg_text += "[" + k.substr(0, dot) + "]\n" + k.substr(dot + 1) + " = " +
                v.get<std::string>() + "\n";
  }
  ck.config = RunConfig::parse_text(cfg_text, prefix + ".json#config");

  ck.src_vocab = Vocabulary::from_surface_tokens(
      manifest.at("src_vocab").get<std::vector<std::string>>());
  ck.tgt_vocab = Vocabulary::from_surface_tokens(
      manifest.at("tgt_vocab").get<std::vector<std::string>>());

  const std::size_t total = manifest.at("payload_floats").get<std::size_t>();
  std::vector<float> payload(total);
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw DataError("checkpoint: cannot read " + prefix + ".bin");
  bin.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(total * sizeof(float)));
  if (static_cast<std::size_t>(bin.gcount()) != total * sizeof(float))
    throw DataError("checkpoint: truncated payload " + prefix + ".bin");

  const std::uint64_t checksum =
      detail::fnv1a64(payload.data(), payload.size() * sizeof(float));
  std::ostringstream want;
  want << "fnv1a64:" << std::hex << checksum;
  if (manifest.at("checksum").get<std::string>() != want.str())
    throw DataError("checkpoint: checksum mismatch in " + prefix + ".bin");

  auto read_table = [&](const nlohmann::json& table, auto& dest) {
    for (const auto& entry : table) {
      std::string name = entry.at("name").get<std::string>();
      std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
      std::size_t offset = entry.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (int d : shape) n *= static_cast<std::size_t>(d);
      if (offset + n > payload.size())
        throw DataError("checkpoint: entry " + name + " overruns payload");
      dest[name] = {shape, std::vector<float>(payload.begin() + offset,
                                              payload.begin() + offset + n)};
    }
  };
  read_table(manifest.at("params"), ck.params);
  read_table(manifest.at("opt_state"), ck.opt_state);
  return ck;
}

}  // namespace seer
