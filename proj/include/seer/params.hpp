#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "seer/rng.hpp"
#include "seer/tensor.hpp"

namespace seer {

enum class Init { kXavier, kEmbedding, kOnes, kZeros };

/// Named parameter collection. Names are stable dotted paths (they are the
/// checkpoint schema), and initialization is keyed on the name so the values
/// never depend on creation order.
template <typename Real>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : init_rng_(Rng(seed).stream("init")) {}

  Tensor<Real>& create(const std::string& name, std::vector<int> shape,
                       Init init) {
    if (params_.count(name))
      throw std::logic_error("parameter already exists: " + name);
    Tensor<Real> t(shape, Real(0), true);
    Rng rng = init_rng_.stream(name);
    switch (init) {
      case Init::kXavier: {
        // weights are stored [out x in]
        const double fan_out = shape.size() >= 1 ? shape[0] : 1;
        const double fan_in = shape.size() >= 2 ? shape[1] : 1;
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.value())
          v = static_cast<Real>(rng.uniform(-limit, limit));
        break;
      }
      case Init::kEmbedding: {
        const double std = 1.0 / std::sqrt(static_cast<double>(shape.back()));
        for (auto& v : t.value()) v = static_cast<Real>(rng.normal() * std);
        break;
      }
      case Init::kOnes:
        for (auto& v : t.value()) v = Real(1);
        break;
      case Init::kZeros:
        break;
    }
    auto [it, ok] = params_.emplace(name, std::move(t));
    return it->second;
  }

  Tensor<Real>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end())
      throw std::out_of_range("no such parameter: " + name);
    return it->second;
  }
  const Tensor<Real>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end())
      throw std::out_of_range("no such parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Tensor<Real>>& all() { return params_; }
  const std::map<std::string, Tensor<Real>>& all() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [k, t] : params_) t.zero_grad();
  }

  void set_requires_grad(bool v) {
    for (auto& [k, t] : params_) t.set_requires_grad(v);
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [k, t] : params_) n += t.numel();
    return n;
  }

 private:
  Rng init_rng_;
  std::map<std::string, Tensor<Real>> params_;
};

}  // namespace seer
