#pragma once

#include <functional>
#include <string>
#include <vector>

#include "seer/rng.hpp"
#include "seer/tensor.hpp"

namespace seer {

template <typename Real>
struct GradCheckReport {
  Real max_rel_err = 0;
  std::string worst;  // "param 2, coord 17: analytic=..., numeric=..."
};

/// Compares reverse-mode gradients of a scalar-valued program against central
/// finite differences. The program must be deterministic (dropout disabled).
/// Checks every coordinate unless max_coords_per_tensor caps it, in which
/// case coordinates are sampled with the supplied rng.
template <typename Real>
GradCheckReport<Real> grad_check(const std::function<Tensor<Real>()>& fn,
                                 const std::vector<Tensor<Real>>& params,
                                 Real h, int max_coords_per_tensor = -1,
                                 Rng* rng = nullptr) {
  for (auto p : params) p.zero_grad();
  Tensor<Real> loss = fn();
  backward(loss);

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckReport<Real> report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<Real> p = params[pi];
    std::vector<std::size_t> coords;
    const std::size_t n = p.numel();
    if (max_coords_per_tensor < 0 ||
        n <= static_cast<std::size_t>(max_coords_per_tensor)) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      Rng fallback(12345);
      Rng& r = rng ? *rng : fallback;
      for (int i = 0; i < max_coords_per_tensor; ++i)
        coords.push_back(static_cast<std::size_t>(r.below(n)));
    }
    for (std::size_t ci : coords) {
      const Real saved = p.value()[ci];
      p.value()[ci] = saved + h;
      const Real up = fn().item();
      p.value()[ci] = saved - h;
      const Real down = fn().item();
      p.value()[ci] = saved;
      const Real numeric = (up - down) / (2 * h);
      const Real rel = std::abs(analytic[pi][ci] - numeric) /
                       (std::abs(numeric) + Real(1e-8));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "param " + std::to_string(pi) + ", coord " +
                       std::to_string(ci) +
                       ": analytic=" + std::to_string(analytic[pi][ci]) +
                       ", numeric=" + std::to_string(numeric);
      }
    }
  }
  return report;
}

}  // namespace seer
