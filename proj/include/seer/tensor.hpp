#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "seer/mask.hpp"
#include "seer/rng.hpp"

namespace seer {

namespace detail {

template <typename Real>
struct Node {
  std::vector<int> shape;
  std::vector<Real> val;
  std::vector<Real> grad;  // lazily allocated; leaves accumulate across passes
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> back;

  std::size_t numel() const { return val.size(); }
  bool leaf() const { return parents.empty(); }
};

// Raw row-major GEMM kernels, also used by backward closures.
// Loop orders keep the innermost stride at 1 so the compiler vectorizes.

template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, Real(0));
  for (int i = 0; i < m; ++i) {
    Real* ci = c + static_cast<std::size_t>(i) * n;
    const Real* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const Real aip = ai[p];
      const Real* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, int m, int k, int n,
             bool accumulate) {
  // c[m x n] (+)= a[m x k] * b[n x k]^T
  for (int i = 0; i < m; ++i) {
    const Real* ai = a + static_cast<std::size_t>(i) * k;
    Real* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* bj = b + static_cast<std::size_t>(j) * k;
      Real s = 0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, int m, int k, int n,
             bool accumulate) {
  // c[k x n] (+)= a[m x k]^T * b[m x n]
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(k) * n, Real(0));
  for (int p = 0; p < m; ++p) {
    const Real* ap = a + static_cast<std::size_t>(p) * k;
    const Real* bp = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      const Real api = ap[i];
      Real* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace detail

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major tensor with reverse-mode autodiff. A Tensor is a cheap
/// handle; ops record tape nodes whenever an input has requires_grad set.
template <typename Real>
class Tensor {
 public:
  using NodeT = detail::Node<Real>;

  Tensor() : n_(std::make_shared<NodeT>()) {}

  explicit Tensor(std::shared_ptr<NodeT> n) : n_(std::move(n)) {}

  Tensor(std::vector<int> shape, Real fill = 0, bool requires_grad = false)
      : n_(std::make_shared<NodeT>()) {
    n_->shape = std::move(shape);
    n_->val.assign(numel_of(n_->shape), fill);
    n_->requires_grad = requires_grad;
  }

  Tensor(std::vector<int> shape, std::vector<Real> data,
         bool requires_grad = false)
      : n_(std::make_shared<NodeT>()) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    n_->shape = std::move(shape);
    n_->val = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = shape.empty() ? 0 : 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  const std::vector<int>& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->val.size(); }
  int rows() const { return n_->shape.empty() ? 0 : n_->shape[0]; }
  int cols() const {
    if (n_->shape.size() == 1) return n_->shape[0];
    return n_->shape.size() >= 2 ? n_->shape[1] : 0;
  }

  std::vector<Real>& value() { return n_->val; }
  const std::vector<Real>& value() const { return n_->val; }
  Real& at(int r, int c) { return n_->val[static_cast<std::size_t>(r) * cols() + c]; }
  Real at(int r, int c) const { return n_->val[static_cast<std::size_t>(r) * cols() + c]; }

  Real item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return n_->val[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  /// Gradient buffer; zeros if backward never reached this tensor.
  std::vector<Real> grad() const {
    if (n_->grad.empty()) return std::vector<Real>(numel(), Real(0));
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  bool all_finite() const {
    for (Real v : n_->val)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<NodeT> node() const { return n_; }

 private:
  std::shared_ptr<NodeT> n_;
};

namespace detail {

template <typename Real>
Tensor<Real> make_op(std::vector<int> shape,
                     std::vector<std::shared_ptr<Node<Real>>> parents,
                     std::function<void(Node<Real>&)> back) {
  Tensor<Real> out(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (rg) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->back = std::move(back);
  }
  return out;
}

template <typename Real>
void accumulate(Node<Real>& parent, const Real* g, std::size_t n) {
  if (!parent.requires_grad) return;
  if (parent.grad.empty()) parent.grad.assign(parent.numel(), Real(0));
  for (std::size_t i = 0; i < n; ++i) parent.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// kernels

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  auto out = detail::make_op<Real>(
      {m, n}, {a.node(), b.node()}, [m, k, n](detail::Node<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          if (pa.grad.empty()) pa.grad.assign(pa.numel(), Real(0));
          detail::gemm_nt(self.grad.data(), pb.val.data(), pa.grad.data(), m, n, k, true);
        }
        if (pb.requires_grad) {
          if (pb.grad.empty()) pb.grad.assign(pb.numel(), Real(0));
          detail::gemm_tn(pa.val.data(), self.grad.data(), pb.grad.data(), m, k, n, true);
        }
      });
  detail::gemm_nn(a.value().data(), b.value().data(), out.value().data(), m, k, n, false);
  return out;
}

/// a * b^T; the usual form for weight matrices stored as [out x in].
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.rows();
  auto out = detail::make_op<Real>(
      {m, n}, {a.node(), b.node()}, [m, k, n](detail::Node<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          if (pa.grad.empty()) pa.grad.assign(pa.numel(), Real(0));
          detail::gemm_nn(self.grad.data(), pb.val.data(), pa.grad.data(), m, n, k, true);
        }
        if (pb.requires_grad) {
          if (pb.grad.empty()) pb.grad.assign(pb.numel(), Real(0));
          detail::gemm_tn(self.grad.data(), pa.val.data(), pb.grad.data(), m, n, k, true);
        }
      });
  detail::gemm_nt(a.value().data(), b.value().data(), out.value().data(), m, k, n, false);
  return out;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  auto out = detail::make_op<Real>(
      a.shape(), {a.node(), b.node()}, [](detail::Node<Real>& self) {
        detail::accumulate(*self.parents[0], self.grad.data(), self.grad.size());
        detail::accumulate(*self.parents[1], self.grad.data(), self.grad.size());
      });
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] + b.value()[i];
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  auto out = detail::make_op<Real>(
      a.shape(), {a.node(), b.node()}, [](detail::Node<Real>& self) {
        detail::accumulate(*self.parents[0], self.grad.data(), self.grad.size());
        auto& pb = *self.parents[1];
        if (pb.requires_grad) {
          if (pb.grad.empty()) pb.grad.assign(pb.numel(), Real(0));
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] -= self.grad[i];
        }
      });
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] - b.value()[i];
  return out;
}

/// Adds a length-C vector to every row of an R x C matrix.
template <typename Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& v) {
  if (x.shape().size() != 2 || static_cast<int>(v.numel()) != x.cols())
    throw std::invalid_argument("add_rowvec: shape mismatch " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  const int r = x.rows(), c = x.cols();
  auto out = detail::make_op<Real>(
      x.shape(), {x.node(), v.node()}, [r, c](detail::Node<Real>& self) {
        detail::accumulate(*self.parents[0], self.grad.data(), self.grad.size());
        auto& pv = *self.parents[1];
        if (pv.requires_grad) {
          if (pv.grad.empty()) pv.grad.assign(pv.numel(), Real(0));
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
              pv.grad[j] += self.grad[static_cast<std::size_t>(i) * c + j];
        }
      });
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.value()[static_cast<std::size_t>(i) * c + j] =
          x.value()[static_cast<std::size_t>(i) * c + j] + v.value()[j];
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          p.grad[i] += c * self.grad[i];
      });
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] = c * x.value()[i];
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  auto out = detail::make_op<Real>(
      a.shape(), {a.node(), b.node()}, [](detail::Node<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          if (pa.grad.empty()) pa.grad.assign(pa.numel(), Real(0));
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.val[i];
        }
        if (pb.requires_grad) {
          if (pb.grad.empty()) pb.grad.assign(pb.numel(), Real(0));
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.val[i];
        }
      });
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  return out;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (p.val[i] > Real(0)) p.grad[i] += self.grad[i];
      });
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = x.value()[i] > Real(0) ? x.value()[i] : Real(0);
  return out;
}

/// Row-wise softmax with forbidden positions pinned to probability zero.
/// A fully forbidden row yields all zeros (and zero gradient) by contract.
/// Pass an empty mask for plain softmax.
template <typename Real>
Tensor<Real> masked_softmax(const Tensor<Real>& x, const Mask& mask = Mask()) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("masked_softmax: need rank-2, got " +
                                shape_str(x.shape()));
  const int r = x.rows(), c = x.cols();
  if (!mask.empty() && (mask.rows() != r || mask.cols() != c))
    throw std::invalid_argument("masked_softmax: mask " +
                                shape_str({mask.rows(), mask.cols()}) +
                                " vs logits " + shape_str(x.shape()));
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [r, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int i = 0; i < r; ++i) {
          const Real* y = self.val.data() + static_cast<std::size_t>(i) * c;
          const Real* g = self.grad.data() + static_cast<std::size_t>(i) * c;
          Real* gx = p.grad.data() + static_cast<std::size_t>(i) * c;
          Real dot = 0;
          for (int j = 0; j < c; ++j) dot += y[j] * g[j];
          for (int j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
        }
      });
  for (int i = 0; i < r; ++i) {
    const Real* xi = x.value().data() + static_cast<std::size_t>(i) * c;
    Real* yi = out.value().data() + static_cast<std::size_t>(i) * c;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < c; ++j)
      if (mask.empty() || !mask.forbidden(i, j)) mx = std::max(mx, xi[j]);
    if (mx == -std::numeric_limits<Real>::infinity()) {
      for (int j = 0; j < c; ++j) yi[j] = 0;
      continue;
    }
    Real z = 0;
    for (int j = 0; j < c; ++j) {
      if (mask.empty() || !mask.forbidden(i, j)) {
        yi[j] = std::exp(xi[j] - mx);
        z += yi[j];
      } else {
        yi[j] = 0;
      }
    }
    for (int j = 0; j < c; ++j) yi[j] /= z;
  }
  return out;
}

template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("log_softmax: need rank-2, got " +
                                shape_str(x.shape()));
  const int r = x.rows(), c = x.cols();
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [r, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int i = 0; i < r; ++i) {
          const Real* y = self.val.data() + static_cast<std::size_t>(i) * c;
          const Real* g = self.grad.data() + static_cast<std::size_t>(i) * c;
          Real* gx = p.grad.data() + static_cast<std::size_t>(i) * c;
          Real gsum = 0;
          for (int j = 0; j < c; ++j) gsum += g[j];
          for (int j = 0; j < c; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
        }
      });
  for (int i = 0; i < r; ++i) {
    const Real* xi = x.value().data() + static_cast<std::size_t>(i) * c;
    Real* yi = out.value().data() + static_cast<std::size_t>(i) * c;
    Real mx = *std::max_element(xi, xi + c);
    Real z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    const Real lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) yi[j] = xi[j] - lse;
  }
  return out;
}

/// Per-row normalization to zero mean / unit variance, then affine.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps = Real(1e-5)) {
  if (x.shape().size() != 2 || static_cast<int>(gain.numel()) != x.cols() ||
      static_cast<int>(bias.numel()) != x.cols())
    throw std::invalid_argument("layer_norm: shape mismatch " +
                                shape_str(x.shape()));
  if (!(eps > Real(0))) throw std::invalid_argument("layer_norm: eps must be > 0");
  const int r = x.rows(), c = x.cols();
  auto out = detail::make_op<Real>(
      x.shape(), {x.node(), gain.node(), bias.node()},
      [r, c, eps](detail::Node<Real>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad && px.grad.empty()) px.grad.assign(px.numel(), Real(0));
        if (pg.requires_grad && pg.grad.empty()) pg.grad.assign(pg.numel(), Real(0));
        if (pb.requires_grad && pb.grad.empty()) pb.grad.assign(pb.numel(), Real(0));
        std::vector<Real> xhat(c), gg(c);
        for (int i = 0; i < r; ++i) {
          const Real* xi = px.val.data() + static_cast<std::size_t>(i) * c;
          const Real* g = self.grad.data() + static_cast<std::size_t>(i) * c;
          Real mean = 0, var = 0;
          for (int j = 0; j < c; ++j) mean += xi[j];
          mean /= c;
          for (int j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
          var /= c;
          const Real inv = Real(1) / std::sqrt(var + eps);
          for (int j = 0; j < c; ++j) xhat[j] = (xi[j] - mean) * inv;
          if (pg.requires_grad)
            for (int j = 0; j < c; ++j) pg.grad[j] += g[j] * xhat[j];
          if (pb.requires_grad)
            for (int j = 0; j < c; ++j) pb.grad[j] += g[j];
          if (px.requires_grad) {
            Real m1 = 0, m2 = 0;
            for (int j = 0; j < c; ++j) {
              gg[j] = g[j] * pg.val[j];
              m1 += gg[j];
              m2 += gg[j] * xhat[j];
            }
            m1 /= c;
            m2 /= c;
            Real* gx = px.grad.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j)
              gx[j] += inv * (gg[j] - m1 - xhat[j] * m2);
          }
        }
      });
  for (int i = 0; i < r; ++i) {
    const Real* xi = x.value().data() + static_cast<std::size_t>(i) * c;
    Real* yi = out.value().data() + static_cast<std::size_t>(i) * c;
    Real mean = 0, var = 0;
    for (int j = 0; j < c; ++j) mean += xi[j];
    mean /= c;
    for (int j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= c;
    const Real inv = Real(1) / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j)
      yi[j] = (xi[j] - mean) * inv * gain.value()[j] + bias.value()[j];
  }
  return out;
}

/// Row lookup: out[i] = table[ids[i]].
template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::vector<int> ids) {
  if (table.shape().size() != 2)
    throw std::invalid_argument("embedding: table must be rank-2");
  const int d = table.cols();
  const int t = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range [0," +
                                  std::to_string(table.rows()) + ")");
  auto out = detail::make_op<Real>(
      {t, d}, {table.node()}, [ids, d](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const Real* g = self.grad.data() + i * d;
          Real* gp = p.grad.data() + static_cast<std::size_t>(ids[i]) * d;
          for (int j = 0; j < d; ++j) gp[j] += g[j];
        }
      });
  for (int i = 0; i < t; ++i)
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.value().data() + static_cast<std::size_t>(i) * d);
  return out;
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int c = parts[0].cols();
  int r = 0;
  std::vector<std::shared_ptr<detail::Node<Real>>> parents;
  std::vector<int> row_of;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.cols() != c)
      throw std::invalid_argument("concat_rows: column mismatch");
    row_of.push_back(r);
    r += p.rows();
    parents.push_back(p.node());
  }
  auto out = detail::make_op<Real>(
      {r, c}, std::move(parents), [row_of, c](detail::Node<Real>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          detail::accumulate(p,
                             self.grad.data() +
                                 static_cast<std::size_t>(row_of[k]) * c,
                             p.numel());
        }
      });
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::copy(parts[k].value().begin(), parts[k].value().end(),
              out.value().begin() + static_cast<std::size_t>(row_of[k]) * c);
  return out;
}

template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int r = parts[0].rows();
  int c = 0;
  std::vector<std::shared_ptr<detail::Node<Real>>> parents;
  std::vector<int> col_of, widths;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    col_of.push_back(c);
    widths.push_back(p.cols());
    c += p.cols();
    parents.push_back(p.node());
  }
  auto out = detail::make_op<Real>(
      {r, c}, std::move(parents), [col_of, widths, r, c](detail::Node<Real>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad) continue;
          if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
          const int w = widths[k];
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
              p.grad[static_cast<std::size_t>(i) * w + j] +=
                  self.grad[static_cast<std::size_t>(i) * c + col_of[k] + j];
        }
      });
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    for (int i = 0; i < r; ++i)
      std::copy_n(parts[k].value().data() + static_cast<std::size_t>(i) * w, w,
                  out.value().data() + static_cast<std::size_t>(i) * c + col_of[k]);
  }
  return out;
}

template <typename Real>
Tensor<Real> reverse_rows(const Tensor<Real>& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("reverse_rows: need rank-2");
  const int r = x.rows(), c = x.cols();
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [r, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int i = 0; i < r; ++i) {
          const Real* g = self.grad.data() + static_cast<std::size_t>(i) * c;
          Real* gp = p.grad.data() + static_cast<std::size_t>(r - 1 - i) * c;
          for (int j = 0; j < c; ++j) gp[j] += g[j];
        }
      });
  for (int i = 0; i < r; ++i)
    std::copy_n(x.value().data() + static_cast<std::size_t>(i) * c, c,
                out.value().data() + static_cast<std::size_t>(r - 1 - i) * c);
  return out;
}

/// Rows [r0, r1) of x.
template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, int r0, int r1) {
  if (x.shape().size() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) +
                                "," + std::to_string(r1) + ") of " +
                                shape_str(x.shape()));
  const int c = x.cols(), n = r1 - r0;
  auto out = detail::make_op<Real>(
      {n, c}, {x.node()}, [r0, n, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < c; ++j)
            p.grad[static_cast<std::size_t>(r0 + i) * c + j] +=
                self.grad[static_cast<std::size_t>(i) * c + j];
      });
  std::copy_n(x.value().data() + static_cast<std::size_t>(r0) * c,
              static_cast<std::size_t>(n) * c, out.value().data());
  return out;
}

/// Columns [c0, c1) of x.
template <typename Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, int c0, int c1) {
  if (x.shape().size() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  const int r = x.rows(), c = x.cols(), w = c1 - c0;
  auto out = detail::make_op<Real>(
      {r, w}, {x.node()}, [r, c, c0, w](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            p.grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                self.grad[static_cast<std::size_t>(i) * w + j];
      });
  for (int i = 0; i < r; ++i)
    std::copy_n(x.value().data() + static_cast<std::size_t>(i) * c + c0, w,
                out.value().data() + static_cast<std::size_t>(i) * w);
  return out;
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  auto out = detail::make_op<Real>(
      {1}, {x.node()}, [](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < p.grad.size(); ++i)
          p.grad[i] += self.grad[0];
      });
  Real s = 0;
  for (Real v : x.value()) s += v;
  out.value()[0] = s;
  return out;
}

/// Summed cross-entropy of logits rows against target ids; optional uniform
/// label smoothing. The smoothed target puts 1-ls+ls/V on the gold id.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::vector<int> ids,
                           Real label_smoothing = 0) {
  if (logits.shape().size() != 2 ||
      static_cast<int>(ids.size()) != logits.rows())
    throw std::invalid_argument("cross_entropy: " + shape_str(logits.shape()) +
                                " vs " + std::to_string(ids.size()) + " ids");
  const int r = logits.rows(), v = logits.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("cross_entropy: id out of range");
  const Real ls = label_smoothing;
  auto out = detail::make_op<Real>(
      {1}, {logits.node()}, [ids, r, v, ls](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        const Real g = self.grad[0];
        std::vector<Real> sm(v);
        for (int i = 0; i < r; ++i) {
          const Real* z = p.val.data() + static_cast<std::size_t>(i) * v;
          Real mx = *std::max_element(z, z + v);
          Real sum = 0;
          for (int j = 0; j < v; ++j) {
            sm[j] = std::exp(z[j] - mx);
            sum += sm[j];
          }
          Real* gz = p.grad.data() + static_cast<std::size_t>(i) * v;
          const Real off = ls / v;
          for (int j = 0; j < v; ++j) {
            Real q = off + (j == ids[i] ? Real(1) - ls : Real(0));
            gz[j] += g * (sm[j] / sum - q);
          }
        }
      });
  Real total = 0;
  for (int i = 0; i < r; ++i) {
    const Real* z = logits.value().data() + static_cast<std::size_t>(i) * v;
    Real mx = *std::max_element(z, z + v);
    Real sum = 0;
    for (int j = 0; j < v; ++j) sum += std::exp(z[j] - mx);
    const Real lse = mx + std::log(sum);
    Real target_logit = (Real(1) - ls) * z[ids[i]];
    if (ls > Real(0)) {
      Real zsum = 0;
      for (int j = 0; j < v; ++j) zsum += z[j];
      target_logit += ls / v * zsum;
    }
    total += lse - target_logit;
  }
  out.value()[0] = total;
  return out;
}

/// Sum over rows of the Euclidean norm of each row (not squared).
template <typename Real>
Tensor<Real> l2norm_rows_sum(const Tensor<Real>& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("l2norm_rows_sum: need rank-2");
  const int r = x.rows(), c = x.cols();
  auto out = detail::make_op<Real>(
      {1}, {x.node()}, [r, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        const Real g = self.grad[0];
        for (int i = 0; i < r; ++i) {
          const Real* xi = p.val.data() + static_cast<std::size_t>(i) * c;
          Real nrm = 0;
          for (int j = 0; j < c; ++j) nrm += xi[j] * xi[j];
          nrm = std::sqrt(nrm);
          if (nrm <= Real(0)) continue;  // subgradient 0 at the origin
          Real* gx = p.grad.data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) gx[j] += g * xi[j] / nrm;
        }
      });
  Real total = 0;
  for (int i = 0; i < r; ++i) {
    const Real* xi = x.value().data() + static_cast<std::size_t>(i) * c;
    Real nrm = 0;
    for (int j = 0; j < c; ++j) nrm += xi[j] * xi[j];
    total += std::sqrt(nrm);
  }
  out.value()[0] = total;
  return out;
}

/// Identity in the forward pass; multiplies the incoming gradient by -scale.
template <typename Real>
Tensor<Real> grad_reversal(const Tensor<Real>& x, Real scale) {
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [scale](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          p.grad[i] -= scale * self.grad[i];
      });
  out.value() = x.value();
  return out;
}

/// Copies values and cuts the tape: the stop-gradient boundary.
template <typename Real>
Tensor<Real> detach(const Tensor<Real>& x) {
  return Tensor<Real>(x.shape(), x.value());
}

/// Identity whose backward is suppressed while *open is false.
template <typename Real>
Tensor<Real> grad_gate(const Tensor<Real>& x, std::shared_ptr<const bool> open) {
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [open](detail::Node<Real>& self) {
        if (!*open) return;
        detail::accumulate(*self.parents[0], self.grad.data(), self.grad.size());
      });
  out.value() = x.value();
  return out;
}

/// Inverted dropout; scales survivors by 1/(1-rate). rate == 0 is identity.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real rate, Rng& rng) {
  if (rate <= Real(0)) return x;
  if (rate >= Real(1)) throw std::invalid_argument("dropout: rate must be < 1");
  std::vector<Real> keep(x.numel());
  const Real inv = Real(1) / (Real(1) - rate);
  for (std::size_t i = 0; i < keep.size(); ++i)
    keep[i] = rng.uniform() < static_cast<double>(rate) ? Real(0) : inv;
  auto out = detail::make_op<Real>(
      x.shape(), {x.node()}, [keep](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          p.grad[i] += self.grad[i] * keep[i];
      });
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = x.value()[i] * keep[i];
  return out;
}

/// Binary cross-entropy on a scalar logit, numerically stable.
template <typename Real>
Tensor<Real> bce_with_logit(const Tensor<Real>& z, Real target) {
  if (z.numel() != 1) throw std::invalid_argument("bce_with_logit: need scalar");
  auto out = detail::make_op<Real>(
      {1}, {z.node()}, [target](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        const Real x = p.val[0];
        const Real sig = Real(1) / (Real(1) + std::exp(-x));
        p.grad[0] += self.grad[0] * (sig - target);
      });
  const Real x = z.value()[0];
  out.value()[0] = std::max(x, Real(0)) - x * target +
                   std::log1p(std::exp(-std::abs(x)));
  return out;
}

/// Column-wise max over rows: R x C -> 1 x C (max-over-time pooling).
template <typename Real>
Tensor<Real> max_over_rows(const Tensor<Real>& x) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("max_over_rows: need rank-2");
  const int r = x.rows(), c = x.cols();
  std::vector<int> arg(c, 0);
  for (int j = 0; j < c; ++j) {
    Real best = x.value()[j];
    for (int i = 1; i < r; ++i) {
      Real v = x.value()[static_cast<std::size_t>(i) * c + j];
      if (v > best) {
        best = v;
        arg[j] = i;
      }
    }
  }
  auto out = detail::make_op<Real>(
      {1, c}, {x.node()}, [arg, c](detail::Node<Real>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.empty()) p.grad.assign(p.numel(), Real(0));
        for (int j = 0; j < c; ++j)
          p.grad[static_cast<std::size_t>(arg[j]) * c + j] += self.grad[j];
      });
  for (int j = 0; j < c; ++j)
    out.value()[j] = x.value()[static_cast<std::size_t>(arg[j]) * c + j];
  return out;
}

// ---------------------------------------------------------------------------
// backward

/// Reverse-mode sweep from a scalar loss. Gradients of leaf tensors
/// accumulate across calls (two-phase objectives rely on this); gradients of
/// interior nodes are rebuilt per call.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  using NodeT = detail::Node<Real>;
  if (!loss.node()->requires_grad) return;

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<NodeT*> topo;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT* parent = node->parents[idx].get();
      ++idx;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* n : topo) {
    if (!n->leaf())
      n->grad.assign(n->numel(), Real(0));
    else if (n->grad.empty())
      n->grad.assign(n->numel(), Real(0));
  }
  loss.node()->grad[0] = Real(1);

  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->back) (*it)->back(**it);
}

}  // namespace seer
