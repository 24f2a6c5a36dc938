#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "mage/errors.hpp"

namespace mage {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// One node of the gradient graph. Nodes are created in program order and
// carry a monotonically increasing id, so sorting reachable nodes by id
// descending yields reverse topological order (inputs always precede outputs).
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  uint64_t id = 0;
  // Grad-requiring inputs; traversal edges of the graph. Value-only inputs
  // are captured inside backward_fn closures instead.
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const TensorNode&)> backward_fn;
};

namespace detail {
inline uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}
inline void ensure_grad(TensorNode& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}
}  // namespace detail

// Dense row-major tensor of 64-bit floats. Copying a Tensor copies the
// handle; the underlying node (and its data) is shared.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), 0.0);
  }

  static Tensor filled(Shape shape, double v) {
    auto n = std::make_shared<TensorNode>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  // Trainable leaf.
  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t size() const { return node_->value.size(); }
  int rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  int cols() const { return node_->shape.size() < 2 ? 1 : node_->shape[1]; }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }

  double item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  double operator()(int i) const { return node_->value[static_cast<size_t>(i)]; }
  double operator()(int i, int j) const {
    return node_->value[static_cast<size_t>(i) * node_->shape[1] + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("gradient not populated; call backward() first");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  void drop_grad() { node_->grad.clear(); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

  // Reverse-mode sweep from a scalar. Visits every reachable node exactly
  // once in reverse insertion order and accumulates additively, so fan-out
  // contributions sum.
  void backward() const;

 private:
  std::shared_ptr<TensorNode> node_;
};

inline void Tensor::backward() const {
  if (size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  // Collect reachable nodes (iterative DFS over grad edges).
  std::vector<std::shared_ptr<TensorNode>> reachable;
  std::unordered_set<const TensorNode*> seen;
  std::vector<std::shared_ptr<TensorNode>> stack{node_};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p);
    }
    reachable.push_back(std::move(n));
  }
  std::sort(reachable.begin(), reachable.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });
  for (auto& n : reachable) detail::ensure_grad(*n);
  node_->grad[0] += 1.0;
  for (const auto& n : reachable) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<TensorNode>> grad_parents,
                      std::function<void(const TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  if (!grad_parents.empty()) {
    n->requires_grad = true;
    n->parents = std::move(grad_parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

inline std::vector<std::shared_ptr<TensorNode>> grad_parents(
    std::initializer_list<const Tensor*> inputs) {
  std::vector<std::shared_ptr<TensorNode>> out;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) out.push_back(t->node());
  }
  return out;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a, &b}),
                         [an, bn](const TensorNode& self) {
                           if (an->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                           if (bn->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a, &b}),
                         [an, bn](const TensorNode& self) {
                           if (an->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                           if (bn->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a, &b}),
                         [an, bn](const TensorNode& self) {
                           if (an->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i] * bn->value[i];
                           if (bn->requires_grad)
                             for (size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i] * an->value[i];
                         });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a}),
                         [an, c](const TensorNode& self) {
                           for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
                         });
}

// [N x D] + [D], the usual bias add.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  detail::require_matrix(a, "add_rowvec");
  if (v.shape().size() != 1 || v.shape()[0] != a.shape()[1])
    throw DimensionError("add_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
  const size_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(a.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] + v.data()[j];
  auto an = a.node(), vn = v.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a, &v}),
                         [an, vn, n, d](const TensorNode& self) {
                           if (an->requires_grad)
                             for (size_t i = 0; i < n * d; ++i) an->grad[i] += self.grad[i];
                           if (vn->requires_grad)
                             for (size_t i = 0; i < n; ++i)
                               for (size_t j = 0; j < d; ++j) vn->grad[j] += self.grad[i * d + j];
                         });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a}),
                         [an](const TensorNode& self) {
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                             const double x = an->value[i];
                             const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                             const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                             an->grad[i] += self.grad[i] * (cdf + x * pdf);
                           }
                         });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node();
  return detail::make_op(std::move(shape), a.data(), detail::grad_parents({&a}),
                         [an](const TensorNode& self) {
                           for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                         });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const size_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(a.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out[j * n + i] = a.data()[i * d + j];
  auto an = a.node();
  return detail::make_op({a.shape()[1], a.shape()[0]}, std::move(out), detail::grad_parents({&a}),
                         [an, n, d](const TensorNode& self) {
                           for (size_t i = 0; i < n; ++i)
                             for (size_t j = 0; j < d; ++j) an->grad[i * d + j] += self.grad[j * n + i];
                         });
}

// Stack matrices with equal column counts on top of each other.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  for (const Tensor& p : parts) detail::require_matrix(p, "concat_rows");
  const int d = parts[0].shape()[1];
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.shape()[1] != d)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    total += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(total) * d);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

  std::vector<std::shared_ptr<TensorNode>> grad_ps;
  std::vector<std::pair<std::shared_ptr<TensorNode>, size_t>> spans;  // node, flat offset
  size_t offset = 0;
  for (const Tensor& p : parts) {
    if (p.requires_grad()) {
      grad_ps.push_back(p.node());
      spans.emplace_back(p.node(), offset);
    }
    offset += p.size();
  }
  return detail::make_op({total, d}, std::move(out), std::move(grad_ps),
                         [spans](const TensorNode& self) {
                           for (const auto& [node, off] : spans)
                             for (size_t i = 0; i < node->value.size(); ++i)
                               node->grad[i] += self.grad[off + i];
                         });
}

// Rows [r0, r1) of a matrix.
inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  detail::require_matrix(a, "slice_rows");
  if (r0 < 0 || r1 > a.shape()[0] || r0 >= r1)
    throw IndexError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                     ") invalid for " + shape_str(a.shape()));
  const size_t d = a.shape()[1];
  std::vector<double> out(a.data().begin() + r0 * d, a.data().begin() + r1 * d);
  auto an = a.node();
  return detail::make_op({r1 - r0, static_cast<int>(d)}, std::move(out), detail::grad_parents({&a}),
                         [an, r0, d](const TensorNode& self) {
                           for (size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[r0 * d + i] += self.grad[i];
                         });
}

// Column mean: [K x D] -> [D].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_matrix(a, "mean_rows");
  const size_t k = a.shape()[0], d = a.shape()[1];
  if (k == 0) throw ContractError("mean_rows: empty sequence");
  std::vector<double> out(d, 0.0);
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < d; ++j) out[j] += a.data()[i * d + j];
  for (size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(k);
  auto an = a.node();
  return detail::make_op({static_cast<int>(d)}, std::move(out), detail::grad_parents({&a}),
                         [an, k, d](const TensorNode& self) {
                           const double inv = 1.0 / static_cast<double>(k);
                           for (size_t i = 0; i < k; ++i)
                             for (size_t j = 0; j < d; ++j) an->grad[i * d + j] += self.grad[j] * inv;
                         });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return detail::make_op({1}, {s}, detail::grad_parents({&a}),
                         [an](const TensorNode& self) {
                           for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
                         });
}

// Gather rows of an embedding table: [V x D], ids of length L -> [L x D].
inline Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
  detail::require_matrix(table, "embed_rows");
  const int v = table.shape()[0];
  const size_t d = table.shape()[1];
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw IndexError("embed_rows: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside table " + shape_str(table.shape()));
  std::vector<double> out(ids.size() * d);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  auto tn = table.node();
  auto ids_copy = ids;
  return detail::make_op({static_cast<int>(ids.size()), static_cast<int>(d)}, std::move(out),
                         detail::grad_parents({&table}),
                         [tn, ids_copy, d](const TensorNode& self) {
                           for (size_t i = 0; i < ids_copy.size(); ++i)
                             for (size_t j = 0; j < d; ++j)
                               tn->grad[ids_copy[i] * d + j] += self.grad[i * d + j];
                         });
}

// ---------------------------------------------------------------------------
// Core numeric ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  std::vector<double> out(m * p, 0.0);
  for (size_t i = 0; i < m; ++i) {
    for (size_t q = 0; q < k; ++q) {
      const double aiq = a.data()[i * k + q];
      if (aiq == 0.0) continue;
      const double* brow = b.data().data() + q * p;
      double* orow = out.data() + i * p;
      for (size_t j = 0; j < p; ++j) orow[j] += aiq * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op({static_cast<int>(m), static_cast<int>(p)}, std::move(out),
                         detail::grad_parents({&a, &b}),
                         [an, bn, m, k, p](const TensorNode& self) {
                           if (an->requires_grad) {
                             // dA = G * B^T
                             for (size_t i = 0; i < m; ++i)
                               for (size_t q = 0; q < k; ++q) {
                                 double s = 0.0;
                                 const double* grow = self.grad.data() + i * p;
                                 const double* brow = bn->value.data() + q * p;
                                 for (size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
                                 an->grad[i * k + q] += s;
                               }
                           }
                           if (bn->requires_grad) {
                             // dB = A^T * G
                             for (size_t i = 0; i < m; ++i)
                               for (size_t q = 0; q < k; ++q) {
                                 const double aiq = an->value[i * k + q];
                                 if (aiq == 0.0) continue;
                                 const double* grow = self.grad.data() + i * p;
                                 double* brow = bn->grad.data() + q * p;
                                 for (size_t j = 0; j < p; ++j) brow[j] += aiq * grow[j];
                               }
                           }
                         });
}

// Softmax along the last axis, stabilized by max subtraction.
inline Tensor softmax(const Tensor& a) {
  if (a.shape().empty()) throw DimensionError("softmax: scalar input");
  const size_t d = a.shape().back();
  const size_t blocks = a.size() / d;
  std::vector<double> out(a.size());
  for (size_t b = 0; b < blocks; ++b) {
    const double* row = a.data().data() + b * d;
    double* orow = out.data() + b * d;
    double mx = row[0];
    for (size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (size_t j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (size_t j = 0; j < d; ++j) orow[j] /= denom;
  }
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), detail::grad_parents({&a}),
                         [an, d, blocks](const TensorNode& self) {
                           // ds = s * (g - <g, s>) per row
                           for (size_t b = 0; b < blocks; ++b) {
                             const double* s = self.value.data() + b * d;
                             const double* g = self.grad.data() + b * d;
                             double dot = 0.0;
                             for (size_t j = 0; j < d; ++j) dot += g[j] * s[j];
                             for (size_t j = 0; j < d; ++j) an->grad[b * d + j] += s[j] * (g[j] - dot);
                           }
                         });
}

// Row-wise normalization with population variance followed by a learnable
// affine. Constant rows collapse to beta thanks to eps.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const size_t n = x.shape()[0], d = x.shape()[1];
  if (gamma.shape() != Shape{static_cast<int>(d)} || beta.shape() != Shape{static_cast<int>(d)})
    throw DimensionError("layer_norm: affine params must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * d;
    double mean = 0.0;
    for (size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = istd;
    for (size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * istd;
      (*xhat)[i * d + j] = xh;
      out[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op(x.shape(), std::move(out), detail::grad_parents({&x, &gamma, &beta}),
                         [xn, gn, bn, xhat, inv_std, n, d](const TensorNode& self) {
                           for (size_t i = 0; i < n; ++i) {
                             const double* g = self.grad.data() + i * d;
                             const double* xh = xhat->data() + i * d;
                             if (gn->requires_grad || bn->requires_grad) {
                               for (size_t j = 0; j < d; ++j) {
                                 if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
                                 if (bn->requires_grad) bn->grad[j] += g[j];
                               }
                             }
                             if (xn->requires_grad) {
                               double sum_gg = 0.0, sum_ggx = 0.0;
                               for (size_t j = 0; j < d; ++j) {
                                 const double gg = g[j] * gn->value[j];
                                 sum_gg += gg;
                                 sum_ggx += gg * xh[j];
                               }
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (size_t j = 0; j < d; ++j) {
                                 const double gg = g[j] * gn->value[j];
                                 xn->grad[i * d + j] +=
                                     (*inv_std)[i] * (gg - inv_d * sum_gg - xh[j] * inv_d * sum_ggx);
                               }
                             }
                           }
                         });
}

// Valid (unpadded) 2-D cross-correlation. x: [C_in x H x W],
// kernels: [C_out x C_in x k x k], output [C_out x H' x W'].
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride) {
  if (x.shape().size() != 3)
    throw DimensionError("conv2d: input must be [C x H x W], got " + shape_str(x.shape()));
  if (kernels.shape().size() != 4)
    throw DimensionError("conv2d: kernels must be [C_out x C_in x k x k], got " +
                         shape_str(kernels.shape()));
  const int c_in = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int c_out = kernels.shape()[0], kc = kernels.shape()[1], kh = kernels.shape()[2],
            kw = kernels.shape()[3];
  if (kc != c_in)
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(kernels.shape()));
  if (kh != kw) throw DimensionError("conv2d: only square kernels supported, got " + shape_str(kernels.shape()));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (kh > h || kw > w)
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " +
                         shape_str(x.shape()));
  const int oh = (h - kh) / stride + 1;
  const int ow = (w - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(c_out) * oh * ow, 0.0);
  auto x_at = [&](int c, int i, int j) { return x.data()[(static_cast<size_t>(c) * h + i) * w + j]; };
  auto k_at = [&](int co, int ci, int u, int v) {
    return kernels.data()[((static_cast<size_t>(co) * c_in + ci) * kh + u) * kw + v];
  };
  for (int co = 0; co < c_out; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (int ci = 0; ci < c_in; ++ci)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) s += x_at(ci, oy * stride + u, ox * stride + v) * k_at(co, ci, u, v);
        out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = s;
      }
  auto xn = x.node(), kn = kernels.node();
  return detail::make_op({c_out, oh, ow}, std::move(out), detail::grad_parents({&x, &kernels}),
                         [xn, kn, c_in, c_out, h, w, kh, kw, oh, ow, stride](const TensorNode& self) {
                           auto g_at = [&](int co, int oy, int ox) {
                             return self.grad[(static_cast<size_t>(co) * oh + oy) * ow + ox];
                           };
                           for (int co = 0; co < c_out; ++co)
                             for (int oy = 0; oy < oh; ++oy)
                               for (int ox = 0; ox < ow; ++ox) {
                                 const double g = g_at(co, oy, ox);
                                 if (g == 0.0) continue;
                                 for (int ci = 0; ci < c_in; ++ci)
                                   for (int u = 0; u < kh; ++u)
                                     for (int v = 0; v < kw; ++v) {
                                       const size_t xi =
                                           (static_cast<size_t>(ci) * h + oy * stride + u) * w + ox * stride + v;
                                       const size_t ki =
                                           ((static_cast<size_t>(co) * c_in + ci) * kh + u) * kw + v;
                                       if (kn->requires_grad) kn->grad[ki] += g * xn->value[xi];
                                       if (xn->requires_grad) xn->grad[xi] += g * kn->value[ki];
                                     }
                               }
                         });
}

// Mean over positions of -log softmax(logits)[target]. logits: [L x V].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  detail::require_matrix(logits, "cross_entropy");
  const size_t l = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != l)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  for (size_t i = 0; i < l; ++i)
    if (targets[i] < 0 || targets[i] >= static_cast<int>(v))
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(v));
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  double loss = 0.0;
  for (size_t i = 0; i < l; ++i) {
    const double* row = logits.data().data() + i * v;
    double* prow = probs->data() + i * v;
    double mx = row[0];
    for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (size_t j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    for (size_t j = 0; j < v; ++j) prow[j] /= denom;
    loss += std::log(denom) + mx - row[targets[i]];
  }
  loss /= static_cast<double>(l);
  auto ln = logits.node();
  auto tgt = targets;
  return detail::make_op({1}, {loss}, detail::grad_parents({&logits}),
                         [ln, probs, tgt, l, v](const TensorNode& self) {
                           const double g = self.grad[0] / static_cast<double>(l);
                           for (size_t i = 0; i < l; ++i) {
                             for (size_t j = 0; j < v; ++j)
                               ln->grad[i * v + j] += g * (*probs)[i * v + j];
                             ln->grad[i * v + tgt[i]] -= g;
                           }
                         });
}

// Batch-mean of per-row squared L2 distance: (1/B) sum_i ||a_i - b_i||^2.
// Note the per-row sum is NOT divided by the feature dimension.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "mse");
  if (a.shape() != b.shape())
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const size_t rows = a.shape()[0];
  double loss = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double diff = a.data()[i] - b.data()[i];
    loss += diff * diff;
  }
  loss /= static_cast<double>(rows);
  auto an = a.node(), bn = b.node();
  return detail::make_op({1}, {loss}, detail::grad_parents({&a, &b}),
                         [an, bn, rows](const TensorNode& self) {
                           const double g = 2.0 * self.grad[0] / static_cast<double>(rows);
                           for (size_t i = 0; i < an->value.size(); ++i) {
                             const double diff = an->value[i] - bn->value[i];
                             if (an->requires_grad) an->grad[i] += g * diff;
                             if (bn->requires_grad) bn->grad[i] -= g * diff;
                           }
                         });
}

}  // namespace mage
