#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mage/rng.hpp"
#include "mage/tensor.hpp"

namespace mage {

// Central finite-difference verification of reverse-mode gradients.
// The loss builder must rebuild the graph from the current parameter values
// on every call; the checker perturbs parameter coordinates in place.

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  int points = 0;
  bool all_grads_nonzero = true;
};

inline double fd_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

// Checks d(loss)/d(param) at up to `points_per_tensor` random coordinates of
// each parameter tensor against (f(x+h) - f(x-h)) / 2h.
inline GradCheckReport check_gradients(const std::string& name,
                                       const std::function<Tensor()>& loss_fn,
                                       const std::vector<Tensor>& params, uint64_t seed,
                                       int points_per_tensor = 10, double h = 1e-5) {
  GradCheckReport report;
  report.name = name;
  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  CounterRng rng(derive_seed(seed, "gradcheck:" + name));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi];
    const size_t n = t.size();
    const int points = static_cast<int>(std::min<size_t>(points_per_tensor, n));
    bool tensor_has_nonzero = false;
    for (double g : analytic[pi])
      if (g != 0.0) tensor_has_nonzero = true;
    if (!tensor_has_nonzero) report.all_grads_nonzero = false;
    for (int k = 0; k < points; ++k) {
      const size_t idx = (n <= static_cast<size_t>(points_per_tensor))
                             ? static_cast<size_t>(k)
                             : static_cast<size_t>(rng.below(n));
      const double saved = t.data()[idx];
      t.data()[idx] = saved + h;
      const double f_plus = loss_fn().item();
      t.data()[idx] = saved - h;
      const double f_minus = loss_fn().item();
      t.data()[idx] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, fd_rel_err(analytic[pi][idx], numeric));
      ++report.points;
    }
  }
  return report;
}

// The standard suite of per-op checks used by both the test suite and the
// `grad-check` CLI command. Each entry perturbs every differentiable input
// of one op; losses contract through a fixed random weighting so transposed
// or misrouted gradients cannot cancel out.
inline std::vector<GradCheckReport> run_op_gradient_checks(uint64_t seed) {
  std::vector<GradCheckReport> reports;
  CounterRng rng(derive_seed(seed, "opcheck"));
  auto rand_vec = [&rng](size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
  };
  auto weighted_sum = [](const Tensor& t, const Tensor& w) { return sum_all(mul(t, w)); };

  {
    Tensor a = Tensor::param({3, 4}, rand_vec(12));
    Tensor b = Tensor::param({4, 2}, rand_vec(8));
    Tensor w = Tensor::from({3, 2}, rand_vec(6));
    auto loss = [&] { return weighted_sum(matmul(a, b), w); };
    reports.push_back(check_gradients("matmul", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({2, 5}, rand_vec(10));
    Tensor b = Tensor::param({2, 5}, rand_vec(10));
    Tensor w = Tensor::from({2, 5}, rand_vec(10));
    auto loss = [&] { return weighted_sum(add(a, b), w); };
    reports.push_back(check_gradients("add", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({2, 5}, rand_vec(10));
    Tensor b = Tensor::param({2, 5}, rand_vec(10));
    Tensor w = Tensor::from({2, 5}, rand_vec(10));
    auto loss = [&] { return weighted_sum(sub(a, b), w); };
    reports.push_back(check_gradients("sub", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({2, 5}, rand_vec(10));
    Tensor b = Tensor::param({2, 5}, rand_vec(10));
    Tensor w = Tensor::from({2, 5}, rand_vec(10));
    auto loss = [&] { return weighted_sum(mul(a, b), w); };
    reports.push_back(check_gradients("mul", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({3, 3}, rand_vec(9));
    Tensor w = Tensor::from({3, 3}, rand_vec(9));
    auto loss = [&] { return weighted_sum(scale(a, -2.5), w); };
    reports.push_back(check_gradients("scale", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({3, 4}, rand_vec(12));
    Tensor v = Tensor::param({4}, rand_vec(4));
    Tensor w = Tensor::from({3, 4}, rand_vec(12));
    auto loss = [&] { return weighted_sum(add_rowvec(a, v), w); };
    reports.push_back(check_gradients("add_rowvec", loss, {a, v}, seed));
  }
  {
    Tensor a = Tensor::param({2, 6}, rand_vec(12, -2.0, 2.0));
    Tensor w = Tensor::from({2, 6}, rand_vec(12));
    auto loss = [&] { return weighted_sum(gelu(a), w); };
    reports.push_back(check_gradients("gelu", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({3, 5}, rand_vec(15, -3.0, 3.0));
    Tensor w = Tensor::from({3, 5}, rand_vec(15));
    auto loss = [&] { return weighted_sum(softmax(a), w); };
    reports.push_back(check_gradients("softmax", loss, {a}, seed));
  }
  {
    Tensor x = Tensor::param({3, 6}, rand_vec(18, -2.0, 2.0));
    Tensor gamma = Tensor::param({6}, rand_vec(6, 0.5, 1.5));
    Tensor beta = Tensor::param({6}, rand_vec(6, -0.5, 0.5));
    Tensor w = Tensor::from({3, 6}, rand_vec(18));
    auto loss = [&] { return weighted_sum(layer_norm(x, gamma, beta), w); };
    reports.push_back(check_gradients("layer_norm", loss, {x, gamma, beta}, seed));
  }
  {
    Tensor x = Tensor::param({2, 5, 5}, rand_vec(50));
    Tensor k = Tensor::param({3, 2, 2, 2}, rand_vec(24));
    Tensor w = Tensor::from({3, 2, 2}, rand_vec(12));
    auto loss = [&] { return weighted_sum(conv2d(x, k, 2), w); };
    reports.push_back(check_gradients("conv2d", loss, {x, k}, seed));
  }
  {
    Tensor logits = Tensor::param({4, 6}, rand_vec(24, -2.0, 2.0));
    std::vector<int> targets = {1, 5, 0, 3};
    auto loss = [&] { return cross_entropy(logits, targets); };
    reports.push_back(check_gradients("cross_entropy", loss, {logits}, seed));
  }
  {
    Tensor a = Tensor::param({3, 4}, rand_vec(12));
    Tensor b = Tensor::param({3, 4}, rand_vec(12));
    auto loss = [&] { return mse(a, b); };
    reports.push_back(check_gradients("mse", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({4, 3}, rand_vec(12));
    Tensor w = Tensor::from({3, 4}, rand_vec(12));
    auto loss = [&] { return weighted_sum(transpose(a), w); };
    reports.push_back(check_gradients("transpose", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({2, 6}, rand_vec(12));
    Tensor w = Tensor::from({4, 3}, rand_vec(12));
    auto loss = [&] { return weighted_sum(reshape(a, {4, 3}), w); };
    reports.push_back(check_gradients("reshape", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({2, 3}, rand_vec(6));
    Tensor b = Tensor::param({1, 3}, rand_vec(3));
    Tensor w = Tensor::from({3, 3}, rand_vec(9));
    auto loss = [&] { return weighted_sum(concat_rows({a, b}), w); };
    reports.push_back(check_gradients("concat_rows", loss, {a, b}, seed));
  }
  {
    Tensor a = Tensor::param({5, 3}, rand_vec(15));
    Tensor w = Tensor::from({2, 3}, rand_vec(6));
    auto loss = [&] { return weighted_sum(slice_rows(a, 1, 3), w); };
    reports.push_back(check_gradients("slice_rows", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({4, 3}, rand_vec(12));
    Tensor w = Tensor::from({1, 3}, rand_vec(3));
    auto loss = [&] { return weighted_sum(reshape(mean_rows(a), {1, 3}), w); };
    reports.push_back(check_gradients("mean_rows", loss, {a}, seed));
  }
  {
    Tensor a = Tensor::param({3, 2}, rand_vec(6));
    auto loss = [&] { return sum_all(a); };
    reports.push_back(check_gradients("sum_all", loss, {a}, seed));
  }
  {
    Tensor table = Tensor::param({6, 4}, rand_vec(24));
    std::vector<int> ids = {2, 0, 2, 5};
    Tensor w = Tensor::from({4, 4}, rand_vec(16));
    auto loss = [&] { return weighted_sum(embed_rows(table, ids), w); };
    reports.push_back(check_gradients("embed_rows", loss, {table}, seed));
  }
  {
    // Fan-out: the same tensor feeds two branches whose grads must add.
    Tensor a = Tensor::param({2, 3}, rand_vec(6));
    Tensor w = Tensor::from({2, 3}, rand_vec(6));
    auto loss = [&] { return add(weighted_sum(mul(a, a), w), sum_all(scale(a, 0.5))); };
    reports.push_back(check_gradients("fan_out_reuse", loss, {a}, seed));
  }
  return reports;
}

}  // namespace mage
