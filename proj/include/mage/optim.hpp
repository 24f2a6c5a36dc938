#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mage/errors.hpp"
#include "mage/tensor.hpp"

namespace mage {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected first/second moment state for one parameter tensor.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

// In-place Adam update for a single tensor. `step` is the 1-based global
// step count after this update (used for bias correction).
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamSlot& slot,
                      int64_t step, const AdamConfig& cfg) {
  if (params.size() != grads.size())
    throw ContractError("adam_step: param/grad length mismatch");
  if (slot.m.empty()) {
    slot.m.assign(params.size(), 0.0);
    slot.v.assign(params.size(), 0.0);
  }
  if (slot.m.size() != params.size())
    throw ContractError("adam_step: state length mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t i = 0; i < params.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grads[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Optimizer over a fixed list of parameter tensors. The tensor list and its
// order must not change over the optimizer's lifetime; state is keyed by
// position so checkpoints can serialize it by parameter name.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<Tensor>& params) {
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size())
      throw ContractError("Adam: parameter list size changed");
    ++step_count_;
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor t = params[i];
      adam_step(t.data(), t.grad(), slots_[i], step_count_, cfg_);
    }
  }

  int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t s) { step_count_ = s; }
  std::vector<AdamSlot>& slots() { return slots_; }
  const std::vector<AdamSlot>& slots() const { return slots_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<AdamSlot> slots_;
  int64_t step_count_ = 0;
};

// Global-norm gradient clipping; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& t : params)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const Tensor& t : params) {
      auto& grad = const_cast<std::vector<double>&>(t.grad());
      for (double& g : grad) g *= s;
    }
  }
  return norm;
}

}  // namespace mage
