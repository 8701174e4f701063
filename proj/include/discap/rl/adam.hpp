#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "discap/checkpoint.hpp"
#include "discap/grad/tensor.hpp"

namespace discap::rl {

// Cosine annealing with warm restarts. Cycle i lasts period * multiplier^i
// steps; at each cycle start the rate returns to the base value.
struct CosineSchedule {
  bool enabled = false;
  std::uint64_t period = 1000;
  double multiplier = 2.0;
  double min_lr = 0.0;
};

double scheduled_lr(double base_lr, const CosineSchedule& schedule, std::uint64_t step);

struct OptimizerState {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  CosineSchedule schedule;
  std::uint64_t step = 0;
  std::vector<grad::Tensor> first_moment;
  std::vector<grad::Tensor> second_moment;

  double current_lr() const { return scheduled_lr(base_lr, schedule, step); }
};

// One bias-corrected Adam step. Moments are created on first use with the
// parameter shapes.
void adam_update(OptimizerState& state, std::span<grad::Tensor* const> params,
                 std::span<const grad::Tensor> grads);

// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_global_norm(std::span<grad::Tensor> grads, double max_norm);

void store_optimizer(Checkpoint& ckpt, const std::string& prefix, const OptimizerState& state);
void restore_optimizer(const Checkpoint& ckpt, const std::string& prefix, OptimizerState& state);

}  // namespace discap::rl
