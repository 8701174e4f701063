#include "discap/rl/adam.hpp"

#include <cmath>
#include <numbers>

#include "discap/error.hpp"

namespace discap::rl {

double scheduled_lr(double base_lr, const CosineSchedule& schedule, std::uint64_t step) {
  if (!schedule.enabled) return base_lr;
  require(schedule.period > 0, "cosine schedule: period must be positive");
  double cycle = static_cast<double>(schedule.period);
  double t = static_cast<double>(step);
  while (t >= cycle) {
    t -= cycle;
    cycle *= schedule.multiplier;
  }
  const double progress = t / cycle;
  return schedule.min_lr +
         0.5 * (base_lr - schedule.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_update(OptimizerState& state, std::span<grad::Tensor* const> params,
                 std::span<const grad::Tensor> grads) {
  require(params.size() == grads.size(), "adam_update: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const grad::Tensor* p : params) {
      state.first_moment.push_back(grad::Tensor::zeros(p->shape));
      state.second_moment.push_back(grad::Tensor::zeros(p->shape));
    }
  }
  require(state.first_moment.size() == params.size(),
          "adam_update: optimizer state tracks a different parameter list");
  const double lr = state.current_lr();
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    grad::Tensor& p = *params[k];
    const grad::Tensor& g = grads[k];
    require(p.shape == g.shape && p.shape == state.first_moment[k].shape,
            "adam_update: shape mismatch for parameter " + std::to_string(k));
    auto& m = state.first_moment[k].values;
    auto& v = state.second_moment[k].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.values[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.values[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

double clip_global_norm(std::span<grad::Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.values) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.values) v *= factor;
  }
  return norm;
}

void store_optimizer(Checkpoint& ckpt, const std::string& prefix, const OptimizerState& state) {
  ckpt.add(prefix + "step", grad::Tensor::scalar(static_cast<double>(state.step)));
  for (std::size_t k = 0; k < state.first_moment.size(); ++k) {
    ckpt.add(prefix + "m." + std::to_string(k), state.first_moment[k]);
    ckpt.add(prefix + "v." + std::to_string(k), state.second_moment[k]);
  }
}

void restore_optimizer(const Checkpoint& ckpt, const std::string& prefix, OptimizerState& state) {
  state.step = static_cast<std::uint64_t>(ckpt.get(prefix + "step").item());
  state.first_moment.clear();
  state.second_moment.clear();
  for (std::size_t k = 0; ckpt.contains(prefix + "m." + std::to_string(k)); ++k) {
    state.first_moment.push_back(ckpt.get(prefix + "m." + std::to_string(k)));
    state.second_moment.push_back(ckpt.get(prefix + "v." + std::to_string(k)));
  }
}

}  // namespace discap::rl
