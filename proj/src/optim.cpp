#include "trace/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace trace {

template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamState& state, double lr, const AdamWConfig& config,
                bool apply_decay) {
  if (!grad.empty() && grad.size() != param.size()) throw std::invalid_argument("adamw_step: gradient size mismatch");
  if (state.first_moment.size() != param.size()) {
    state.first_moment.assign(param.size(), 0.0);
    state.second_moment.assign(param.size(), 0.0);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const double decay = apply_decay ? config.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g * g;
    const double mhat = m / c1;
    const double vhat = v / c2;
    double p = static_cast<double>(param[i]);
    p -= lr * decay * p;
    p -= lr * mhat / (std::sqrt(vhat) + config.eps);
    param[i] = static_cast<T>(p);
  }
}

template <typename T>
AdamW<T>::AdamW(const ParameterStore<T>& params, AdamWConfig config) : AdamW(std::vector{&params}, config) {}

template <typename T>
AdamW<T>::AdamW(std::vector<const ParameterStore<T>*> stores, AdamWConfig config) : config_(config) {
  for (const auto* store : stores) params_.insert(params_.end(), store->entries().begin(), store->entries().end());
  states_.resize(params_.size());
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor<T> t = params_[i].tensor;
    adamw_step<T>(t.mutable_values(), t.grad(), states_[i], lr, config_, params_[i].decay);
  }
  ++steps_;
}

void WarmupCosine::validate() const {
  if (total_steps == 0) throw std::invalid_argument("lr schedule: total_steps must be positive");
  if (warmup_steps >= total_steps) {
    throw std::invalid_argument("lr schedule: warmup_steps (" + std::to_string(warmup_steps) +
                                ") must be below total_steps (" + std::to_string(total_steps) + ")");
  }
  if (!(peak_lr > 0)) throw std::invalid_argument("lr schedule: peak_lr must be positive");
}

double WarmupCosine::lr_at(std::size_t step) const {
  if (step > total_steps) step = total_steps;
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template void adamw_step<float>(std::span<float>, std::span<const float>, AdamState&, double, const AdamWConfig&, bool);
template void adamw_step<double>(std::span<double>, std::span<const double>, AdamState&, double, const AdamWConfig&,
                                 bool);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace trace
