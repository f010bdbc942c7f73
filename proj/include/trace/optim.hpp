#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "trace/parameters.hpp"

namespace trace {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step = 0;
};

// One decoupled-weight-decay Adam update with bias correction. An empty `grad`
// is treated as zero.
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamState& state, double lr, const AdamWConfig& config,
                bool apply_decay = true);

// AdamW over every parameter of one or more stores (state kept per parameter, in store order).
// The stores' parameter sets are captured at construction.
template <typename T>
class AdamW {
 public:
  AdamW(const ParameterStore<T>& params, AdamWConfig config);
  AdamW(std::vector<const ParameterStore<T>*> stores, AdamWConfig config);
  void step(double lr);
  std::size_t steps() const { return steps_; }

 private:
  std::vector<NamedParameter<T>> params_;
  AdamWConfig config_;
  std::vector<AdamState> states_;
  std::size_t steps_ = 0;
};

// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
struct WarmupCosine {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  void validate() const;
  double lr_at(std::size_t step) const;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace trace
