#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metalm/tensor.hpp"

namespace metalm {

// Piecewise learning-rate schedule: linear ramp from zero over the warmup
// steps, then decay from the peak to zero at total_steps.
struct LrSchedule {
  std::string kind = "cosine";  // "cosine" or "linear"
  double peak = 3e-4;
  int64_t warmup_steps = 100;
  int64_t total_steps = 6000;

  void validate() const;
  double at(int64_t step) const;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled decay, applied to matrices only; vector parameters (norm gains)
  // are left undecayed.
  double weight_decay = 0.1;
};

// Adam with decoupled weight decay over a fixed set of named parameters.
// Moment buffers are exposed by name ("opt.m.<param>", "opt.v.<param>") so a
// checkpoint can capture the full optimizer state.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor*>> params, AdamWOptions opt);

  // Applies the accumulated gradients at the given learning rate. Raises a
  // numeric error if any parameter or gradient is not finite.
  void step(double lr);
  void zero_grad();

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t);

  // Moment buffers in parameter order, named for checkpointing.
  std::vector<std::pair<std::string, std::vector<float>*>> state();
  const std::vector<std::pair<std::string, Tensor*>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  AdamWOptions opt_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace metalm
