#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pointcaps/tensor.hpp"

namespace pointcaps {

struct RAdamOptions {
  real lr = real(1e-3);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
  bool rectify = true;  // off = plain adaptive-moment update
  std::vector<int64_t> decay_steps;  // lr drops 10x after each of these steps
};

// Rectified adaptive-moment optimizer. Early steps (while the variance
// estimate is too fresh, rho_t <= 4) fall back to plain momentum; later steps
// scale by the variance-rectification term.
class RAdam {
 public:
  RAdam(std::vector<std::pair<std::string, Tensor>> params, RAdamOptions opts);

  // Applies one update from the parameters' accumulated gradients (a missing
  // gradient counts as zero) and clears them.
  void step();

  int64_t step_count() const { return steps_; }

  // Learning rate the next step will use.
  real effective_lr() const { return lr_for_step(steps_ + 1); }

  const RAdamOptions& options() const { return opts_; }

 private:
  real lr_for_step(int64_t t) const;

  struct Slot {
    std::string name;
    Tensor param;
    std::vector<real> m, v;
  };
  std::vector<Slot> slots_;
  RAdamOptions opts_;
  int64_t steps_ = 0;
};

}  // namespace pointcaps
