#include "pointcaps/optimizer.hpp"

#include <cmath>

#include "pointcaps/errors.hpp"

namespace pointcaps {

RAdam::RAdam(std::vector<std::pair<std::string, Tensor>> params, RAdamOptions opts)
    : opts_(std::move(opts)) {
  if (!(opts_.lr > 0)) throw ConfigError("optimizer: lr must be positive");
  slots_.reserve(params.size());
  for (auto& [name, t] : params) {
    if (!t.defined()) throw ContractError("optimizer: undefined parameter '" + name + "'");
    Slot s;
    s.name = name;
    s.param = t;
    s.m.assign(static_cast<size_t>(t.size()), real(0));
    s.v.assign(static_cast<size_t>(t.size()), real(0));
    slots_.push_back(std::move(s));
  }
}

real RAdam::lr_for_step(int64_t t) const {
  real lr = opts_.lr;
  for (int64_t m : opts_.decay_steps) {
    if (t > m) lr /= 10;
  }
  return lr;
}

void RAdam::step() {
  // Validate every gradient before touching any state (including the step
  // counter), so an abort never leaves a half-updated optimizer behind.
  for (const Slot& s : slots_) {
    if (!s.param.has_grad()) continue;
    for (real gi : s.param.grad()) {
      if (!std::isfinite(gi)) {
        throw NumericError("optimizer: non-finite gradient in '" + s.name + "' at step " +
                           std::to_string(steps_ + 1));
      }
    }
  }

  ++steps_;
  const int64_t t = steps_;
  const real lr = lr_for_step(t);
  const real b1 = opts_.beta1, b2 = opts_.beta2;
  const real bias1 = real(1) - std::pow(b1, static_cast<real>(t));
  const real bias2 = real(1) - std::pow(b2, static_cast<real>(t));
  const real rho_inf = 2 / (1 - b2) - 1;
  const real rho_t = rho_inf - 2 * static_cast<real>(t) * std::pow(b2, static_cast<real>(t)) / bias2;
  const bool use_adaptive = !opts_.rectify || rho_t > 4;
  real rect = 1;
  if (opts_.rectify && rho_t > 4) {
    rect = std::sqrt(((rho_t - 4) * (rho_t - 2) * rho_inf) /
                     ((rho_inf - 4) * (rho_inf - 2) * rho_t));
  }

  for (Slot& s : slots_) {
    const bool has = s.param.has_grad();
    const std::vector<real>* g = has ? &s.param.grad() : nullptr;
    auto& p = s.param.values_mut();
    for (size_t i = 0; i < p.size(); ++i) {
      const real gi = has ? (*g)[i] : real(0);
      s.m[i] = b1 * s.m[i] + (1 - b1) * gi;
      s.v[i] = b2 * s.v[i] + (1 - b2) * gi * gi;
      const real m_hat = s.m[i] / bias1;
      if (use_adaptive) {
        const real v_hat = std::sqrt(s.v[i] / bias2);
        p[i] -= lr * rect * m_hat / (v_hat + opts_.eps);
      } else {
        p[i] -= lr * m_hat;  // variance not yet trustworthy
      }
    }
    s.param.zero_grad();
  }
}

}  // namespace pointcaps
