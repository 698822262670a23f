#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pointcaps/routing.hpp"

namespace pointcaps {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // failure explanation, empty when passed
  double millis = 0;
};

// A routing implementation under test.
using RouteFn = std::function<RoutingResult(const VoteTensor&, const RoutingOptions&)>;

// Runs `fn` on `cases` random vote tensors (shapes up to 8x8x8, 1-4
// iterations) and compares parents, final logits and couplings against a
// reference router written from first principles with plain loops. The hook
// exists so deliberately broken routers can be fed in to prove the check has
// teeth.
CheckResult routing_oracle_check(const std::string& name, const RouteFn& fn, RoutingKind kind,
                                 int64_t cases, uint64_t seed, real tol);

// The full battery: per-op gradient checks, routing oracles, analytic values
// and structural invariants. Every entry carries its own timing.
std::vector<CheckResult> run_verification(uint64_t seed);

}  // namespace pointcaps
