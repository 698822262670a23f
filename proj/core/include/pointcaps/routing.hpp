#pragma once

#include "pointcaps/ops.hpp"
#include "pointcaps/tensor.hpp"

namespace pointcaps {

enum class RoutingKind { Euclidean, Dynamic };

struct RoutingOptions {
  int iterations = 3;
  RoutingKind kind = RoutingKind::Euclidean;
  // When true (the default) the backward pass differentiates through every
  // routing iteration. When false the couplings computed by the iterations
  // are treated as constants and only the final weighted sum carries
  // gradient.
  bool unroll_grad = true;
  // Dynamic only: use dot/(|v||p| + eps) instead of the raw dot product.
  bool cosine_agreement = false;
};

// Prediction tensor with trailing axes (child, parent, parent_dim). Any
// leading axes — batch, entity groups — are routed independently.
struct VoteTensor {
  Tensor votes;

  explicit VoteTensor(Tensor v);
  int64_t child_count() const { return votes.shape()[votes.rank() - 3]; }
  int64_t parent_count() const { return votes.shape()[votes.rank() - 2]; }
  int64_t parent_dim() const { return votes.shape().back(); }
};

struct RoutingResult {
  Tensor parents;    // [..., J, D]; squashed, so every row norm < 1
  Tensor logits;     // [..., I, J]; agreement logits after the final update
  Tensor couplings;  // [..., I, J]; the softmax used by the last iteration,
                     // rows (fixed child, across parents) sum to 1
};

// Iterative routing by agreement. Logits start at zero; each iteration takes
// the parent-axis softmax of the logits, forms the coupled vote sum per
// parent, squashes it, and then moves every logit by the agreement between
// the vote and the squashed parent of the same iteration:
//   Euclidean:  b_ij <- b_ij - |v_ij - parent_j|^2   (non-positive, unbounded)
//   Dynamic:    b_ij <- b_ij + <v_ij, parent_j>
RoutingResult route(const VoteTensor& votes, const RoutingOptions& options);

RoutingResult route_euclidean(const VoteTensor& votes, int iterations);
RoutingResult route_dynamic(const VoteTensor& votes, int iterations);

struct IncrementRange {
  real lo = 0;
  real hi = 0;
};

struct RangeProbe {
  IncrementRange dynamic;    // dot-product increments
  IncrementRange euclidean;  // negated squared-distance increments
};

// Evaluates one uniform-coupling routing step and reports the range of logit
// increments each update rule would apply to this vote tensor. Useful for
// contrasting the bounded dot-product updates with the unbounded Euclidean
// ones.
RangeProbe dissimilarity_range_probe(const VoteTensor& votes);

}  // namespace pointcaps
