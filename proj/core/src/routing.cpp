#include "pointcaps/routing.hpp"

#include <algorithm>
#include <utility>

namespace pointcaps {

VoteTensor::VoteTensor(Tensor v) : votes(std::move(v)) {
  if (!votes.defined() || votes.rank() < 3) {
    throw ShapeError("votes must have trailing (child, parent, parent_dim) axes, got " +
                     (votes.defined() ? shape_str(votes.shape()) : std::string("<undefined>")));
  }
}

namespace {

Shape logits_shape(const Tensor& votes) {
  return Shape(votes.shape().begin(), votes.shape().end() - 1);
}

RoutingResult run_iterations(const Tensor& votes, const RoutingOptions& opt) {
  Tensor b = Tensor::zeros(logits_shape(votes));
  Tensor k, parents;
  for (int t = 0; t < opt.iterations; ++t) {
    k = softmax_rows(b);
    parents = squash(weighted_vote_sum(votes, k));
    if (opt.kind == RoutingKind::Euclidean) {
      b = sub(b, vote_parent_sqdist(votes, parents));
    } else {
      b = add(b, vote_parent_dot(votes, parents, opt.cosine_agreement));
    }
  }
  return RoutingResult{parents, b, k};
}

}  // namespace

RoutingResult route(const VoteTensor& vt, const RoutingOptions& opt) {
  if (opt.iterations < 1) {
    throw ConfigError("routing requires at least one iteration");
  }
  if (opt.unroll_grad) {
    return run_iterations(vt.votes, opt);
  }
  // Stop-gradient mode: derive the couplings without recording, then record
  // only the final coupled sum so gradient reaches the votes but not the
  // coupling computation.
  RoutingResult inner;
  {
    NoGradScope ng;
    inner = run_iterations(vt.votes, opt);
  }
  Tensor parents = squash(weighted_vote_sum(vt.votes, inner.couplings));
  return RoutingResult{parents, inner.logits, inner.couplings};
}

RoutingResult route_euclidean(const VoteTensor& votes, int iterations) {
  RoutingOptions opt;
  opt.kind = RoutingKind::Euclidean;
  opt.iterations = iterations;
  return route(votes, opt);
}

RoutingResult route_dynamic(const VoteTensor& votes, int iterations) {
  RoutingOptions opt;
  opt.kind = RoutingKind::Dynamic;
  opt.iterations = iterations;
  return route(votes, opt);
}

RangeProbe dissimilarity_range_probe(const VoteTensor& vt) {
  NoGradScope ng;
  Tensor b = Tensor::zeros(logits_shape(vt.votes));
  Tensor k = softmax_rows(b);
  Tensor parents = squash(weighted_vote_sum(vt.votes, k));

  RangeProbe probe;
  const Tensor dot_t = vote_parent_dot(vt.votes, parents);
  const auto& dots = dot_t.values();
  probe.dynamic.lo = *std::min_element(dots.begin(), dots.end());
  probe.dynamic.hi = *std::max_element(dots.begin(), dots.end());
  const Tensor dist_t = vote_parent_sqdist(vt.votes, parents);
  const auto& dists = dist_t.values();
  // Euclidean updates subtract the squared distance, so increments are the
  // negated distances.
  probe.euclidean.lo = -*std::max_element(dists.begin(), dists.end());
  probe.euclidean.hi = -*std::min_element(dists.begin(), dists.end());
  return probe;
}

}  // namespace pointcaps
