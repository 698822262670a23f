#pragma once

#include <vector>

#include "pointcaps/routing.hpp"

namespace pointcaps {

// A group of capsules: activities [..., count, dim].
struct CapsuleBlock {
  Tensor activities;

  int64_t count() const { return activities.shape()[activities.rank() - 2]; }
  int64_t dim() const { return activities.shape().back(); }
};

// Weights of one capsule layer plus its routing setup. `bias` may be left
// undefined for bias-free variants.
struct LayerParams {
  Tensor kernels;
  Tensor bias;
  RoutingOptions routing;
};

struct CapsuleLayerOut {
  CapsuleBlock block;
  Tensor logits;     // [..., c_in, c_out] routing logits after the last update
  Tensor couplings;  // [..., c_in, c_out]
};

// Shared-kernel capsule layer: every input capsule [d_in] is swept by
// c_out*d_out kernels (conv over the feature axis), swish-activated, the
// result reinterpreted as one [d_out] vote per output capsule, and the votes
// routed. Input [..., c_in, d_in] -> block [..., c_out, d_out] with
// per-child logits.
CapsuleLayerOut pointcap_a(const CapsuleBlock& input, const LayerParams& params,
                           int64_t c_out, int64_t d_out);

// Entity-wise strided capsule layer. The input [..., E, c_in, d_in] is
// flattened per entity to a width c_in*d_in strip; kernels of width d_in and
// stride d_in slide over it, so each window covers exactly one capsule and
// the output width lands back on c_in. Votes are swish-activated and routed
// within each entity: block [..., E, c_out, d_out].
CapsuleLayerOut pointcap_b(const CapsuleBlock& input, const LayerParams& params,
                           int64_t c_out, int64_t d_out);

// Entity-preserving projection without routing: each entity's capsules
// [c_in * d_in] map through a dense kernel bank to c_out capsules of d_out,
// then squash. Input [..., E, c_in, d_in] -> block [..., E, c_out, d_out].
CapsuleBlock pointcap_c(const CapsuleBlock& input, const LayerParams& params,
                        int64_t c_out, int64_t d_out);

// Fully-connected capsule head: per-pair weight matrices turn each input
// capsule into one vote per class, and the votes are routed. Input
// [..., c_in, d_in] with weights [c_in, classes, d_in, d_out].
CapsuleLayerOut digitcap(const CapsuleBlock& input, const Tensor& weights,
                         const RoutingOptions& routing);

// Selects one activity row per leading position: [..., classes, d] ->
// [..., d]. Training picks the true class; the label-free overload picks the
// row with the largest activity norm.
Tensor mask_activity(const Tensor& activities, const std::vector<int64_t>& labels);
Tensor mask_activity(const Tensor& activities);

}  // namespace pointcaps
