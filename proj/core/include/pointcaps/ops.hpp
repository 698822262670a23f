#pragma once

#include <vector>

#include "pointcaps/tensor.hpp"

namespace pointcaps {

// All ops are pure functions from tensors to a new tensor. When a tape is
// active and an input carries requires_grad, the op records its backward
// rule. Shapes are documented with the convention that "..." stands for any
// number of leading axes (batch, entity, ...) treated independently; the
// semantics of the op live entirely on the trailing axes. Every op checks
// its output for NaN/Inf and throws NumericError on the first hit.

// ---- elementwise / arithmetic ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor relu(const Tensor& a);
// x * sigmoid(x); the pre-routing nonlinearity used on vote features.
Tensor swish(const Tensor& a);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar

// ---- shape plumbing ---------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);  // same element count
Tensor concat(const Tensor& a, const Tensor& b, int axis);
// [..., R, D] with one row index per leading position -> [..., D]
Tensor select_rows(const Tensor& a, const std::vector<int64_t>& rows);
Tensor detach(const Tensor& a);

// ---- row-wise nonlinearities (rows = last axis) -----------------------------

// Numerically stable softmax along the last axis; each row sums to 1.
Tensor softmax_rows(const Tensor& a);
// s -> (|s|^2 / (1 + |s|^2)) * s/|s| along the last axis. The forward value
// is computed as s * |s|/(1+|s|^2), which is exact (no epsilon) and zero at
// s = 0; the backward rule takes the limit gradient 0 at the origin.
Tensor squash(const Tensor& a);
// Euclidean norm along the last axis: [..., D] -> [...].
Tensor rows_norm(const Tensor& a);

// ---- convolution family ------------------------------------------------------

// Kernels of height 1 sweep the feature axis: input [..., C, F] with kernels
// [K, 1, F] gives [..., C, K]. Every row (capsule / point) is transformed
// independently; this is the workhorse behind the per-point convs and the
// vote-producing capsule convs.
Tensor conv1d_feature(const Tensor& input, const Tensor& kernels,
                      const Tensor& bias = Tensor());

// Strided 1-D convolution with kernel width equal to the stride, so windows
// tile the input exactly: input [..., W, 1] with kernels [K, 1, n] and
// stride n gives [..., W/n, K]. The output width is always W/n, which for a
// capsule block flattened to W = c*n lands back on c.
Tensor conv2d_strided(const Tensor& input, const Tensor& kernels, int64_t stride,
                      const Tensor& bias = Tensor());

// Width-wise transposed convolution: input [..., W, C_in] with kernels
// [kw, C_in, C_out] and stride == kw gives [..., W*stride, C_out]. With
// kw == stride == 1 this is a per-position linear map.
Tensor deconv_width(const Tensor& input, const Tensor& kernels, int64_t stride,
                    const Tensor& bias = Tensor());

// ---- capsule plumbing ---------------------------------------------------------

// Per-(child, parent) linear vote: u [..., I, D_in] with w [I, J, D_in, D_out]
// -> votes [..., I, J, D_out].
Tensor capsule_transform(const Tensor& u, const Tensor& w);

// s_j = sum_i k_ij * v_ij : votes [..., I, J, D] with couplings [..., I, J]
// -> [..., J, D].
Tensor weighted_vote_sum(const Tensor& votes, const Tensor& couplings);

// Squared Euclidean distance between each vote and its parent:
// votes [..., I, J, D], parents [..., J, D] -> [..., I, J].
Tensor vote_parent_sqdist(const Tensor& votes, const Tensor& parents);

// Agreement between each vote and its parent: raw dot product by default,
// or cosine (dot / (|v||p| + 1e-12)) when cosine = true.
Tensor vote_parent_dot(const Tensor& votes, const Tensor& parents,
                       bool cosine = false);

// ---- batch norm -----------------------------------------------------------------

// Running statistics (not learned, but persisted with the model).
struct BNState {
  Tensor running_mean;
  Tensor running_var;
  static BNState init(int64_t channels);
};

// Normalizes over every leading axis per channel (channels = last axis).
// Training mode uses batch statistics and folds them into the running
// estimates with the given momentum; eval mode applies the running
// statistics. `state` may be null in training mode to skip the update.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BNState* state, bool training, real momentum = real(0.9),
                  real eps = real(1e-5));

// ---- chamfer ------------------------------------------------------------------------

// Mean squared nearest-neighbour distance in both directions:
//   (1/N) sum_i min_j |x_i - y_j|^2 + (1/M) sum_j min_i |x_i - y_j|^2
// x [..., N, D], y [..., M, D] -> [...]. Nearest-neighbour ties resolve to
// the lowest index, and gradients flow through the selected pairs only.
Tensor chamfer_distance(const Tensor& x, const Tensor& y);

// ---- non-differentiable helpers ------------------------------------------------------

// Argmax along the last axis (ties -> lowest index): one index per leading
// position.
std::vector<int64_t> argmax_rows(const Tensor& a);

}  // namespace pointcaps
