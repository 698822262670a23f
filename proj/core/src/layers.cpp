#include "pointcaps/layers.hpp"

#include <cmath>
#include <sstream>

namespace pointcaps {

namespace {

void check_kernels(const LayerParams& p, int64_t c_out, int64_t d_out, int64_t width,
                   const char* layer) {
  if (c_out < 1 || d_out < 1) {
    throw ConfigError(std::string(layer) + ": output capsule geometry must be positive");
  }
  if (!p.kernels.defined() || p.kernels.rank() != 3 || p.kernels.shape()[0] != c_out * d_out ||
      p.kernels.shape()[1] != 1 || p.kernels.shape()[2] != width) {
    std::ostringstream os;
    os << layer << ": expected kernels [" << c_out * d_out << ", 1, " << width << "], got "
       << (p.kernels.defined() ? shape_str(p.kernels.shape()) : "<undefined>");
    throw ShapeError(os.str());
  }
}

Shape drop_last(const Shape& s, int n) { return Shape(s.begin(), s.end() - n); }

}  // namespace

CapsuleLayerOut pointcap_a(const CapsuleBlock& input, const LayerParams& params,
                           int64_t c_out, int64_t d_out) {
  const Tensor& x = input.activities;
  if (x.rank() < 2) throw ShapeError("pointcap_a: input must be [..., c_in, d_in]");
  check_kernels(params, c_out, d_out, input.dim(), "pointcap_a");

  Tensor feats = swish(conv1d_feature(x, params.kernels, params.bias));
  Shape vote_shape = drop_last(x.shape(), 1);  // [..., c_in]
  vote_shape.push_back(c_out);
  vote_shape.push_back(d_out);
  VoteTensor votes(reshape(feats, std::move(vote_shape)));
  RoutingResult r = route(votes, params.routing);
  return CapsuleLayerOut{CapsuleBlock{r.parents}, r.logits, r.couplings};
}

CapsuleLayerOut pointcap_b(const CapsuleBlock& input, const LayerParams& params,
                           int64_t c_out, int64_t d_out) {
  const Tensor& x = input.activities;
  if (x.rank() < 3) throw ShapeError("pointcap_b: input must be [..., E, c_in, d_in]");
  const int64_t c_in = input.count();
  const int64_t d_in = input.dim();
  check_kernels(params, c_out, d_out, d_in, "pointcap_b");

  // Flatten each entity's capsules into a strip; stride-d_in windows then
  // cover one capsule each and the output width equals c_in again.
  Shape strip_shape = drop_last(x.shape(), 2);
  strip_shape.push_back(c_in * d_in);
  strip_shape.push_back(1);
  Tensor strip = reshape(x, std::move(strip_shape));
  Tensor feats = swish(conv2d_strided(strip, params.kernels, d_in, params.bias));

  Shape vote_shape = drop_last(feats.shape(), 1);  // [..., E?, c_in]
  vote_shape.push_back(c_out);
  vote_shape.push_back(d_out);
  VoteTensor votes(reshape(feats, std::move(vote_shape)));
  RoutingResult r = route(votes, params.routing);
  return CapsuleLayerOut{CapsuleBlock{r.parents}, r.logits, r.couplings};
}

CapsuleBlock pointcap_c(const CapsuleBlock& input, const LayerParams& params,
                        int64_t c_out, int64_t d_out) {
  const Tensor& x = input.activities;
  if (x.rank() < 3) throw ShapeError("pointcap_c: input must be [..., E, c_in, d_in]");
  const int64_t c_in = input.count();
  const int64_t d_in = input.dim();
  check_kernels(params, c_out, d_out, c_in * d_in, "pointcap_c");

  Shape flat_shape = drop_last(x.shape(), 2);  // [..., E]
  flat_shape.push_back(c_in * d_in);
  Tensor flat = reshape(x, std::move(flat_shape));
  Tensor feats = conv1d_feature(flat, params.kernels, params.bias);

  Shape out_shape = drop_last(feats.shape(), 1);
  out_shape.push_back(c_out);
  out_shape.push_back(d_out);
  return CapsuleBlock{squash(reshape(feats, std::move(out_shape)))};
}

CapsuleLayerOut digitcap(const CapsuleBlock& input, const Tensor& weights,
                         const RoutingOptions& routing) {
  const Tensor& x = input.activities;
  if (x.rank() < 2) throw ShapeError("digitcap: input must be [..., c_in, d_in]");
  VoteTensor votes(capsule_transform(x, weights));
  RoutingResult r = route(votes, routing);
  return CapsuleLayerOut{CapsuleBlock{r.parents}, r.logits, r.couplings};
}

Tensor mask_activity(const Tensor& activities, const std::vector<int64_t>& labels) {
  return select_rows(activities, labels);
}

Tensor mask_activity(const Tensor& activities) {
  if (activities.rank() < 2) {
    throw ShapeError("mask_activity: expected [..., classes, d]");
  }
  const int64_t lead = detail::leading_count(activities.shape(), 2);
  const int64_t R = activities.shape()[activities.rank() - 2];
  const int64_t D = activities.shape().back();
  const auto& v = activities.values();
  std::vector<int64_t> rows(static_cast<size_t>(lead));
  for (int64_t l = 0; l < lead; ++l) {
    real best = -1;
    int64_t best_r = 0;
    for (int64_t r = 0; r < R; ++r) {
      real n2 = 0;
      for (int64_t d = 0; d < D; ++d) {
        const real x = v[(l * R + r) * D + d];
        n2 += x * x;
      }
      if (n2 > best) {
        best = n2;
        best_r = r;
      }
    }
    rows[l] = best_r;
  }
  return select_rows(activities, rows);
}

}  // namespace pointcaps
