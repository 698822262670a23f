#include "pointcaps/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace pointcaps;

namespace {

LayerParams make_params(int64_t c_out, int64_t d_out, int64_t width, std::mt19937_64& rng,
                        RoutingKind kind = RoutingKind::Euclidean, int iterations = 2) {
  LayerParams p;
  p.kernels = Tensor::uniform({c_out * d_out, 1, width}, real(-0.4), real(0.4), rng, true);
  p.bias = Tensor::zeros({c_out * d_out}, true);
  p.routing.kind = kind;
  p.routing.iterations = iterations;
  return p;
}

}  // namespace

TEST(PointCapA, ShapesAndCouplingSimplex) {
  std::mt19937_64 rng(201);
  const int64_t N = 6, d_in = 5, c_out = 3, d_out = 4;
  CapsuleBlock in{Tensor::uniform({2, N, d_in}, -1, 1, rng)};
  LayerParams p = make_params(c_out, d_out, d_in, rng);
  CapsuleLayerOut out = pointcap_a(in, p, c_out, d_out);
  EXPECT_EQ(out.block.activities.shape(), (Shape{2, c_out, d_out}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, N, c_out}));
  EXPECT_EQ(out.couplings.shape(), (Shape{2, N, c_out}));
  const auto& k = out.couplings.values();
  for (int64_t row = 0; row < 2 * N; ++row) {
    real s = 0;
    for (int64_t j = 0; j < c_out; ++j) s += k[row * c_out + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(PointCapA, MatchesManualPipeline) {
  std::mt19937_64 rng(202);
  const int64_t N = 4, d_in = 3, c_out = 2, d_out = 3;
  CapsuleBlock in{Tensor::uniform({N, d_in}, -1, 1, rng)};
  LayerParams p = make_params(c_out, d_out, d_in, rng);

  CapsuleLayerOut out = pointcap_a(in, p, c_out, d_out);

  // independent recomputation: per-point feature conv -> swish -> votes -> routing
  const auto feats = oracle::conv1d_reference(in.activities.values(), N, d_in,
                                              p.kernels.values(), c_out * d_out,
                                              p.bias.values());
  std::vector<double> votes(feats.size());
  for (size_t i = 0; i < feats.size(); ++i) {
    votes[i] = feats[i] / (1.0 + std::exp(-feats[i]));
  }
  const auto ref = oracle::route_reference(votes, 1, N, c_out, d_out, 2, true);
  ASSERT_EQ(out.block.activities.size(), static_cast<int64_t>(ref.parents.size()));
  for (size_t i = 0; i < ref.parents.size(); ++i) {
    EXPECT_NEAR(out.block.activities.values()[i], ref.parents[i], 1e-12);
  }
  for (size_t i = 0; i < ref.logits.size(); ++i) {
    EXPECT_NEAR(out.logits.values()[i], ref.logits[i], 1e-12);
  }
}

TEST(PointCapB, StridedConvCoversOneCapsulePerWindow) {
  std::mt19937_64 rng(203);
  const int64_t E = 3, c_in = 4, d_in = 5, c_out = 2, d_out = 3;
  CapsuleBlock in{Tensor::uniform({E, c_in, d_in}, -1, 1, rng)};
  LayerParams p = make_params(c_out, d_out, d_in, rng, RoutingKind::Dynamic, 3);
  CapsuleLayerOut out = pointcap_b(in, p, c_out, d_out);
  EXPECT_EQ(out.block.activities.shape(), (Shape{E, c_out, d_out}));
  EXPECT_EQ(out.logits.shape(), (Shape{E, c_in, c_out}));

  // manual: flatten capsules to a strip, stride-d_in windows, swish, route
  const auto& x = in.activities.values();
  for (int64_t e = 0; e < E; ++e) {
    std::vector<double> strip(x.begin() + e * c_in * d_in, x.begin() + (e + 1) * c_in * d_in);
    auto feats = oracle::strided_conv_reference(strip, c_in * d_in, p.kernels.values(),
                                                c_out * d_out, d_in, p.bias.values());
    for (auto& f : feats) f = f / (1.0 + std::exp(-f));
    const auto ref = oracle::route_reference(feats, 1, c_in, c_out, d_out, 3, false);
    for (size_t i = 0; i < ref.parents.size(); ++i) {
      EXPECT_NEAR(out.block.activities.values()[e * c_out * d_out + i], ref.parents[i], 1e-12);
    }
  }
}

TEST(PointCapC, SquashOnlyNoRouting) {
  std::mt19937_64 rng(204);
  const int64_t E = 4, c_in = 3, d_in = 4, c_out = 2, d_out = 5;
  CapsuleBlock in{Tensor::uniform({E, c_in, d_in}, -1, 1, rng)};
  LayerParams p = make_params(c_out, d_out, c_in * d_in, rng);
  CapsuleBlock out = pointcap_c(in, p, c_out, d_out);
  EXPECT_EQ(out.activities.shape(), (Shape{E, c_out, d_out}));
  EXPECT_EQ(out.count(), c_out);
  EXPECT_EQ(out.dim(), d_out);

  // every output capsule is squashed: norm < 1
  const auto& v = out.activities.values();
  for (int64_t r = 0; r < E * c_out; ++r) {
    real n2 = 0;
    for (int64_t d = 0; d < d_out; ++d) n2 += v[r * d_out + d] * v[r * d_out + d];
    EXPECT_LT(std::sqrt(n2), 1.0);
  }

  // and matches conv -> reshape -> squash by hand
  const auto& x = in.activities.values();
  std::vector<double> flat(x.begin(), x.begin() + c_in * d_in);
  const auto feats = oracle::conv1d_reference(flat, 1, c_in * d_in, p.kernels.values(),
                                              c_out * d_out, p.bias.values());
  for (int64_t c = 0; c < c_out; ++c) {
    double n2 = 0;
    for (int64_t d = 0; d < d_out; ++d) n2 += feats[c * d_out + d] * feats[c * d_out + d];
    const double sc = n2 == 0 ? 0 : std::sqrt(n2) / (1 + n2);
    for (int64_t d = 0; d < d_out; ++d) {
      EXPECT_NEAR(v[c * d_out + d], feats[c * d_out + d] * sc, 1e-12);
    }
  }
}

TEST(DigitCap, TransformThenRoute) {
  std::mt19937_64 rng(205);
  const int64_t c_in = 5, d_in = 4, classes = 3, d_out = 6;
  CapsuleBlock in{Tensor::uniform({c_in, d_in}, -1, 1, rng)};
  Tensor w = Tensor::uniform({c_in, classes, d_in, d_out}, real(-0.3), real(0.3), rng, true);
  RoutingOptions routing;
  routing.kind = RoutingKind::Dynamic;
  routing.iterations = 3;
  CapsuleLayerOut out = digitcap(in, w, routing);
  EXPECT_EQ(out.block.activities.shape(), (Shape{classes, d_out}));
  EXPECT_EQ(out.logits.shape(), (Shape{c_in, classes}));

  // votes by hand, then the routing reference
  std::vector<double> votes(static_cast<size_t>(c_in * classes * d_out), 0.0);
  const auto& u = in.activities.values();
  const auto& wv = w.values();
  for (int64_t i = 0; i < c_in; ++i) {
    for (int64_t j = 0; j < classes; ++j) {
      for (int64_t o = 0; o < d_out; ++o) {
        double acc = 0;
        for (int64_t e = 0; e < d_in; ++e) {
          acc += u[i * d_in + e] * wv[((i * classes + j) * d_in + e) * d_out + o];
        }
        votes[(i * classes + j) * d_out + o] = acc;
      }
    }
  }
  const auto ref = oracle::route_reference(votes, 1, c_in, classes, d_out, 3, false);
  for (size_t i = 0; i < ref.parents.size(); ++i) {
    EXPECT_NEAR(out.block.activities.values()[i], ref.parents[i], 1e-12);
  }
}

TEST(MaskActivity, LabelSelectionPicksGivenRows) {
  Tensor acts = Tensor::from({2, 3, 2}, {1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6});
  Tensor sel = mask_activity(acts, {2, 0});
  EXPECT_EQ(sel.shape(), (Shape{2, 2}));
  EXPECT_EQ(sel.values(), (std::vector<real>{3, 3, 4, 4}));
}

TEST(MaskActivity, LabelFreeSelectionPicksLongestRow) {
  Tensor acts = Tensor::from({2, 3, 2}, {0.1, 0, 0.9, 0, 0.2, 0,   // row 1 longest
                                         0, 0.5, 0, 0.1, 0.7, 0.3});  // row 2 longest
  Tensor sel = mask_activity(acts);
  EXPECT_EQ(sel.values(), (std::vector<real>{0.9, 0, 0.7, 0.3}));
}

TEST(MaskActivity, GradientFlowsOnlyThroughSelectedRow) {
  Tensor acts = Tensor::from({3, 2}, {5, 0, 1, 0, 2, 0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mask_activity(acts, {0})));
  }
  EXPECT_EQ(acts.grad(), (std::vector<real>{1, 1, 0, 0, 0, 0}));
}

TEST(Layers, KernelShapeMismatchThrows) {
  std::mt19937_64 rng(206);
  CapsuleBlock in{Tensor::uniform({4, 3}, -1, 1, rng)};
  LayerParams p = make_params(2, 2, 5, rng);  // width 5, input dim 3
  EXPECT_THROW(pointcap_a(in, p, 2, 2), ShapeError);
  LayerParams bad_geom = make_params(2, 2, 3, rng);
  EXPECT_THROW(pointcap_a(in, bad_geom, 0, 2), ConfigError);
}

TEST(Layers, GradientsThroughEachLayer) {
  std::mt19937_64 rng(207);
  CapsuleBlock in{Tensor::uniform({4, 3}, -1, 1, rng, true)};
  LayerParams p = make_params(2, 3, 3, rng);
  auto r = oracle::check_gradient({in.activities, p.kernels, p.bias}, [&] {
    return pointcap_a(in, p, 2, 3).block.activities;
  });
  EXPECT_LT(r.max_rel_err, 1e-5) << "pointcap_a " << r.where;

  CapsuleBlock bin{Tensor::uniform({2, 3, 4}, -1, 1, rng, true)};
  LayerParams bp = make_params(2, 2, 4, rng, RoutingKind::Dynamic);
  r = oracle::check_gradient({bin.activities, bp.kernels, bp.bias}, [&] {
    return pointcap_b(bin, bp, 2, 2).block.activities;
  });
  EXPECT_LT(r.max_rel_err, 1e-5) << "pointcap_b " << r.where;

  CapsuleBlock cin{Tensor::uniform({2, 3, 4}, -1, 1, rng, true)};
  LayerParams cp = make_params(2, 2, 12, rng);
  r = oracle::check_gradient({cin.activities, cp.kernels, cp.bias}, [&] {
    return pointcap_c(cin, cp, 2, 2).activities;
  });
  EXPECT_LT(r.max_rel_err, 1e-5) << "pointcap_c " << r.where;

  CapsuleBlock din{Tensor::uniform({3, 4}, -1, 1, rng, true)};
  Tensor w = Tensor::uniform({3, 2, 4, 3}, real(-0.4), real(0.4), rng, true);
  RoutingOptions routing;
  routing.iterations = 2;
  r = oracle::check_gradient({din.activities, w}, [&] {
    return digitcap(din, w, routing).block.activities;
  });
  EXPECT_LT(r.max_rel_err, 1e-5) << "digitcap " << r.where;
}
