#include "pointcaps/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "support/oracles.hpp"

using namespace pointcaps;

namespace {

Tensor random_cloud_tensor(int64_t batch, int64_t n, int64_t channels, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform({batch, n, channels}, -1, 1, rng);
}

}  // namespace

TEST(ModelConfig, RoutingPolicyNamesRoundTrip) {
  for (const RoutingPolicy p :
       {RoutingPolicy::PointCaps, RoutingPolicy::AllDynamic, RoutingPolicy::AllEuclidean}) {
    EXPECT_EQ(routing_policy_from(routing_policy_name(p)), p);
  }
  EXPECT_THROW(routing_policy_from("sideways"), ConfigError);
}

TEST(ModelConfig, DefaultsMatchReferenceGeometry) {
  const ModelConfig c = ModelConfig::defaults(2048, 13);
  EXPECT_EQ(c.conv1_width, 16);
  EXPECT_EQ(c.conv2_width, 64);
  EXPECT_EQ(c.conv3_width, 256);
  EXPECT_EQ(c.capa_count, 64);
  EXPECT_EQ(c.capa_dim, 32);
  EXPECT_EQ(c.capc_count, 4);
  EXPECT_EQ(c.capc_dim, 16);
  EXPECT_EQ(c.capb_count, 8);
  EXPECT_EQ(c.capb_dim, 16);
  EXPECT_EQ(c.digit_dim, 16);
  EXPECT_EQ(c.concat_count(), 128);
  EXPECT_EQ(c.decoder_grid_width(), 128);
  EXPECT_EQ(c.decoder_grid_channels(), 1);
  EXPECT_EQ(c.capa1_iterations, 1);
  EXPECT_EQ(c.digit_iterations, 3);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, ValidateRejectsInconsistentSettings) {
  ModelConfig c = ModelConfig::micro(64, 5);
  EXPECT_NO_THROW(c.validate());

  ModelConfig bad = c;
  bad.num_points = 60;  // not a multiple of 16
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.num_classes = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.dense_width = bad.decoder_grid_width() + 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.digit_iterations = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.margin_m_plus = bad.margin_m_minus;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelConfig, RoutingPolicySelectsKinds) {
  ModelConfig c = ModelConfig::micro(32, 2);
  EXPECT_EQ(c.capa_routing(1).kind, RoutingKind::Euclidean);
  EXPECT_EQ(c.capb_routing().kind, RoutingKind::Dynamic);
  EXPECT_EQ(c.digit_routing().kind, RoutingKind::Dynamic);
  c.routing_policy = RoutingPolicy::AllEuclidean;
  EXPECT_EQ(c.capb_routing().kind, RoutingKind::Euclidean);
  EXPECT_EQ(c.digit_routing().kind, RoutingKind::Euclidean);
  c.routing_policy = RoutingPolicy::AllDynamic;
  EXPECT_EQ(c.capa_routing(3).kind, RoutingKind::Dynamic);
}

TEST(ModelState, InitIsSeedDeterministic) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState a = ModelState::init(c, 7);
  ModelState b = ModelState::init(c, 7);
  ModelState other = ModelState::init(c, 8);
  auto an = a.named_tensors(), bn = b.named_tensors(), on = other.named_tensors();
  ASSERT_EQ(an.size(), bn.size());
  bool any_diff = false;
  for (size_t i = 0; i < an.size(); ++i) {
    EXPECT_EQ(an[i].first, bn[i].first);
    EXPECT_EQ(an[i].second.values(), bn[i].second.values()) << an[i].first;
    if (on[i].second.values() != an[i].second.values()) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(ModelState, InitBiasesZeroAndNormalizationIdentity) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 1);
  for (real v : s.conv1_b.values()) EXPECT_EQ(v, 0);
  for (real v : s.dec5_b.values()) EXPECT_EQ(v, 0);
  for (real v : s.bn1_gamma.values()) EXPECT_EQ(v, 1);
  for (real v : s.bn1_beta.values()) EXPECT_EQ(v, 0);
  for (real v : s.bn1.running_mean.values()) EXPECT_EQ(v, 0);
  for (real v : s.bn1.running_var.values()) EXPECT_EQ(v, 1);
  // fan-in bound on the first conv kernels
  const real bound = 1 / std::sqrt(real(c.input_channels()));
  for (real v : s.conv1_k.values()) {
    EXPECT_GE(v, -bound);
    EXPECT_LT(v, bound);
  }
}

TEST(ModelState, ParameterListShapeAndPrefixes) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 1);
  auto params = s.parameters();
  auto named = s.named_tensors();
  EXPECT_EQ(named.size(), params.size() + 4);  // + the two BN running pairs
  std::set<std::string> names;
  for (const auto& [name, t] : params) {
    EXPECT_TRUE(t.requires_grad()) << name;
    names.insert(name);
    EXPECT_TRUE(name.rfind("encoder.", 0) == 0 || name.rfind("digit.", 0) == 0 ||
                name.rfind("decoder.", 0) == 0)
        << name;
  }
  EXPECT_EQ(names.size(), params.size());  // unique names

  ModelConfig nb = c;
  nb.conv_bias = false;
  ModelState s2 = ModelState::init(nb, 1);
  EXPECT_EQ(s2.parameters().size() + 14, params.size());  // 14 bias tensors dropped
}

TEST(ModelState, CloneIsDeep) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 1);
  ModelState copy = s.clone();
  copy.conv1_k.values_mut()[0] += 1;
  copy.bn1.running_mean.values_mut()[0] += 1;
  EXPECT_NE(s.conv1_k.values()[0], copy.conv1_k.values()[0]);
  EXPECT_NE(s.bn1.running_mean.values()[0], copy.bn1.running_mean.values()[0]);
}

TEST(Encode, OutputShapesFollowConfig) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  Tensor x = random_cloud_tensor(2, 32, 3, 5);
  EncodeOutput out = encode(x, c, s, false);
  EXPECT_EQ(out.digit.activities.shape(), (Shape{2, 2, c.digit_dim}));
  EXPECT_EQ(out.part_logits.shape(), (Shape{2, 32, c.capa_count}));
  EXPECT_EQ(out.skip_features.shape(), (Shape{2, 32, c.conv2_width}));
  EXPECT_EQ(out.digit_couplings.shape(), (Shape{2, c.concat_count(), 2}));
}

TEST(Encode, RejectsMismatchedInput) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  EXPECT_THROW(encode(random_cloud_tensor(1, 16, 3, 5), c, s, false), InputError);
  EXPECT_THROW(encode(random_cloud_tensor(1, 32, 6, 5), c, s, false), InputError);
}

TEST(Encode, DegenerateDuplicateCloudStaysFinite) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  Tensor x = Tensor::full({1, 32, 3}, real(0.25));
  // ops throw NumericError on any non-finite value, so surviving is the check
  EXPECT_NO_THROW(encode(x, c, s, false));
}

TEST(Encode, ClassLengthsInvariantUnderPointPermutation) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 11);
  std::mt19937_64 rng(13);
  Tensor x = Tensor::uniform({32, 3}, -1, 1, rng);

  Tensor base = rows_norm(encode(x, c, s, false).digit.activities);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int64_t> perm(32);
    for (int64_t i = 0; i < 32; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<real> shuffled(32 * 3);
    for (int64_t i = 0; i < 32; ++i) {
      for (int64_t k = 0; k < 3; ++k) shuffled[i * 3 + k] = x.values()[perm[i] * 3 + k];
    }
    Tensor lengths = rows_norm(encode(Tensor::from({32, 3}, shuffled), c, s, false)
                                   .digit.activities);
    for (int64_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(lengths.values()[j], base.values()[j], 1e-9);
    }
  }
}

TEST(Decode, ShapesAndSkipMismatch) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  std::mt19937_64 rng(5);
  Tensor latent = Tensor::uniform({1, c.digit_dim}, -1, 1, rng);
  Tensor skip = Tensor::uniform({1, 32, c.conv2_width}, -1, 1, rng);
  Tensor recon = decode(latent, skip, c, s, false);
  EXPECT_EQ(recon.shape(), (Shape{1, 32, 3}));

  Tensor bad_latent = Tensor::uniform({1, c.digit_dim + 1}, -1, 1, rng);
  EXPECT_THROW(decode(bad_latent, skip, c, s, false), ShapeError);
  Tensor bad_skip = Tensor::uniform({1, 32, c.conv2_width + 1}, -1, 1, rng);
  EXPECT_THROW(decode(latent, bad_skip, c, s, false), ConfigError);
}

TEST(Decode, AllZeroStateMapsZeroLatentToZeroCloud) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  for (auto& [name, t] : s.named_tensors()) {
    std::fill(t.values_mut().begin(), t.values_mut().end(), real(0));
  }
  Tensor recon = decode(Tensor::zeros({1, c.digit_dim}), Tensor::zeros({1, 32, c.conv2_width}),
                        c, s, true);
  for (real v : recon.values()) EXPECT_EQ(v, 0);
}

TEST(Decode, SkipOffIgnoresSkipFeatures) {
  ModelConfig c = ModelConfig::micro(32, 2);
  c.skip_connection = false;
  ModelState s = ModelState::init(c, 3);
  std::mt19937_64 rng(5);
  Tensor latent = Tensor::uniform({1, c.digit_dim}, -1, 1, rng);
  Tensor skip_a = Tensor::uniform({1, 32, c.conv2_width}, -1, 1, rng);
  Tensor skip_b = Tensor::uniform({1, 32, c.conv2_width}, -1, 1, rng);
  Tensor ra = decode(latent, skip_a, c, s, false);
  Tensor rb = decode(latent, skip_b, c, s, false);
  EXPECT_EQ(ra.values(), rb.values());

  ModelConfig on = c;
  on.skip_connection = true;
  ModelState s_on = ModelState::init(on, 3);
  Tensor wa = decode(latent, skip_a, on, s_on, false);
  Tensor wb = decode(latent, skip_b, on, s_on, false);
  EXPECT_NE(wa.values(), wb.values());
}

TEST(Forward, TrainingRequiresLabels) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 3);
  Tensor x = random_cloud_tensor(1, 32, 3, 5);
  EXPECT_THROW(forward(x, c, s, true), ContractError);
}

TEST(Forward, ReconstructionMatchesInputShape) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 3);
  Tensor x = random_cloud_tensor(2, 32, 3, 5);
  const std::vector<int64_t> labels{1, 0};
  ForwardOutput out = forward(x, c, s, true, &labels);
  EXPECT_EQ(out.reconstruction.shape(), (Shape{2, 32, 3}));
  EXPECT_EQ(out.class_lengths.shape(), (Shape{2, 3}));
  EXPECT_EQ(out.latent.shape(), (Shape{2, c.digit_dim}));
  EXPECT_EQ(out.digit_activities.shape(), (Shape{2, 3, c.digit_dim}));
  EXPECT_EQ(out.part_logits.shape(), (Shape{2, 32, c.capa_count}));
}

TEST(Forward, TrainingMasksLabelRowEvalMasksLongestRow) {
  const ModelConfig c = ModelConfig::micro(32, 4);
  ModelState s = ModelState::init(c, 9);
  Tensor x = random_cloud_tensor(1, 32, 3, 17);

  ForwardOutput ev = forward(x, c, s, false);
  const auto& lengths = ev.class_lengths.values();
  const int64_t predicted = static_cast<int64_t>(
      std::max_element(lengths.begin(), lengths.end()) - lengths.begin());
  const int64_t wrong = (predicted + 1) % 4;

  // eval latent equals the predicted row of the digit block
  for (int64_t d = 0; d < c.digit_dim; ++d) {
    EXPECT_EQ(ev.latent.values()[d], ev.digit_activities.values()[predicted * c.digit_dim + d]);
  }

  const std::vector<int64_t> labels{wrong};
  ForwardOutput tr = forward(x, c, s, true, &labels);
  bool differs = false;
  for (int64_t d = 0; d < c.digit_dim; ++d) {
    if (tr.latent.values()[d] != ev.latent.values()[d]) differs = true;
  }
  EXPECT_TRUE(differs);
  // training-mode reconstruction decodes the true-label row, so it differs too
  EXPECT_NE(tr.reconstruction.values(), ev.reconstruction.values());
}

TEST(MarginLoss, ClosedFormCases) {
  Tensor perfect = Tensor::from({3}, {0.9, 0.1, 0.1});
  EXPECT_EQ(margin_loss(perfect, 0).item(), 0.0);

  Tensor zeros = Tensor::from({3}, {0, 0, 0});
  EXPECT_NEAR(margin_loss(zeros, 1).item(), 0.81, 1e-15);

  Tensor half = Tensor::from({2}, {0.5, 0.5});
  EXPECT_NEAR(margin_loss(half, 0).item(), 0.24, 1e-15);
}

TEST(MarginLoss, RespectsCustomMargins) {
  Tensor lengths = Tensor::from({2}, {0.6, 0.4});
  // m+=0.8, m-=0.2, lambda=0.25: (0.2)^2 + 0.25*(0.2)^2 = 0.05
  EXPECT_NEAR(margin_loss(lengths, 0, real(0.8), real(0.2), real(0.25)).item(), 0.05, 1e-15);
}

TEST(MarginLoss, ErrorsOnBadLabels) {
  Tensor lengths = Tensor::from({3}, {0.5, 0.5, 0.5});
  EXPECT_THROW(margin_loss(lengths, 3), InputError);
  EXPECT_THROW(margin_loss(lengths, -1), InputError);
  EXPECT_THROW(margin_loss_batch(Tensor::from({2, 3}, {0, 0, 0, 0, 0, 0}), {0}), ShapeError);
}

TEST(MarginLoss, BatchIsMeanOfSingles) {
  Tensor batch = Tensor::from({2, 2}, {0.5, 0.5, 0.0, 0.0});
  const real a = margin_loss(Tensor::from({2}, {0.5, 0.5}), 0).item();
  const real b = margin_loss(Tensor::from({2}, {0.0, 0.0}), 1).item();
  EXPECT_NEAR(margin_loss_batch(batch, {0, 1}).item(), (a + b) / 2, 1e-15);
}

TEST(MarginLoss, GradientPassesFiniteDifferences) {
  std::mt19937_64 rng(31);
  Tensor lengths = Tensor::uniform({2, 3}, real(0.05), real(0.95), rng, true);
  auto r = oracle::check_gradient({lengths}, [&] { return margin_loss_batch(lengths, {0, 2}); });
  EXPECT_LT(r.max_rel_err, 1e-5) << r.where;
}

TEST(TotalLoss, CombinesComponentsWithGamma) {
  ModelConfig c = ModelConfig::micro(32, 2);
  Tensor lengths = Tensor::from({2}, {0.9, 0.1});  // zero margin at label 0
  Tensor cloud = Tensor::from({1, 3}, {0, 0, 0});
  Tensor recon = Tensor::from({1, 3}, {1, 0, 0});  // chamfer 2
  EXPECT_NEAR(total_loss(lengths, 0, cloud, recon, c).item(), 1.0, 1e-15);

  c.chamfer_gamma = 0;
  Tensor half = Tensor::from({2}, {0.5, 0.5});
  EXPECT_NEAR(total_loss(half, 0, cloud, recon, c).item(), 0.24, 1e-15);

  c.chamfer_gamma = real(0.5);
  std::mt19937_64 rng(33);
  Tensor rx = Tensor::uniform({6, 3}, -1, 1, rng);
  Tensor ry = Tensor::uniform({4, 3}, -1, 1, rng);
  const double margin = margin_loss(half, 0).item();
  const double cd = oracle::chamfer_reference(rx.values(), 6, ry.values(), 4, 3);
  EXPECT_NEAR(total_loss(half, 0, rx, ry, c).item(), margin + 0.5 * cd, 1e-13);
}

TEST(Counts, TinyConfigMatchesHandTally) {
  ModelConfig c;
  c.num_points = 64;
  c.num_classes = 4;
  c.use_normals = false;
  c.conv1_width = 8;
  c.conv2_width = 32;
  c.conv3_width = 128;
  c.capa_count = 32;
  c.capa_dim = 16;
  c.capc_count = 2;
  c.capc_dim = 8;
  c.capb_count = 4;
  c.capb_dim = 8;
  c.digit_dim = 8;
  c.dense_width = 128;
  c.deconv1_channels = 32;
  c.deconv3_channels = 32;
  c.deconv4_channels = 16;
  c.validate();
  const CountReport r = count_params_flops(c);
  EXPECT_EQ(r.params, 136739);
  EXPECT_EQ(r.flops, 6984672);
}

TEST(Counts, BiasToggleRemovesExactlyTheBiasScalars) {
  ModelConfig c = ModelConfig::micro(64, 5);
  const CountReport with = count_params_flops(c);
  c.conv_bias = false;
  const CountReport without = count_params_flops(c);
  // every conv/deconv/capsule-conv output channel owns one bias scalar
  const int64_t biases = c.conv1_width + c.conv2_width + c.conv3_width +
                         3 * c.capa_count * c.capa_dim + c.capc_count * c.capc_dim +
                         c.capb_count * c.capb_dim + c.dense_width + c.deconv1_channels +
                         c.conv2_width + c.deconv3_channels + c.deconv4_channels + 3;
  EXPECT_EQ(with.params - without.params, biases);
  EXPECT_EQ(with.flops, without.flops);
}

TEST(Counts, ParamsMatchTensorSizes) {
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState s = ModelState::init(c, 1);
  int64_t total = 0;
  for (const auto& [name, t] : s.parameters()) total += t.size();
  EXPECT_EQ(count_params_flops(c).params, total);
}

TEST(ModelGradients, MicroEndToEndSubset) {
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState s = ModelState::init(c, 21);
  std::mt19937_64 rng(22);
  Tensor x = Tensor::uniform({1, 32, 3}, -1, 1, rng, true);
  // a fixed copy: the reconstruction target must not move when x is perturbed
  const Tensor target = x.detached();
  const std::vector<int64_t> labels{1};

  const auto loss_fn = [&] {
    ForwardOutput out = forward(x, c, s, true, &labels);
    Tensor margin = margin_loss_batch(out.class_lengths, labels);
    Tensor cd = mean(chamfer_distance(target, out.reconstruction));
    return add(margin, scale(cd, c.chamfer_gamma));
  };
  auto r = oracle::check_gradient({x, s.conv1_k, s.digit_w, s.dec5_k, s.bn1_gamma}, loss_fn,
                                  1e-5);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.where;
}
