#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pointcaps/layers.hpp"

namespace pointcaps {

// Which update rule each routing site uses. PointCaps is the mixed scheme
// from the reference architecture (Euclidean into every PointCapA, dynamic
// into PointCapB and the class head); the other two exist for ablations.
enum class RoutingPolicy { PointCaps, AllDynamic, AllEuclidean };

std::string routing_policy_name(RoutingPolicy p);
RoutingPolicy routing_policy_from(const std::string& name);

struct ModelConfig {
  int64_t num_points = 2048;  // N, must be a positive multiple of 16
  int64_t num_classes = 13;
  bool use_normals = false;  // widens the first conv input to 6 channels

  // Per-point feature convs.
  int64_t conv1_width = 16;
  int64_t conv2_width = 64;
  int64_t conv3_width = 256;

  // Capsule geometry. capa_* covers the two in-column PointCapA layers and
  // the side branch; capa_count doubles as the entity count E of the sparse
  // column.
  int64_t capa_count = 64;
  int64_t capa_dim = 32;
  int64_t capc_count = 4;
  int64_t capc_dim = 16;
  int64_t capb_count = 8;
  int64_t capb_dim = 16;
  int64_t digit_dim = 16;  // activity-vector width fed to the decoder

  // Decoder. The dense layer always maps digit_dim -> dense_width; the
  // second deconv's channel count is pinned to conv2_width so the skip add
  // type-checks.
  int64_t dense_width = 128;
  int64_t deconv1_channels = 32;
  int64_t deconv3_channels = 32;
  int64_t deconv4_channels = 16;

  RoutingPolicy routing_policy = RoutingPolicy::PointCaps;
  int capa1_iterations = 1;
  int capa2_iterations = 3;
  int side_iterations = 3;
  int capb_iterations = 3;
  int digit_iterations = 3;
  bool unroll_routing_grad = true;
  bool cosine_agreement = false;

  bool skip_connection = true;
  bool conv_bias = true;

  real margin_m_plus = real(0.9);
  real margin_m_minus = real(0.1);
  real margin_lambda = real(0.5);
  real chamfer_gamma = real(0.5);
  real bn_momentum = real(0.9);

  static ModelConfig defaults(int64_t points, int64_t classes);
  // Quarter-size variant for desk-scale experiments and gradient checking:
  // conv widths {4, 8, 16} and every capsule extent divided by four.
  static ModelConfig micro(int64_t points, int64_t classes);

  void validate() const;  // throws ConfigError when inconsistent

  int64_t input_channels() const { return use_normals ? 6 : 3; }
  // The dense output folds into a (width, channels) grid that the two
  // strided deconvs expand back to num_points.
  int64_t decoder_grid_width() const { return num_points / 16; }
  int64_t decoder_grid_channels() const { return dense_width / decoder_grid_width(); }
  int64_t concat_count() const { return 2 * capa_count; }

  RoutingOptions capa_routing(int iterations) const;
  RoutingOptions capb_routing() const;
  RoutingOptions digit_routing() const;
};

// All learnable tensors plus batch-norm running statistics.
struct ModelState {
  // encoder
  Tensor conv1_k, conv1_b, bn1_gamma, bn1_beta;
  BNState bn1;
  Tensor conv2_k, conv2_b;
  Tensor conv3_k, conv3_b;
  Tensor capa1_k, capa1_b;
  Tensor capc_k, capc_b;
  Tensor capb_k, capb_b;
  Tensor capa2_k, capa2_b;
  Tensor side_k, side_b;
  Tensor digit_w;
  // decoder
  Tensor dense_k, dense_b, bnd_gamma, bnd_beta;
  BNState bnd;
  Tensor dec1_k, dec1_b, dec2_k, dec2_b, dec3_k, dec3_b, dec4_k, dec4_b, dec5_k, dec5_b;

  static ModelState init(const ModelConfig& config, uint64_t seed);

  // Learnable tensors in a fixed order; names are stable and prefixed with
  // "encoder.", "digit." or "decoder.".
  std::vector<std::pair<std::string, Tensor>> parameters();
  // parameters() plus the batch-norm running statistics; this is the
  // checkpoint payload.
  std::vector<std::pair<std::string, Tensor>> named_tensors();

  void zero_grads();
  ModelState clone() const;  // deep copy of all values
};

struct EncodeOutput {
  CapsuleBlock digit;      // [..., classes, digit_dim]
  Tensor part_logits;      // [..., N, capa_count] from the first PointCapA
  Tensor skip_features;    // [..., N, conv2_width]
  Tensor digit_couplings;  // [..., concat_count, classes]
};

// Runs the capsule encoder over input [..., N, C] (C = 3 or 6 with normals).
EncodeOutput encode(const Tensor& input, const ModelConfig& config, ModelState& state,
                    bool training);

// Reconstructs [..., N, 3] from one masked activity vector [..., digit_dim]
// and the per-point skip features (ignored when the skip is disabled).
Tensor decode(const Tensor& latent, const Tensor& skip_features, const ModelConfig& config,
              ModelState& state, bool training);

struct ForwardOutput {
  Tensor class_lengths;     // [..., classes]
  Tensor digit_activities;  // [..., classes, digit_dim]
  Tensor latent;            // [..., digit_dim] (masked activity)
  Tensor reconstruction;    // [..., N, 3]
  Tensor part_logits;       // [..., N, capa_count]
};

// Full autoencoder pass. Training mode masks by the given true labels (one
// per leading position) and uses batch statistics; label-free calls mask by
// the longest activity vector.
ForwardOutput forward(const Tensor& input, const ModelConfig& config, ModelState& state,
                      bool training, const std::vector<int64_t>* labels = nullptr);

// ---- losses -------------------------------------------------------------

// Per-class hinge on the activity lengths:
//   L_k = T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2
// summed over classes. lengths is [classes] with the true class index given.
Tensor margin_loss(const Tensor& lengths, int64_t label, real m_plus = real(0.9),
                   real m_minus = real(0.1), real lambda = real(0.5));

// Batched variant: lengths [B, classes], one label per row; returns the mean
// over the batch of the per-sample class sums.
Tensor margin_loss_batch(const Tensor& lengths, const std::vector<int64_t>& labels,
                         real m_plus = real(0.9), real m_minus = real(0.1),
                         real lambda = real(0.5));

// margin + gamma * chamfer for one sample.
Tensor total_loss(const Tensor& lengths, int64_t label, const Tensor& cloud,
                  const Tensor& reconstruction, const ModelConfig& config);

// ---- size accounting -------------------------------------------------------

struct CountReport {
  int64_t params = 0;  // learnable scalars
  int64_t flops = 0;   // forward multiply-add pairs for one sample
};

// Analytic parameter and forward-FLOP count for a configuration. FLOPs count
// multiply-add pairs in the linear layers, vote generation, routing
// accumulations (coupled sum, agreement term, squash: 2 per element) and
// batch-norm (2 per element); transcendental evaluations (softmax, swish)
// and plain additions (bias, skip) are not counted.
CountReport count_params_flops(const ModelConfig& config);

}  // namespace pointcaps
