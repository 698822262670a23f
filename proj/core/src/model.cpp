#include "pointcaps/model.hpp"

#include <cmath>
#include <sstream>

namespace pointcaps {

std::string routing_policy_name(RoutingPolicy p) {
  switch (p) {
    case RoutingPolicy::PointCaps: return "pointcaps";
    case RoutingPolicy::AllDynamic: return "all_dynamic";
    case RoutingPolicy::AllEuclidean: return "all_euclidean";
  }
  throw ConfigError("unknown routing policy");
}

RoutingPolicy routing_policy_from(const std::string& name) {
  if (name == "pointcaps") return RoutingPolicy::PointCaps;
  if (name == "all_dynamic") return RoutingPolicy::AllDynamic;
  if (name == "all_euclidean") return RoutingPolicy::AllEuclidean;
  throw ConfigError("unknown routing policy '" + name + "'");
}

ModelConfig ModelConfig::defaults(int64_t points, int64_t classes) {
  ModelConfig c;
  c.num_points = points;
  c.num_classes = classes;
  c.validate();
  return c;
}

ModelConfig ModelConfig::micro(int64_t points, int64_t classes) {
  ModelConfig c;
  c.num_points = points;
  c.num_classes = classes;
  c.conv1_width = 4;
  c.conv2_width = 8;
  c.conv3_width = 16;
  c.capa_count = 16;
  c.capa_dim = 8;
  c.capc_count = 1;
  c.capc_dim = 4;
  c.capb_count = 2;
  c.capb_dim = 4;
  c.digit_dim = 4;
  c.deconv1_channels = 8;
  c.deconv3_channels = 8;
  c.deconv4_channels = 4;
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (num_points < 16 || num_points % 16 != 0) {
    throw ConfigError("num_points must be a positive multiple of 16, got " +
                      std::to_string(num_points));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const int64_t widths[] = {conv1_width, conv2_width, conv3_width, capa_count, capa_dim,
                            capc_count,  capc_dim,    capb_count,  capb_dim,   digit_dim,
                            dense_width, deconv1_channels, deconv3_channels, deconv4_channels};
  for (int64_t w : widths) {
    if (w < 1) throw ConfigError("all layer widths must be positive");
  }
  if (dense_width % decoder_grid_width() != 0) {
    std::ostringstream os;
    os << "dense_width " << dense_width << " does not fold into a grid of width "
       << decoder_grid_width() << " (num_points " << num_points << ")";
    throw ConfigError(os.str());
  }
  const int iters[] = {capa1_iterations, capa2_iterations, side_iterations, capb_iterations,
                       digit_iterations};
  for (int i : iters) {
    if (i < 1) throw ConfigError("routing iteration counts must be >= 1");
  }
  if (!(margin_m_plus > margin_m_minus)) {
    throw ConfigError("margin thresholds must satisfy m_plus > m_minus");
  }
}

namespace {

RoutingOptions make_routing(const ModelConfig& c, RoutingKind pointcaps_kind, int iterations) {
  RoutingOptions r;
  switch (c.routing_policy) {
    case RoutingPolicy::PointCaps: r.kind = pointcaps_kind; break;
    case RoutingPolicy::AllDynamic: r.kind = RoutingKind::Dynamic; break;
    case RoutingPolicy::AllEuclidean: r.kind = RoutingKind::Euclidean; break;
  }
  r.iterations = iterations;
  r.unroll_grad = c.unroll_routing_grad;
  r.cosine_agreement = c.cosine_agreement;
  return r;
}

}  // namespace

RoutingOptions ModelConfig::capa_routing(int iterations) const {
  return make_routing(*this, RoutingKind::Euclidean, iterations);
}

RoutingOptions ModelConfig::capb_routing() const {
  return make_routing(*this, RoutingKind::Dynamic, capb_iterations);
}

RoutingOptions ModelConfig::digit_routing() const {
  return make_routing(*this, RoutingKind::Dynamic, digit_iterations);
}

namespace {

Tensor init_kernels(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  const real s = real(1) / std::sqrt(static_cast<real>(fan_in));
  return Tensor::uniform(std::move(shape), -s, s, rng, /*requires_grad=*/true);
}

Tensor init_bias(int64_t width, bool enabled) {
  if (!enabled) return Tensor();
  return Tensor::zeros({width}, /*requires_grad=*/true);
}

}  // namespace

ModelState ModelState::init(const ModelConfig& c, uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ModelState s;

  s.conv1_k = init_kernels({c.conv1_width, 1, c.input_channels()}, c.input_channels(), rng);
  s.conv1_b = init_bias(c.conv1_width, c.conv_bias);
  s.bn1_gamma = Tensor::full({c.conv1_width}, real(1), true);
  s.bn1_beta = Tensor::zeros({c.conv1_width}, true);
  s.bn1 = BNState::init(c.conv1_width);

  s.conv2_k = init_kernels({c.conv2_width, 1, c.conv1_width}, c.conv1_width, rng);
  s.conv2_b = init_bias(c.conv2_width, c.conv_bias);
  s.conv3_k = init_kernels({c.conv3_width, 1, c.conv2_width}, c.conv2_width, rng);
  s.conv3_b = init_bias(c.conv3_width, c.conv_bias);

  const int64_t capa_kernels = c.capa_count * c.capa_dim;
  s.capa1_k = init_kernels({capa_kernels, 1, c.conv3_width}, c.conv3_width, rng);
  s.capa1_b = init_bias(capa_kernels, c.conv_bias);
  s.capc_k = init_kernels({c.capc_count * c.capc_dim, 1, c.capa_dim}, c.capa_dim, rng);
  s.capc_b = init_bias(c.capc_count * c.capc_dim, c.conv_bias);
  s.capb_k = init_kernels({c.capb_count * c.capb_dim, 1, c.capc_dim}, c.capc_dim, rng);
  s.capb_b = init_bias(c.capb_count * c.capb_dim, c.conv_bias);
  s.capa2_k = init_kernels({capa_kernels, 1, c.capb_dim}, c.capb_dim, rng);
  s.capa2_b = init_bias(capa_kernels, c.conv_bias);
  s.side_k = init_kernels({capa_kernels, 1, c.conv2_width}, c.conv2_width, rng);
  s.side_b = init_bias(capa_kernels, c.conv_bias);

  s.digit_w = init_kernels({c.concat_count(), c.num_classes, c.capa_dim, c.digit_dim},
                           c.capa_dim, rng);

  s.dense_k = init_kernels({c.dense_width, 1, c.digit_dim}, c.digit_dim, rng);
  s.dense_b = init_bias(c.dense_width, c.conv_bias);
  s.bnd_gamma = Tensor::full({c.dense_width}, real(1), true);
  s.bnd_beta = Tensor::zeros({c.dense_width}, true);
  s.bnd = BNState::init(c.dense_width);

  const int64_t grid_c = c.decoder_grid_channels();
  s.dec1_k = init_kernels({4, grid_c, c.deconv1_channels}, grid_c, rng);
  s.dec1_b = init_bias(c.deconv1_channels, c.conv_bias);
  s.dec2_k = init_kernels({4, c.deconv1_channels, c.conv2_width}, c.deconv1_channels, rng);
  s.dec2_b = init_bias(c.conv2_width, c.conv_bias);
  s.dec3_k = init_kernels({1, c.conv2_width, c.deconv3_channels}, c.conv2_width, rng);
  s.dec3_b = init_bias(c.deconv3_channels, c.conv_bias);
  s.dec4_k = init_kernels({1, c.deconv3_channels, c.deconv4_channels}, c.deconv3_channels, rng);
  s.dec4_b = init_bias(c.deconv4_channels, c.conv_bias);
  s.dec5_k = init_kernels({1, c.deconv4_channels, 3}, c.deconv4_channels, rng);
  s.dec5_b = init_bias(3, c.conv_bias);

  return s;
}

std::vector<std::pair<std::string, Tensor>> ModelState::parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push = [&out](const char* name, Tensor& t) {
    if (t.defined()) out.emplace_back(name, t);
  };
  push("encoder.conv1.kernels", conv1_k);
  push("encoder.conv1.bias", conv1_b);
  push("encoder.bn1.gamma", bn1_gamma);
  push("encoder.bn1.beta", bn1_beta);
  push("encoder.conv2.kernels", conv2_k);
  push("encoder.conv2.bias", conv2_b);
  push("encoder.conv3.kernels", conv3_k);
  push("encoder.conv3.bias", conv3_b);
  push("encoder.capa1.kernels", capa1_k);
  push("encoder.capa1.bias", capa1_b);
  push("encoder.capc.kernels", capc_k);
  push("encoder.capc.bias", capc_b);
  push("encoder.capb.kernels", capb_k);
  push("encoder.capb.bias", capb_b);
  push("encoder.capa2.kernels", capa2_k);
  push("encoder.capa2.bias", capa2_b);
  push("encoder.side.kernels", side_k);
  push("encoder.side.bias", side_b);
  push("digit.weights", digit_w);
  push("decoder.dense.kernels", dense_k);
  push("decoder.dense.bias", dense_b);
  push("decoder.bn.gamma", bnd_gamma);
  push("decoder.bn.beta", bnd_beta);
  push("decoder.deconv1.kernels", dec1_k);
  push("decoder.deconv1.bias", dec1_b);
  push("decoder.deconv2.kernels", dec2_k);
  push("decoder.deconv2.bias", dec2_b);
  push("decoder.deconv3.kernels", dec3_k);
  push("decoder.deconv3.bias", dec3_b);
  push("decoder.deconv4.kernels", dec4_k);
  push("decoder.deconv4.bias", dec4_b);
  push("decoder.deconv5.kernels", dec5_k);
  push("decoder.deconv5.bias", dec5_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_tensors() {
  auto out = parameters();
  out.emplace_back("encoder.bn1.running_mean", bn1.running_mean);
  out.emplace_back("encoder.bn1.running_var", bn1.running_var);
  out.emplace_back("decoder.bn.running_mean", bnd.running_mean);
  out.emplace_back("decoder.bn.running_var", bnd.running_var);
  return out;
}

void ModelState::zero_grads() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

ModelState ModelState::clone() const {
  ModelState copy = *this;  // shares buffers; replace them all below
  ModelState& self = copy;
  auto dup = [](Tensor& t) {
    if (t.defined()) t = t.clone();
  };
  dup(self.conv1_k); dup(self.conv1_b); dup(self.bn1_gamma); dup(self.bn1_beta);
  dup(self.bn1.running_mean); dup(self.bn1.running_var);
  dup(self.conv2_k); dup(self.conv2_b); dup(self.conv3_k); dup(self.conv3_b);
  dup(self.capa1_k); dup(self.capa1_b); dup(self.capc_k); dup(self.capc_b);
  dup(self.capb_k); dup(self.capb_b); dup(self.capa2_k); dup(self.capa2_b);
  dup(self.side_k); dup(self.side_b); dup(self.digit_w);
  dup(self.dense_k); dup(self.dense_b); dup(self.bnd_gamma); dup(self.bnd_beta);
  dup(self.bnd.running_mean); dup(self.bnd.running_var);
  dup(self.dec1_k); dup(self.dec1_b); dup(self.dec2_k); dup(self.dec2_b);
  dup(self.dec3_k); dup(self.dec3_b); dup(self.dec4_k); dup(self.dec4_b);
  dup(self.dec5_k); dup(self.dec5_b);
  return copy;
}

namespace {

// Leading axes of `t` with the last `drop` axes replaced by `tail`.
Shape reshaped(const Tensor& t, int drop, std::initializer_list<int64_t> tail) {
  Shape s(t.shape().begin(), t.shape().end() - drop);
  s.insert(s.end(), tail.begin(), tail.end());
  return s;
}

}  // namespace

EncodeOutput encode(const Tensor& input, const ModelConfig& c, ModelState& st, bool training) {
  if (input.rank() < 2 || input.shape().back() != c.input_channels()) {
    std::ostringstream os;
    os << "encode: expected input [..., N, " << c.input_channels() << "], got "
       << shape_str(input.shape());
    throw InputError(os.str());
  }
  if (input.shape()[input.rank() - 2] != c.num_points) {
    std::ostringstream os;
    os << "encode: configured for " << c.num_points << " points, got "
       << input.shape()[input.rank() - 2];
    throw InputError(os.str());
  }

  Tensor h = conv1d_feature(input, st.conv1_k, st.conv1_b);
  h = batch_norm(h, st.bn1_gamma, st.bn1_beta, &st.bn1, training, c.bn_momentum);
  Tensor skip = conv1d_feature(h, st.conv2_k, st.conv2_b);
  Tensor h3 = conv1d_feature(skip, st.conv3_k, st.conv3_b);

  // Sparse column: points -> parts -> compressed subspace -> parts again.
  LayerParams capa1{st.capa1_k, st.capa1_b, c.capa_routing(c.capa1_iterations)};
  CapsuleLayerOut a1 = pointcap_a(CapsuleBlock{h3}, capa1, c.capa_count, c.capa_dim);

  // Reinterpret each part capsule as an entity holding a single capsule.
  CapsuleBlock entities{
      reshape(a1.block.activities, reshaped(a1.block.activities, 2, {c.capa_count, 1, c.capa_dim}))};
  LayerParams capc{st.capc_k, st.capc_b, RoutingOptions{}};
  CapsuleBlock cblk = pointcap_c(entities, capc, c.capc_count, c.capc_dim);

  LayerParams capb{st.capb_k, st.capb_b, c.capb_routing()};
  CapsuleLayerOut bblk = pointcap_b(cblk, capb, c.capb_count, c.capb_dim);

  // Flatten (entity, capsule) back into one long capsule list.
  Tensor flat = reshape(bblk.block.activities,
                        reshaped(bblk.block.activities, 3,
                                 {c.capa_count * c.capb_count, c.capb_dim}));
  LayerParams capa2{st.capa2_k, st.capa2_b, c.capa_routing(c.capa2_iterations)};
  CapsuleLayerOut a2 = pointcap_a(CapsuleBlock{flat}, capa2, c.capa_count, c.capa_dim);

  // Side branch straight off the 64-wide point features.
  LayerParams side{st.side_k, st.side_b, c.capa_routing(c.side_iterations)};
  CapsuleLayerOut a3 = pointcap_a(CapsuleBlock{skip}, side, c.capa_count, c.capa_dim);

  Tensor cat = concat(a2.block.activities, a3.block.activities, -2);
  CapsuleLayerOut digit = digitcap(CapsuleBlock{cat}, st.digit_w, c.digit_routing());

  return EncodeOutput{digit.block, a1.logits, skip, digit.couplings};
}

Tensor decode(const Tensor& latent, const Tensor& skip_features, const ModelConfig& c,
              ModelState& st, bool training) {
  if (latent.rank() < 1 || latent.shape().back() != c.digit_dim) {
    throw ShapeError("decode: expected latent [..., " + std::to_string(c.digit_dim) +
                     "], got " + shape_str(latent.shape()));
  }
  Tensor t = reshape(latent, reshaped(latent, 1, {1, c.digit_dim}));
  t = conv1d_feature(t, st.dense_k, st.dense_b);
  t = reshape(t, reshaped(t, 2, {c.dense_width}));
  t = batch_norm(t, st.bnd_gamma, st.bnd_beta, &st.bnd, training, c.bn_momentum);
  t = reshape(t, reshaped(t, 1, {c.decoder_grid_width(), c.decoder_grid_channels()}));

  t = deconv_width(t, st.dec1_k, 4, st.dec1_b);
  t = deconv_width(t, st.dec2_k, 4, st.dec2_b);
  if (c.skip_connection) {
    if (!skip_features.defined() || skip_features.shape() != t.shape()) {
      throw ConfigError("decode: skip features must be [..., N, conv2_width]");
    }
    t = add(t, skip_features);
  }
  t = deconv_width(t, st.dec3_k, 1, st.dec3_b);
  t = deconv_width(t, st.dec4_k, 1, st.dec4_b);
  t = deconv_width(t, st.dec5_k, 1, st.dec5_b);
  return t;
}

ForwardOutput forward(const Tensor& input, const ModelConfig& c, ModelState& st, bool training,
                      const std::vector<int64_t>* labels) {
  if (training && labels == nullptr) {
    throw ContractError("training forward requires the true labels for masking");
  }
  EncodeOutput enc = encode(input, c, st, training);
  Tensor lengths = rows_norm(enc.digit.activities);
  Tensor latent = labels != nullptr ? mask_activity(enc.digit.activities, *labels)
                                    : mask_activity(enc.digit.activities);
  Tensor recon = decode(latent, enc.skip_features, c, st, training);
  return ForwardOutput{lengths, enc.digit.activities, latent, recon, enc.part_logits};
}

// ---- losses ---------------------------------------------------------------

namespace {

Tensor margin_terms(const Tensor& lengths, const std::vector<real>& onehot, real m_plus,
                    real m_minus, real lambda) {
  const Shape& s = lengths.shape();
  Tensor t_mask = Tensor::from(s, onehot);
  std::vector<real> inv(onehot.size());
  for (size_t i = 0; i < onehot.size(); ++i) inv[i] = real(1) - onehot[i];
  Tensor inv_mask = Tensor::from(s, std::move(inv));

  Tensor pos = relu(sub(Tensor::full(s, m_plus), lengths));
  Tensor present = sum(mul(mul(pos, pos), t_mask));
  Tensor neg = relu(sub(lengths, Tensor::full(s, m_minus)));
  Tensor absent = sum(mul(mul(neg, neg), inv_mask));
  return add(present, scale(absent, lambda));
}

}  // namespace

Tensor margin_loss(const Tensor& lengths, int64_t label, real m_plus, real m_minus,
                   real lambda) {
  if (lengths.rank() != 1) {
    throw ShapeError("margin_loss: lengths must be [classes], got " + shape_str(lengths.shape()));
  }
  const int64_t a = lengths.shape()[0];
  if (label < 0 || label >= a) throw InputError("margin_loss: label out of range");
  std::vector<real> onehot(static_cast<size_t>(a), real(0));
  onehot[static_cast<size_t>(label)] = real(1);
  return margin_terms(lengths, onehot, m_plus, m_minus, lambda);
}

Tensor margin_loss_batch(const Tensor& lengths, const std::vector<int64_t>& labels,
                         real m_plus, real m_minus, real lambda) {
  if (lengths.rank() != 2) {
    throw ShapeError("margin_loss_batch: lengths must be [batch, classes]");
  }
  const int64_t B = lengths.shape()[0];
  const int64_t a = lengths.shape()[1];
  if (static_cast<int64_t>(labels.size()) != B) {
    throw ShapeError("margin_loss_batch: need one label per row");
  }
  std::vector<real> onehot(static_cast<size_t>(B * a), real(0));
  for (int64_t i = 0; i < B; ++i) {
    if (labels[i] < 0 || labels[i] >= a) throw InputError("margin_loss_batch: label out of range");
    onehot[static_cast<size_t>(i * a + labels[i])] = real(1);
  }
  Tensor total = margin_terms(lengths, onehot, m_plus, m_minus, lambda);
  return scale(total, real(1) / static_cast<real>(B));
}

Tensor total_loss(const Tensor& lengths, int64_t label, const Tensor& cloud,
                  const Tensor& reconstruction, const ModelConfig& c) {
  Tensor margin = margin_loss(lengths, label, c.margin_m_plus, c.margin_m_minus,
                              c.margin_lambda);
  Tensor cd = chamfer_distance(cloud, reconstruction);
  return add(margin, scale(cd, c.chamfer_gamma));
}

// ---- size accounting ----------------------------------------------------------

namespace {

// Routing cost per leading group and iteration: coupled sum + agreement term
// (both I*J*D multiply-adds) and the squash (2 per parent element).
int64_t routing_flops(int64_t groups, int64_t I, int64_t J, int64_t D, int iters) {
  return groups * static_cast<int64_t>(iters) * (2 * I * J * D + 2 * J * D);
}

}  // namespace

CountReport count_params_flops(const ModelConfig& c) {
  c.validate();
  CountReport r;
  const int64_t bias = c.conv_bias ? 1 : 0;
  const int64_t N = c.num_points;
  const int64_t in_ch = c.input_channels();
  const int64_t E = c.capa_count;
  const int64_t capa_k = c.capa_count * c.capa_dim;
  const int64_t flat_count = c.capa_count * c.capb_count;
  const int64_t grid_w = c.decoder_grid_width();
  const int64_t grid_c = c.decoder_grid_channels();

  // -- parameters --
  r.params += c.conv1_width * in_ch + bias * c.conv1_width + 2 * c.conv1_width;  // conv1 + bn
  r.params += c.conv2_width * c.conv1_width + bias * c.conv2_width;
  r.params += c.conv3_width * c.conv2_width + bias * c.conv3_width;
  r.params += capa_k * c.conv3_width + bias * capa_k;                      // capa1
  r.params += c.capc_count * c.capc_dim * c.capa_dim + bias * c.capc_count * c.capc_dim;
  r.params += c.capb_count * c.capb_dim * c.capc_dim + bias * c.capb_count * c.capb_dim;
  r.params += capa_k * c.capb_dim + bias * capa_k;                         // capa2
  r.params += capa_k * c.conv2_width + bias * capa_k;                      // side
  r.params += c.concat_count() * c.num_classes * c.capa_dim * c.digit_dim; // digit head
  r.params += c.dense_width * c.digit_dim + bias * c.dense_width + 2 * c.dense_width;
  r.params += 4 * grid_c * c.deconv1_channels + bias * c.deconv1_channels;
  r.params += 4 * c.deconv1_channels * c.conv2_width + bias * c.conv2_width;
  r.params += c.conv2_width * c.deconv3_channels + bias * c.deconv3_channels;
  r.params += c.deconv3_channels * c.deconv4_channels + bias * c.deconv4_channels;
  r.params += c.deconv4_channels * 3 + bias * 3;

  // -- forward multiply-adds, one sample --
  r.flops += N * c.conv1_width * in_ch + 2 * N * c.conv1_width;  // conv1 + bn
  r.flops += N * c.conv2_width * c.conv1_width;
  r.flops += N * c.conv3_width * c.conv2_width;
  r.flops += N * capa_k * c.conv3_width;                                      // capa1 votes
  r.flops += routing_flops(1, N, c.capa_count, c.capa_dim, c.capa1_iterations);
  r.flops += E * c.capc_count * c.capc_dim * c.capa_dim;                      // capc projection
  r.flops += 2 * E * c.capc_count * c.capc_dim;                               // capc squash
  r.flops += E * c.capc_count * c.capb_count * c.capb_dim * c.capc_dim;       // capb votes
  r.flops += routing_flops(E, c.capc_count, c.capb_count, c.capb_dim, c.capb_iterations);
  r.flops += flat_count * capa_k * c.capb_dim;                                // capa2 votes
  r.flops += routing_flops(1, flat_count, c.capa_count, c.capa_dim, c.capa2_iterations);
  r.flops += N * capa_k * c.conv2_width;                                      // side votes
  r.flops += routing_flops(1, N, c.capa_count, c.capa_dim, c.side_iterations);
  r.flops += c.concat_count() * c.num_classes * c.capa_dim * c.digit_dim;     // digit votes
  r.flops += routing_flops(1, c.concat_count(), c.num_classes, c.digit_dim,
                           c.digit_iterations);
  r.flops += c.num_classes * c.digit_dim;  // activity lengths
  r.flops += c.dense_width * c.digit_dim + 2 * c.dense_width;  // dense + bn
  r.flops += grid_w * 4 * grid_c * c.deconv1_channels;
  r.flops += (grid_w * 4) * 4 * c.deconv1_channels * c.conv2_width;
  r.flops += N * c.conv2_width * c.deconv3_channels;
  r.flops += N * c.deconv3_channels * c.deconv4_channels;
  r.flops += N * c.deconv4_channels * 3;
  return r;
}

}  // namespace pointcaps
