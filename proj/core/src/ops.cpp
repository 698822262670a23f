#include "pointcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace pointcaps {

namespace {

using detail::TensorImpl;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape());
    throw ShapeError(os.str());
  }
}

void require_rank_at_least(const Tensor& t, int rank, const char* op) {
  if (t.rank() < rank) {
    std::ostringstream os;
    os << op << ": expected rank >= " << rank << ", got shape " << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

Tensor make_output(Shape shape, std::vector<real> data, const char* op) {
  detail::ensure_finite(data, op);
  return Tensor::from(std::move(shape), std::move(data));
}

// Gradient of the output if any consumer deposited one; null otherwise (the
// branch did not contribute to the loss, so the backward rule is a no-op).
const std::vector<real>* out_grad(const std::shared_ptr<TensorImpl>& out) {
  return out->has_grad() ? &out->grad : nullptr;
}

real sigmoid(real x) {
  if (x >= 0) {
    const real e = std::exp(-x);
    return real(1) / (real(1) + e);
  }
  const real e = std::exp(x);
  return e / (real(1) + e);
}

}  // namespace

// ---- elementwise / arithmetic ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor o = make_output(a.shape(), std::move(out), "add");
  auto ai = a.impl(), bi = b.impl(), oi = o.impl();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::record_op(oi, ga || gb, [ai, bi, oi, ga, gb] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ga) ai->accumulate(*g);
    if (gb) bi->accumulate(*g);
  });
  return o;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor o = make_output(a.shape(), std::move(out), "sub");
  auto ai = a.impl(), bi = b.impl(), oi = o.impl();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::record_op(oi, ga || gb, [ai, bi, oi, ga, gb] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ga) ai->accumulate(*g);
    if (gb) {
      if (bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
      for (size_t i = 0; i < g->size(); ++i) bi->grad[i] -= (*g)[i];
    }
  });
  return o;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor o = make_output(a.shape(), std::move(out), "mul");
  auto ai = a.impl(), bi = b.impl(), oi = o.impl();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::record_op(oi, ga || gb, [ai, bi, oi, ga, gb] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ga) {
      if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
      for (size_t i = 0; i < g->size(); ++i) ai->grad[i] += (*g)[i] * bi->data[i];
    }
    if (gb) {
      if (bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
      for (size_t i = 0; i < g->size(); ++i) bi->grad[i] += (*g)[i] * ai->data[i];
    }
  });
  return o;
}

Tensor scale(const Tensor& a, real c) {
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  Tensor o = make_output(a.shape(), std::move(out), "scale");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, c] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (size_t i = 0; i < g->size(); ++i) ai->grad[i] += (*g)[i] * c;
  });
  return o;
}

Tensor relu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0 ? av[i] : real(0);
  Tensor o = make_output(a.shape(), std::move(out), "relu");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (size_t i = 0; i < g->size(); ++i) {
      if (ai->data[i] > 0) ai->grad[i] += (*g)[i];
    }
  });
  return o;
}

Tensor swish(const Tensor& a) {
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * sigmoid(av[i]);
  Tensor o = make_output(a.shape(), std::move(out), "swish");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (size_t i = 0; i < g->size(); ++i) {
      const real s = sigmoid(ai->data[i]);
      ai->grad[i] += (*g)[i] * (s + ai->data[i] * s * (real(1) - s));
    }
  });
  return o;
}

Tensor sum(const Tensor& a) {
  const auto& av = a.values();
  real acc = 0;
  for (real v : av) acc += v;
  Tensor o = make_output({}, {acc}, "sum");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (real& gi : ai->grad) gi += (*g)[0];
  });
  return o;
}

Tensor mean(const Tensor& a) {
  const auto& av = a.values();
  real acc = 0;
  for (real v : av) acc += v;
  const real inv = real(1) / static_cast<real>(av.size());
  Tensor o = make_output({}, {acc * inv}, "mean");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, inv] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (real& gi : ai->grad) gi += (*g)[0] * inv;
  });
  return o;
}

// ---- shape plumbing ---------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    std::ostringstream os;
    os << "reshape: cannot view " << shape_str(a.shape()) << " as " << shape_str(shape);
    throw ShapeError(os.str());
  }
  Tensor o = Tensor::from(std::move(shape), a.values());
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    ai->accumulate(*g);
  });
  return o;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  require_rank_at_least(a, 1, "concat");
  if (a.rank() != b.rank()) {
    throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  if (axis < 0) axis += a.rank();
  if (axis < 0 || axis >= a.rank()) throw ShapeError("concat: axis out of range");
  for (int i = 0; i < a.rank(); ++i) {
    if (i != axis && a.shape()[i] != b.shape()[i]) {
      throw ShapeError("concat: off-axis extent mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] += b.shape()[axis];

  int64_t lead = 1, trail = 1;
  for (int i = 0; i < axis; ++i) lead *= a.shape()[i];
  for (int i = axis + 1; i < a.rank(); ++i) trail *= a.shape()[i];
  const int64_t a_blk = a.shape()[axis] * trail;
  const int64_t b_blk = b.shape()[axis] * trail;

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<real> out(static_cast<size_t>(shape_numel(out_shape)));
  for (int64_t l = 0; l < lead; ++l) {
    std::copy_n(av.begin() + l * a_blk, a_blk, out.begin() + l * (a_blk + b_blk));
    std::copy_n(bv.begin() + l * b_blk, b_blk, out.begin() + l * (a_blk + b_blk) + a_blk);
  }
  Tensor o = make_output(std::move(out_shape), std::move(out), "concat");
  auto ai = a.impl(), bi = b.impl(), oi = o.impl();
  bool ga = a.requires_grad(), gb = b.requires_grad();
  detail::record_op(oi, ga || gb, [ai, bi, oi, ga, gb, lead, a_blk, b_blk] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ga && ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      const real* gl = g->data() + l * (a_blk + b_blk);
      if (ga) {
        for (int64_t i = 0; i < a_blk; ++i) ai->grad[l * a_blk + i] += gl[i];
      }
      if (gb) {
        for (int64_t i = 0; i < b_blk; ++i) bi->grad[l * b_blk + i] += gl[a_blk + i];
      }
    }
  });
  return o;
}

Tensor select_rows(const Tensor& a, const std::vector<int64_t>& rows) {
  require_rank_at_least(a, 2, "select_rows");
  const int64_t lead = detail::leading_count(a.shape(), 2);
  const int64_t R = a.shape()[a.rank() - 2];
  const int64_t D = a.shape()[a.rank() - 1];
  if (static_cast<int64_t>(rows.size()) != lead) {
    std::ostringstream os;
    os << "select_rows: got " << rows.size() << " indices for " << lead << " leading positions";
    throw ShapeError(os.str());
  }
  for (int64_t r : rows) {
    if (r < 0 || r >= R) throw InputError("select_rows: row index out of range");
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(D);

  const auto& av = a.values();
  std::vector<real> out(static_cast<size_t>(lead * D));
  for (int64_t l = 0; l < lead; ++l) {
    std::copy_n(av.begin() + (l * R + rows[l]) * D, D, out.begin() + l * D);
  }
  Tensor o = make_output(std::move(out_shape), std::move(out), "select_rows");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, rows, R, D, lead] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      real* dst = ai->grad.data() + (l * R + rows[l]) * D;
      const real* src = g->data() + l * D;
      for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
    }
  });
  return o;
}

Tensor detach(const Tensor& a) { return a.detached(); }

// ---- row-wise nonlinearities -------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  require_rank_at_least(a, 1, "softmax_rows");
  const int64_t R = a.shape().back();
  const int64_t rows = a.size() / R;
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = av.data() + r * R;
    real* y = out.data() + r * R;
    real m = x[0];
    for (int64_t i = 1; i < R; ++i) m = std::max(m, x[i]);
    real s = 0;
    for (int64_t i = 0; i < R; ++i) {
      y[i] = std::exp(x[i] - m);
      s += y[i];
    }
    const real inv = real(1) / s;
    for (int64_t i = 0; i < R; ++i) y[i] *= inv;
  }
  Tensor o = make_output(a.shape(), std::move(out), "softmax_rows");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, rows, R] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (int64_t r = 0; r < rows; ++r) {
      const real* p = oi->data.data() + r * R;
      const real* gr = g->data() + r * R;
      real dot = 0;
      for (int64_t i = 0; i < R; ++i) dot += p[i] * gr[i];
      real* dst = ai->grad.data() + r * R;
      for (int64_t i = 0; i < R; ++i) dst[i] += p[i] * (gr[i] - dot);
    }
  });
  return o;
}

Tensor squash(const Tensor& a) {
  require_rank_at_least(a, 1, "squash");
  const int64_t D = a.shape().back();
  const int64_t rows = a.size() / D;
  const auto& av = a.values();
  std::vector<real> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const real* s = av.data() + r * D;
    real n2 = 0;
    for (int64_t d = 0; d < D; ++d) n2 += s[d] * s[d];
    const real f = n2 > 0 ? std::sqrt(n2) / (real(1) + n2) : real(0);
    real* y = out.data() + r * D;
    for (int64_t d = 0; d < D; ++d) y[d] = f * s[d];
  }
  Tensor o = make_output(a.shape(), std::move(out), "squash");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, rows, D] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (int64_t r = 0; r < rows; ++r) {
      const real* s = ai->data.data() + r * D;
      const real* gr = g->data() + r * D;
      real n2 = 0, dot = 0;
      for (int64_t d = 0; d < D; ++d) {
        n2 += s[d] * s[d];
        dot += s[d] * gr[d];
      }
      real* dst = ai->grad.data() + r * D;
      if (n2 > 0) {
        const real n = std::sqrt(n2);
        const real f = n / (real(1) + n2);
        // d/dn2 of sqrt(n2)/(1+n2)
        const real fp = (real(1) - n2) / (2 * n * (real(1) + n2) * (real(1) + n2));
        for (int64_t d = 0; d < D; ++d) dst[d] += f * gr[d] + 2 * dot * fp * s[d];
      }
      // at s = 0 the limit Jacobian is zero: nothing to add
    }
  });
  return o;
}

Tensor rows_norm(const Tensor& a) {
  require_rank_at_least(a, 1, "rows_norm");
  const int64_t D = a.shape().back();
  const int64_t rows = a.size() / D;
  const auto& av = a.values();
  std::vector<real> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    real n2 = 0;
    for (int64_t d = 0; d < D; ++d) {
      const real v = av[r * D + d];
      n2 += v * v;
    }
    out[r] = std::sqrt(n2);
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor o = make_output(std::move(out_shape), std::move(out), "rows_norm");
  auto ai = a.impl(), oi = o.impl();
  detail::record_op(oi, a.requires_grad(), [ai, oi, rows, D] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (ai->grad.empty()) ai->grad.assign(ai->data.size(), real(0));
    for (int64_t r = 0; r < rows; ++r) {
      const real n = oi->data[r];
      if (n <= 0) continue;  // zero vector: take the limit gradient 0
      const real c = (*g)[r] / n;
      for (int64_t d = 0; d < D; ++d) ai->grad[r * D + d] += c * ai->data[r * D + d];
    }
  });
  return o;
}

// ---- convolution family ---------------------------------------------------------

Tensor conv1d_feature(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  require_rank_at_least(input, 2, "conv1d_feature");
  if (kernels.rank() != 3 || kernels.shape()[1] != 1) {
    throw ShapeError("conv1d_feature: kernels must be [K, 1, F], got " +
                     shape_str(kernels.shape()));
  }
  const int64_t F = input.shape().back();
  const int64_t K = kernels.shape()[0];
  if (kernels.shape()[2] != F) {
    std::ostringstream os;
    os << "conv1d_feature: kernel width " << kernels.shape()[2] << " vs feature size " << F;
    throw ShapeError(os.str());
  }
  const bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.shape()[0] != K)) {
    throw ShapeError("conv1d_feature: bias must be [K], got " + shape_str(bias.shape()));
  }
  const int64_t rows = input.size() / F;  // leading * C

  const auto& in = input.values();
  const auto& ker = kernels.values();
  std::vector<real> out(static_cast<size_t>(rows * K));
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = in.data() + r * F;
    real* y = out.data() + r * K;
    for (int64_t k = 0; k < K; ++k) {
      const real* w = ker.data() + k * F;
      real acc = with_bias ? bias.values()[k] : real(0);
      for (int64_t f = 0; f < F; ++f) acc += x[f] * w[f];
      y[k] = acc;
    }
  }
  Shape out_shape = input.shape();
  out_shape.back() = K;
  Tensor o = make_output(std::move(out_shape), std::move(out), "conv1d_feature");

  auto ii = input.impl(), ki = kernels.impl(), oi = o.impl();
  auto bi = with_bias ? bias.impl() : nullptr;
  const bool gi = input.requires_grad(), gk = kernels.requires_grad();
  const bool gb = with_bias && bias.requires_grad();
  detail::record_op(oi, gi || gk || gb, [ii, ki, bi, oi, gi, gk, gb, rows, F, K] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gi && ii->grad.empty()) ii->grad.assign(ii->data.size(), real(0));
    if (gk && ki->grad.empty()) ki->grad.assign(ki->data.size(), real(0));
    if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
    for (int64_t r = 0; r < rows; ++r) {
      const real* gr = g->data() + r * K;
      const real* x = ii->data.data() + r * F;
      for (int64_t k = 0; k < K; ++k) {
        const real gk_v = gr[k];
        if (gk_v == 0) continue;
        const real* w = ki->data.data() + k * F;
        if (gi) {
          real* dx = ii->grad.data() + r * F;
          for (int64_t f = 0; f < F; ++f) dx[f] += gk_v * w[f];
        }
        if (gk) {
          real* dw = ki->grad.data() + k * F;
          for (int64_t f = 0; f < F; ++f) dw[f] += gk_v * x[f];
        }
        if (gb) bi->grad[k] += gk_v;
      }
    }
  });
  return o;
}

Tensor conv2d_strided(const Tensor& input, const Tensor& kernels, int64_t stride,
                      const Tensor& bias) {
  require_rank_at_least(input, 2, "conv2d_strided");
  if (input.shape().back() != 1) {
    throw ShapeError("conv2d_strided: input must be [..., W, 1], got " +
                     shape_str(input.shape()));
  }
  if (stride < 1) throw ConfigError("conv2d_strided: stride must be >= 1");
  if (kernels.rank() != 3 || kernels.shape()[1] != 1 || kernels.shape()[2] != stride) {
    throw ShapeError("conv2d_strided: kernels must be [K, 1, stride], got " +
                     shape_str(kernels.shape()));
  }
  const int64_t W = input.shape()[input.rank() - 2];
  if (W % stride != 0) {
    std::ostringstream os;
    os << "conv2d_strided: width " << W << " not divisible by stride " << stride;
    throw ShapeError(os.str());
  }
  const int64_t P = W / stride;
  const int64_t K = kernels.shape()[0];
  const bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.shape()[0] != K)) {
    throw ShapeError("conv2d_strided: bias must be [K], got " + shape_str(bias.shape()));
  }
  const int64_t lead = detail::leading_count(input.shape(), 2);

  const auto& in = input.values();
  const auto& ker = kernels.values();
  std::vector<real> out(static_cast<size_t>(lead * P * K));
  for (int64_t l = 0; l < lead; ++l) {
    const real* x = in.data() + l * W;
    for (int64_t p = 0; p < P; ++p) {
      real* y = out.data() + (l * P + p) * K;
      const real* win = x + p * stride;
      for (int64_t k = 0; k < K; ++k) {
        const real* w = ker.data() + k * stride;
        real acc = with_bias ? bias.values()[k] : real(0);
        for (int64_t t = 0; t < stride; ++t) acc += win[t] * w[t];
        y[k] = acc;
      }
    }
  }
  Shape out_shape(input.shape().begin(), input.shape().end() - 2);
  out_shape.push_back(P);
  out_shape.push_back(K);
  Tensor o = make_output(std::move(out_shape), std::move(out), "conv2d_strided");

  auto ii = input.impl(), ki = kernels.impl(), oi = o.impl();
  auto bi = with_bias ? bias.impl() : nullptr;
  const bool gi = input.requires_grad(), gk = kernels.requires_grad();
  const bool gb = with_bias && bias.requires_grad();
  detail::record_op(oi, gi || gk || gb, [ii, ki, bi, oi, gi, gk, gb, lead, P, K, stride, W] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gi && ii->grad.empty()) ii->grad.assign(ii->data.size(), real(0));
    if (gk && ki->grad.empty()) ki->grad.assign(ki->data.size(), real(0));
    if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      for (int64_t p = 0; p < P; ++p) {
        const real* gr = g->data() + (l * P + p) * K;
        const real* win = ii->data.data() + l * W + p * stride;
        for (int64_t k = 0; k < K; ++k) {
          const real gv = gr[k];
          if (gv == 0) continue;
          const real* w = ki->data.data() + k * stride;
          if (gi) {
            real* dx = ii->grad.data() + l * W + p * stride;
            for (int64_t t = 0; t < stride; ++t) dx[t] += gv * w[t];
          }
          if (gk) {
            real* dw = ki->grad.data() + k * stride;
            for (int64_t t = 0; t < stride; ++t) dw[t] += gv * win[t];
          }
          if (gb) bi->grad[k] += gv;
        }
      }
    }
  });
  return o;
}

Tensor deconv_width(const Tensor& input, const Tensor& kernels, int64_t stride,
                    const Tensor& bias) {
  require_rank_at_least(input, 2, "deconv_width");
  if (stride < 1) throw ConfigError("deconv_width: stride must be >= 1");
  if (kernels.rank() != 3 || kernels.shape()[0] != stride) {
    throw ShapeError("deconv_width: kernels must be [stride, C_in, C_out], got " +
                     shape_str(kernels.shape()));
  }
  const int64_t Cin = input.shape().back();
  if (kernels.shape()[1] != Cin) {
    std::ostringstream os;
    os << "deconv_width: kernel C_in " << kernels.shape()[1] << " vs input channels " << Cin;
    throw ShapeError(os.str());
  }
  const int64_t Cout = kernels.shape()[2];
  const int64_t W = input.shape()[input.rank() - 2];
  const bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.shape()[0] != Cout)) {
    throw ShapeError("deconv_width: bias must be [C_out], got " + shape_str(bias.shape()));
  }
  const int64_t lead = detail::leading_count(input.shape(), 2);

  const auto& in = input.values();
  const auto& ker = kernels.values();
  std::vector<real> out(static_cast<size_t>(lead * W * stride * Cout));
  for (int64_t l = 0; l < lead; ++l) {
    for (int64_t w = 0; w < W; ++w) {
      const real* x = in.data() + (l * W + w) * Cin;
      for (int64_t t = 0; t < stride; ++t) {
        real* y = out.data() + ((l * W + w) * stride + t) * Cout;
        if (with_bias) {
          std::copy_n(bias.values().begin(), Cout, y);
        }
        for (int64_t i = 0; i < Cin; ++i) {
          const real xv = x[i];
          if (xv == 0) continue;
          const real* wk = ker.data() + (t * Cin + i) * Cout;
          for (int64_t o = 0; o < Cout; ++o) y[o] += xv * wk[o];
        }
      }
    }
  }
  Shape out_shape(input.shape().begin(), input.shape().end() - 2);
  out_shape.push_back(W * stride);
  out_shape.push_back(Cout);
  Tensor o = make_output(std::move(out_shape), std::move(out), "deconv_width");

  auto ii = input.impl(), ki = kernels.impl(), oi = o.impl();
  auto bi = with_bias ? bias.impl() : nullptr;
  const bool gi = input.requires_grad(), gk = kernels.requires_grad();
  const bool gb = with_bias && bias.requires_grad();
  detail::record_op(oi, gi || gk || gb, [ii, ki, bi, oi, gi, gk, gb, lead, W, stride, Cin, Cout] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gi && ii->grad.empty()) ii->grad.assign(ii->data.size(), real(0));
    if (gk && ki->grad.empty()) ki->grad.assign(ki->data.size(), real(0));
    if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      for (int64_t w = 0; w < W; ++w) {
        const real* x = ii->data.data() + (l * W + w) * Cin;
        for (int64_t t = 0; t < stride; ++t) {
          const real* gr = g->data() + ((l * W + w) * stride + t) * Cout;
          if (gb) {
            for (int64_t o = 0; o < Cout; ++o) bi->grad[o] += gr[o];
          }
          for (int64_t i = 0; i < Cin; ++i) {
            const real* wk = ki->data.data() + (t * Cin + i) * Cout;
            if (gi) {
              real acc = 0;
              for (int64_t o = 0; o < Cout; ++o) acc += gr[o] * wk[o];
              ii->grad[(l * W + w) * Cin + i] += acc;
            }
            if (gk) {
              real* dw = ki->grad.data() + (t * Cin + i) * Cout;
              const real xv = x[i];
              for (int64_t o = 0; o < Cout; ++o) dw[o] += gr[o] * xv;
            }
          }
        }
      }
    }
  });
  return o;
}

// ---- capsule plumbing ------------------------------------------------------------

Tensor capsule_transform(const Tensor& u, const Tensor& w) {
  require_rank_at_least(u, 2, "capsule_transform");
  if (w.rank() != 4) {
    throw ShapeError("capsule_transform: weights must be [I, J, D_in, D_out], got " +
                     shape_str(w.shape()));
  }
  const int64_t I = u.shape()[u.rank() - 2];
  const int64_t Din = u.shape().back();
  if (w.shape()[0] != I || w.shape()[2] != Din) {
    std::ostringstream os;
    os << "capsule_transform: weights " << shape_str(w.shape()) << " vs input "
       << shape_str(u.shape());
    throw ShapeError(os.str());
  }
  const int64_t J = w.shape()[1];
  const int64_t Dout = w.shape()[3];
  const int64_t lead = detail::leading_count(u.shape(), 2);

  const auto& uv = u.values();
  const auto& wv = w.values();
  std::vector<real> out(static_cast<size_t>(lead * I * J * Dout), real(0));
  for (int64_t l = 0; l < lead; ++l) {
    for (int64_t i = 0; i < I; ++i) {
      const real* x = uv.data() + (l * I + i) * Din;
      for (int64_t j = 0; j < J; ++j) {
        real* y = out.data() + ((l * I + i) * J + j) * Dout;
        const real* wij = wv.data() + (i * J + j) * Din * Dout;
        for (int64_t d = 0; d < Din; ++d) {
          const real xv = x[d];
          const real* row = wij + d * Dout;
          for (int64_t e = 0; e < Dout; ++e) y[e] += xv * row[e];
        }
      }
    }
  }
  Shape out_shape(u.shape().begin(), u.shape().end() - 1);
  out_shape.push_back(J);
  out_shape.push_back(Dout);
  Tensor o = make_output(std::move(out_shape), std::move(out), "capsule_transform");

  auto ui = u.impl(), wi = w.impl(), oi = o.impl();
  const bool gu = u.requires_grad(), gw = w.requires_grad();
  detail::record_op(oi, gu || gw, [ui, wi, oi, gu, gw, lead, I, J, Din, Dout] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gu && ui->grad.empty()) ui->grad.assign(ui->data.size(), real(0));
    if (gw && wi->grad.empty()) wi->grad.assign(wi->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      for (int64_t i = 0; i < I; ++i) {
        const real* x = ui->data.data() + (l * I + i) * Din;
        for (int64_t j = 0; j < J; ++j) {
          const real* gr = g->data() + ((l * I + i) * J + j) * Dout;
          const real* wij = wi->data.data() + (i * J + j) * Din * Dout;
          for (int64_t d = 0; d < Din; ++d) {
            const real* row = wij + d * Dout;
            if (gu) {
              real acc = 0;
              for (int64_t e = 0; e < Dout; ++e) acc += gr[e] * row[e];
              ui->grad[(l * I + i) * Din + d] += acc;
            }
            if (gw) {
              real* dw = wi->grad.data() + (i * J + j) * Din * Dout + d * Dout;
              const real xv = x[d];
              for (int64_t e = 0; e < Dout; ++e) dw[e] += gr[e] * xv;
            }
          }
        }
      }
    }
  });
  return o;
}

namespace {

struct VoteDims {
  int64_t lead, I, J, D;
};

VoteDims vote_dims(const Tensor& votes, const char* op) {
  require_rank_at_least(votes, 3, op);
  VoteDims d;
  d.I = votes.shape()[votes.rank() - 3];
  d.J = votes.shape()[votes.rank() - 2];
  d.D = votes.shape().back();
  d.lead = detail::leading_count(votes.shape(), 3);
  return d;
}

void check_parents(const VoteDims& d, const Tensor& votes, const Tensor& parents,
                   const char* op) {
  bool ok = parents.rank() == votes.rank() - 1 &&
            parents.shape()[parents.rank() - 2] == d.J && parents.shape().back() == d.D &&
            detail::leading_count(parents.shape(), 2) == d.lead;
  if (!ok) {
    std::ostringstream os;
    os << op << ": parents " << shape_str(parents.shape()) << " vs votes "
       << shape_str(votes.shape());
    throw ShapeError(os.str());
  }
}

}  // namespace

Tensor weighted_vote_sum(const Tensor& votes, const Tensor& couplings) {
  const VoteDims d = vote_dims(votes, "weighted_vote_sum");
  bool ok = couplings.rank() == votes.rank() - 1 &&
            couplings.shape()[couplings.rank() - 2] == d.I &&
            couplings.shape().back() == d.J &&
            detail::leading_count(couplings.shape(), 2) == d.lead;
  if (!ok) {
    throw ShapeError("weighted_vote_sum: couplings " + shape_str(couplings.shape()) +
                     " vs votes " + shape_str(votes.shape()));
  }
  const auto& vv = votes.values();
  const auto& kv = couplings.values();
  std::vector<real> out(static_cast<size_t>(d.lead * d.J * d.D), real(0));
  for (int64_t l = 0; l < d.lead; ++l) {
    for (int64_t i = 0; i < d.I; ++i) {
      for (int64_t j = 0; j < d.J; ++j) {
        const real k = kv[(l * d.I + i) * d.J + j];
        const real* v = vv.data() + ((l * d.I + i) * d.J + j) * d.D;
        real* s = out.data() + (l * d.J + j) * d.D;
        for (int64_t e = 0; e < d.D; ++e) s[e] += k * v[e];
      }
    }
  }
  Shape out_shape(votes.shape().begin(), votes.shape().end() - 3);
  out_shape.push_back(d.J);
  out_shape.push_back(d.D);
  Tensor o = make_output(std::move(out_shape), std::move(out), "weighted_vote_sum");

  auto vi = votes.impl(), ki = couplings.impl(), oi = o.impl();
  const bool gv = votes.requires_grad(), gk = couplings.requires_grad();
  detail::record_op(oi, gv || gk, [vi, ki, oi, gv, gk, d] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gv && vi->grad.empty()) vi->grad.assign(vi->data.size(), real(0));
    if (gk && ki->grad.empty()) ki->grad.assign(ki->data.size(), real(0));
    for (int64_t l = 0; l < d.lead; ++l) {
      for (int64_t i = 0; i < d.I; ++i) {
        for (int64_t j = 0; j < d.J; ++j) {
          const int64_t vo = ((l * d.I + i) * d.J + j) * d.D;
          const real* gs = g->data() + (l * d.J + j) * d.D;
          if (gv) {
            const real k = ki->data[(l * d.I + i) * d.J + j];
            for (int64_t e = 0; e < d.D; ++e) vi->grad[vo + e] += k * gs[e];
          }
          if (gk) {
            real acc = 0;
            for (int64_t e = 0; e < d.D; ++e) acc += vi->data[vo + e] * gs[e];
            ki->grad[(l * d.I + i) * d.J + j] += acc;
          }
        }
      }
    }
  });
  return o;
}

Tensor vote_parent_sqdist(const Tensor& votes, const Tensor& parents) {
  const VoteDims d = vote_dims(votes, "vote_parent_sqdist");
  check_parents(d, votes, parents, "vote_parent_sqdist");
  const auto& vv = votes.values();
  const auto& pv = parents.values();
  std::vector<real> out(static_cast<size_t>(d.lead * d.I * d.J));
  for (int64_t l = 0; l < d.lead; ++l) {
    for (int64_t i = 0; i < d.I; ++i) {
      for (int64_t j = 0; j < d.J; ++j) {
        const real* v = vv.data() + ((l * d.I + i) * d.J + j) * d.D;
        const real* p = pv.data() + (l * d.J + j) * d.D;
        real acc = 0;
        for (int64_t e = 0; e < d.D; ++e) {
          const real diff = v[e] - p[e];
          acc += diff * diff;
        }
        out[(l * d.I + i) * d.J + j] = acc;
      }
    }
  }
  Shape out_shape(votes.shape().begin(), votes.shape().end() - 1);
  Tensor o = make_output(std::move(out_shape), std::move(out), "vote_parent_sqdist");

  auto vi = votes.impl(), pi = parents.impl(), oi = o.impl();
  const bool gv = votes.requires_grad(), gp = parents.requires_grad();
  detail::record_op(oi, gv || gp, [vi, pi, oi, gv, gp, d] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gv && vi->grad.empty()) vi->grad.assign(vi->data.size(), real(0));
    if (gp && pi->grad.empty()) pi->grad.assign(pi->data.size(), real(0));
    for (int64_t l = 0; l < d.lead; ++l) {
      for (int64_t i = 0; i < d.I; ++i) {
        for (int64_t j = 0; j < d.J; ++j) {
          const real gd = (*g)[(l * d.I + i) * d.J + j];
          if (gd == 0) continue;
          const int64_t vo = ((l * d.I + i) * d.J + j) * d.D;
          const int64_t po = (l * d.J + j) * d.D;
          for (int64_t e = 0; e < d.D; ++e) {
            const real diff2 = 2 * (vi->data[vo + e] - pi->data[po + e]);
            if (gv) vi->grad[vo + e] += gd * diff2;
            if (gp) pi->grad[po + e] -= gd * diff2;
          }
        }
      }
    }
  });
  return o;
}

Tensor vote_parent_dot(const Tensor& votes, const Tensor& parents, bool cosine) {
  const VoteDims d = vote_dims(votes, "vote_parent_dot");
  check_parents(d, votes, parents, "vote_parent_dot");
  constexpr real kCosEps = real(1e-12);
  const auto& vv = votes.values();
  const auto& pv = parents.values();
  std::vector<real> out(static_cast<size_t>(d.lead * d.I * d.J));
  for (int64_t l = 0; l < d.lead; ++l) {
    for (int64_t i = 0; i < d.I; ++i) {
      for (int64_t j = 0; j < d.J; ++j) {
        const real* v = vv.data() + ((l * d.I + i) * d.J + j) * d.D;
        const real* p = pv.data() + (l * d.J + j) * d.D;
        real dot = 0, vn2 = 0, pn2 = 0;
        for (int64_t e = 0; e < d.D; ++e) {
          dot += v[e] * p[e];
          vn2 += v[e] * v[e];
          pn2 += p[e] * p[e];
        }
        out[(l * d.I + i) * d.J + j] =
            cosine ? dot / (std::sqrt(vn2) * std::sqrt(pn2) + kCosEps) : dot;
      }
    }
  }
  Shape out_shape(votes.shape().begin(), votes.shape().end() - 1);
  Tensor o = make_output(std::move(out_shape), std::move(out), "vote_parent_dot");

  auto vi = votes.impl(), pi = parents.impl(), oi = o.impl();
  const bool gv = votes.requires_grad(), gp = parents.requires_grad();
  detail::record_op(oi, gv || gp, [vi, pi, oi, gv, gp, d, cosine] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gv && vi->grad.empty()) vi->grad.assign(vi->data.size(), real(0));
    if (gp && pi->grad.empty()) pi->grad.assign(pi->data.size(), real(0));
    for (int64_t l = 0; l < d.lead; ++l) {
      for (int64_t i = 0; i < d.I; ++i) {
        for (int64_t j = 0; j < d.J; ++j) {
          const real gd = (*g)[(l * d.I + i) * d.J + j];
          if (gd == 0) continue;
          const int64_t vo = ((l * d.I + i) * d.J + j) * d.D;
          const int64_t po = (l * d.J + j) * d.D;
          if (!cosine) {
            for (int64_t e = 0; e < d.D; ++e) {
              if (gv) vi->grad[vo + e] += gd * pi->data[po + e];
              if (gp) pi->grad[po + e] += gd * vi->data[vo + e];
            }
          } else {
            real dot = 0, vn2 = 0, pn2 = 0;
            for (int64_t e = 0; e < d.D; ++e) {
              dot += vi->data[vo + e] * pi->data[po + e];
              vn2 += vi->data[vo + e] * vi->data[vo + e];
              pn2 += pi->data[po + e] * pi->data[po + e];
            }
            const real vn = std::sqrt(vn2), pn = std::sqrt(pn2);
            const real den = vn * pn + kCosEps;
            for (int64_t e = 0; e < d.D; ++e) {
              if (gv) {
                real term = pi->data[po + e] / den;
                if (vn > 0) term -= dot * pn * vi->data[vo + e] / (vn * den * den);
                vi->grad[vo + e] += gd * term;
              }
              if (gp) {
                real term = vi->data[vo + e] / den;
                if (pn > 0) term -= dot * vn * pi->data[po + e] / (pn * den * den);
                pi->grad[po + e] += gd * term;
              }
            }
          }
        }
      }
    }
  });
  return o;
}

// ---- batch norm ---------------------------------------------------------------------

BNState BNState::init(int64_t channels) {
  BNState s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, real(1));
  return s;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BNState* state,
                  bool training, real momentum, real eps) {
  require_rank_at_least(x, 1, "batch_norm");
  const int64_t C = x.shape().back();
  if (gamma.rank() != 1 || gamma.shape()[0] != C || beta.rank() != 1 || beta.shape()[0] != C) {
    throw ShapeError("batch_norm: gamma/beta must be [C] with C = " + std::to_string(C));
  }
  const int64_t M = x.size() / C;  // positions per channel
  const auto& xv = x.values();

  std::vector<real> mu(static_cast<size_t>(C), real(0));
  std::vector<real> var(static_cast<size_t>(C), real(0));
  if (training) {
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t c = 0; c < C; ++c) mu[c] += xv[m * C + c];
    }
    const real inv_m = real(1) / static_cast<real>(M);
    for (int64_t c = 0; c < C; ++c) mu[c] *= inv_m;
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t c = 0; c < C; ++c) {
        const real d = xv[m * C + c] - mu[c];
        var[c] += d * d;
      }
    }
    for (int64_t c = 0; c < C; ++c) var[c] *= inv_m;
    if (state != nullptr) {
      auto& rm = state->running_mean.values_mut();
      auto& rv = state->running_var.values_mut();
      for (int64_t c = 0; c < C; ++c) {
        rm[c] = momentum * rm[c] + (real(1) - momentum) * mu[c];
        rv[c] = momentum * rv[c] + (real(1) - momentum) * var[c];
      }
    }
  } else {
    if (state == nullptr) throw ContractError("batch_norm: eval mode requires running stats");
    mu.assign(state->running_mean.values().begin(), state->running_mean.values().end());
    var.assign(state->running_var.values().begin(), state->running_var.values().end());
  }

  std::vector<real> inv_sigma(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) inv_sigma[c] = real(1) / std::sqrt(var[c] + eps);

  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<real> out(xv.size());
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t c = 0; c < C; ++c) {
      out[m * C + c] = gv[c] * (xv[m * C + c] - mu[c]) * inv_sigma[c] + bv[c];
    }
  }
  Tensor o = make_output(x.shape(), std::move(out), "batch_norm");

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = o.impl();
  const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
  detail::record_op(oi, gx || gg || gb,
                    [xi, gi, bi, oi, gx, gg, gb, M, C, training, mu = std::move(mu),
                     inv_sigma = std::move(inv_sigma)] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gx && xi->grad.empty()) xi->grad.assign(xi->data.size(), real(0));
    if (gg && gi->grad.empty()) gi->grad.assign(gi->data.size(), real(0));
    if (gb && bi->grad.empty()) bi->grad.assign(bi->data.size(), real(0));

    // Per-channel sums of g and g * x_hat.
    std::vector<real> sum_g(static_cast<size_t>(C), real(0));
    std::vector<real> sum_gx(static_cast<size_t>(C), real(0));
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t c = 0; c < C; ++c) {
        const real xh = (xi->data[m * C + c] - mu[c]) * inv_sigma[c];
        sum_g[c] += (*g)[m * C + c];
        sum_gx[c] += (*g)[m * C + c] * xh;
      }
    }
    if (gb) {
      for (int64_t c = 0; c < C; ++c) bi->grad[c] += sum_g[c];
    }
    if (gg) {
      for (int64_t c = 0; c < C; ++c) gi->grad[c] += sum_gx[c];
    }
    if (gx) {
      const real inv_m = real(1) / static_cast<real>(M);
      for (int64_t m = 0; m < M; ++m) {
        for (int64_t c = 0; c < C; ++c) {
          const real gm = (*g)[m * C + c];
          if (training) {
            const real xh = (xi->data[m * C + c] - mu[c]) * inv_sigma[c];
            xi->grad[m * C + c] += gi->data[c] * inv_sigma[c] *
                                   (gm - sum_g[c] * inv_m - xh * sum_gx[c] * inv_m);
          } else {
            xi->grad[m * C + c] += gi->data[c] * inv_sigma[c] * gm;
          }
        }
      }
    }
  });
  return o;
}

// ---- chamfer ----------------------------------------------------------------------------

Tensor chamfer_distance(const Tensor& x, const Tensor& y) {
  require_rank_at_least(x, 2, "chamfer_distance");
  require_rank_at_least(y, 2, "chamfer_distance");
  const int64_t D = x.shape().back();
  if (y.shape().back() != D) {
    throw ShapeError("chamfer_distance: point dims differ, " + shape_str(x.shape()) + " vs " +
                     shape_str(y.shape()));
  }
  const int64_t N = x.shape()[x.rank() - 2];
  const int64_t M = y.shape()[y.rank() - 2];
  const int64_t lead = detail::leading_count(x.shape(), 2);
  if (detail::leading_count(y.shape(), 2) != lead) {
    throw ShapeError("chamfer_distance: leading shapes differ, " + shape_str(x.shape()) +
                     " vs " + shape_str(y.shape()));
  }

  const auto& xv = x.values();
  const auto& yv = y.values();
  std::vector<real> out(static_cast<size_t>(lead));
  // Nearest neighbours found during the forward pass; gradients route through
  // these fixed pairs.
  std::vector<int64_t> nn_xy(static_cast<size_t>(lead * N));
  std::vector<int64_t> nn_yx(static_cast<size_t>(lead * M));
  for (int64_t l = 0; l < lead; ++l) {
    const real* xs = xv.data() + l * N * D;
    const real* ys = yv.data() + l * M * D;
    real term1 = 0;
    for (int64_t i = 0; i < N; ++i) {
      real best = std::numeric_limits<real>::infinity();
      int64_t best_j = 0;
      for (int64_t j = 0; j < M; ++j) {
        real d2 = 0;
        for (int64_t e = 0; e < D; ++e) {
          const real diff = xs[i * D + e] - ys[j * D + e];
          d2 += diff * diff;
        }
        if (d2 < best) {  // strict: ties keep the lowest index
          best = d2;
          best_j = j;
        }
      }
      term1 += best;
      nn_xy[l * N + i] = best_j;
    }
    real term2 = 0;
    for (int64_t j = 0; j < M; ++j) {
      real best = std::numeric_limits<real>::infinity();
      int64_t best_i = 0;
      for (int64_t i = 0; i < N; ++i) {
        real d2 = 0;
        for (int64_t e = 0; e < D; ++e) {
          const real diff = xs[i * D + e] - ys[j * D + e];
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          best_i = i;
        }
      }
      term2 += best;
      nn_yx[l * M + j] = best_i;
    }
    out[l] = term1 / static_cast<real>(N) + term2 / static_cast<real>(M);
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  Tensor o = make_output(std::move(out_shape), std::move(out), "chamfer_distance");

  auto xi = x.impl(), yi = y.impl(), oi = o.impl();
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  detail::record_op(oi, gx || gy,
                    [xi, yi, oi, gx, gy, lead, N, M, D, nn_xy = std::move(nn_xy),
                     nn_yx = std::move(nn_yx)] {
    const auto* g = out_grad(oi);
    if (!g) return;
    if (gx && xi->grad.empty()) xi->grad.assign(xi->data.size(), real(0));
    if (gy && yi->grad.empty()) yi->grad.assign(yi->data.size(), real(0));
    for (int64_t l = 0; l < lead; ++l) {
      const real gl = (*g)[l];
      if (gl == 0) continue;
      const real wx = gl * 2 / static_cast<real>(N);
      for (int64_t i = 0; i < N; ++i) {
        const int64_t j = nn_xy[l * N + i];
        const int64_t xo = (l * N + i) * D;
        const int64_t yo = (l * M + j) * D;
        for (int64_t e = 0; e < D; ++e) {
          const real diff = xi->data[xo + e] - yi->data[yo + e];
          if (gx) xi->grad[xo + e] += wx * diff;
          if (gy) yi->grad[yo + e] -= wx * diff;
        }
      }
      const real wy = gl * 2 / static_cast<real>(M);
      for (int64_t j = 0; j < M; ++j) {
        const int64_t i = nn_yx[l * M + j];
        const int64_t xo = (l * N + i) * D;
        const int64_t yo = (l * M + j) * D;
        for (int64_t e = 0; e < D; ++e) {
          const real diff = xi->data[xo + e] - yi->data[yo + e];
          if (gx) xi->grad[xo + e] += wy * diff;
          if (gy) yi->grad[yo + e] -= wy * diff;
        }
      }
    }
  });
  return o;
}

// ---- non-differentiable helpers -----------------------------------------------------------

std::vector<int64_t> argmax_rows(const Tensor& a) {
  require_rank_at_least(a, 1, "argmax_rows");
  const int64_t R = a.shape().back();
  const int64_t rows = a.size() / R;
  const auto& av = a.values();
  std::vector<int64_t> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = av.data() + r * R;
    int64_t best = 0;
    for (int64_t i = 1; i < R; ++i) {
      if (x[i] > x[best]) best = i;
    }
    out[r] = best;
  }
  return out;
}

}  // namespace pointcaps
