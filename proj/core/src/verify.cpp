#include "pointcaps/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "pointcaps/layers.hpp"
#include "pointcaps/model.hpp"

namespace pointcaps {

namespace {

real unit_real(std::mt19937_64& rng) {
  return static_cast<real>(rng() >> 11) * 0x1.0p-53;
}

real uniform_real(std::mt19937_64& rng, real lo, real hi) {
  return lo + (hi - lo) * unit_real(rng);
}

real gaussian(std::mt19937_64& rng) {
  const real u1 = real(1) - unit_real(rng);
  const real u2 = unit_real(rng);
  return std::sqrt(real(-2) * std::log(u1)) *
         std::cos(2 * real(3.14159265358979323846) * u2);
}

Tensor random_tensor(Shape shape, real lo, real hi, std::mt19937_64& rng, bool grad = true) {
  return Tensor::uniform(std::move(shape), lo, hi, rng, grad);
}

// ---- reference router ------------------------------------------------------
// Written with plain loops and its own softmax/squash so it shares nothing
// with the tensor-op implementation it judges.

struct RefRouting {
  std::vector<real> parents;    // [G, J, D]
  std::vector<real> logits;     // [G, I, J]
  std::vector<real> couplings;  // [G, I, J]
};

RefRouting reference_route(const std::vector<real>& votes, int64_t G, int64_t I, int64_t J,
                           int64_t D, int iters, bool euclidean, bool cosine) {
  RefRouting r;
  r.logits.assign(static_cast<size_t>(G * I * J), 0);
  r.couplings.assign(static_cast<size_t>(G * I * J), 0);
  r.parents.assign(static_cast<size_t>(G * J * D), 0);
  auto vote = [&](int64_t g, int64_t i, int64_t j, int64_t d) {
    return votes[static_cast<size_t>(((g * I + i) * J + j) * D + d)];
  };
  auto& b = r.logits;
  auto& k = r.couplings;
  auto& s = r.parents;
  for (int t = 0; t < iters; ++t) {
    for (int64_t g = 0; g < G; ++g) {
      for (int64_t i = 0; i < I; ++i) {
        const size_t row = static_cast<size_t>((g * I + i) * J);
        real mx = b[row];
        for (int64_t j = 1; j < J; ++j) mx = std::max(mx, b[row + static_cast<size_t>(j)]);
        real z = 0;
        for (int64_t j = 0; j < J; ++j) {
          k[row + static_cast<size_t>(j)] = std::exp(b[row + static_cast<size_t>(j)] - mx);
          z += k[row + static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < J; ++j) k[row + static_cast<size_t>(j)] /= z;
      }
    }
    for (int64_t g = 0; g < G; ++g) {
      for (int64_t j = 0; j < J; ++j) {
        for (int64_t d = 0; d < D; ++d) {
          real acc = 0;
          for (int64_t i = 0; i < I; ++i) {
            acc += k[static_cast<size_t>((g * I + i) * J + j)] * vote(g, i, j, d);
          }
          s[static_cast<size_t>((g * J + j) * D + d)] = acc;
        }
        real n2 = 0;
        for (int64_t d = 0; d < D; ++d) {
          const real v = s[static_cast<size_t>((g * J + j) * D + d)];
          n2 += v * v;
        }
        const real factor = n2 > 0 ? std::sqrt(n2) / (1 + n2) : real(0);
        for (int64_t d = 0; d < D; ++d) s[static_cast<size_t>((g * J + j) * D + d)] *= factor;
      }
    }
    for (int64_t g = 0; g < G; ++g) {
      for (int64_t i = 0; i < I; ++i) {
        for (int64_t j = 0; j < J; ++j) {
          real upd = 0;
          if (euclidean) {
            for (int64_t d = 0; d < D; ++d) {
              const real diff = vote(g, i, j, d) - s[static_cast<size_t>((g * J + j) * D + d)];
              upd -= diff * diff;
            }
          } else {
            real dot = 0, nv = 0, ns = 0;
            for (int64_t d = 0; d < D; ++d) {
              const real v = vote(g, i, j, d);
              const real p = s[static_cast<size_t>((g * J + j) * D + d)];
              dot += v * p;
              nv += v * v;
              ns += p * p;
            }
            upd = cosine ? dot / (std::sqrt(nv) * std::sqrt(ns) + real(1e-12)) : dot;
          }
          b[static_cast<size_t>((g * I + i) * J + j)] += upd;
        }
      }
    }
  }
  return r;
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

CheckResult make_result(const std::string& name, double t0, bool ok, std::string detail) {
  CheckResult r;
  r.name = name;
  r.passed = ok;
  r.detail = ok ? std::string() : std::move(detail);
  r.millis = now_ms() - t0;
  return r;
}

// ---- finite-difference machinery ------------------------------------------------

using OpFn = std::function<Tensor(std::vector<Tensor>&)>;

real max_fd_rel_err(const OpFn& f, std::vector<Tensor>& inputs, std::mt19937_64& rng) {
  Tensor w;
  {
    NoGradScope ng;
    Tensor out0 = f(inputs);
    w = Tensor::uniform(out0.shape(), -1, 1, rng);
  }
  auto loss_value = [&]() {
    NoGradScope ng;
    Tensor out = f(inputs);
    const auto& ov = out.values();
    const auto& wv = w.values();
    real acc = 0;
    for (size_t i = 0; i < ov.size(); ++i) acc += ov[i] * wv[i];
    return acc;
  };

  Tape tape;
  {
    TapeScope scope(tape);
    Tensor out = f(inputs);
    tape.backward(sum(mul(out, w)));
  }

  const real h = real(1e-5);
  real worst = 0;
  for (Tensor& x : inputs) {
    if (!x.requires_grad()) continue;
    std::vector<real> analytic(static_cast<size_t>(x.size()), 0);
    if (x.has_grad()) analytic = x.grad();
    auto& vals = x.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      const real orig = vals[i];
      vals[i] = orig + h;
      const real lp = loss_value();
      vals[i] = orig - h;
      const real lm = loss_value();
      vals[i] = orig;
      const real fd = (lp - lm) / (2 * h);
      const real err = std::abs(fd - analytic[i]) /
                       std::max({real(1), std::abs(fd), std::abs(analytic[i])});
      worst = std::max(worst, err);
    }
    x.zero_grad();
  }
  return worst;
}

CheckResult grad_check(const std::string& name, uint64_t seed, int rounds,
                       const std::function<std::vector<Tensor>(std::mt19937_64&)>& make_inputs,
                       const OpFn& f, real tol = real(1e-5)) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  real worst = 0;
  for (int r = 0; r < rounds; ++r) {
    std::vector<Tensor> inputs = make_inputs(rng);
    worst = std::max(worst, max_fd_rel_err(f, inputs, rng));
  }
  std::ostringstream os;
  os << "max rel err " << worst << " exceeds " << tol;
  return make_result(name, t0, worst < tol, os.str());
}

}  // namespace

// ---- routing oracle -------------------------------------------------------------

CheckResult routing_oracle_check(const std::string& name, const RouteFn& fn, RoutingKind kind,
                                 int64_t cases, uint64_t seed, real tol) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int64_t c = 0; c < cases; ++c) {
    const int64_t G = 1 + static_cast<int64_t>(rng() % 2);
    const int64_t I = 1 + static_cast<int64_t>(rng() % 8);
    const int64_t J = 1 + static_cast<int64_t>(rng() % 8);
    const int64_t D = 1 + static_cast<int64_t>(rng() % 8);
    const int iters = 1 + static_cast<int>(rng() % 4);
    std::vector<real> votes(static_cast<size_t>(G * I * J * D));
    for (real& v : votes) v = uniform_real(rng, real(-1.5), real(1.5));

    const RefRouting ref =
        reference_route(votes, G, I, J, D, iters, kind == RoutingKind::Euclidean, false);

    RoutingOptions opt;
    opt.kind = kind;
    opt.iterations = iters;
    RoutingResult got = fn(VoteTensor(Tensor::from({G, I, J, D}, votes)), opt);

    real diff = 0;
    auto cmp = [&diff](const std::vector<real>& a, const std::vector<real>& b) {
      for (size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    };
    cmp(got.parents.values(), ref.parents);
    cmp(got.logits.values(), ref.logits);
    cmp(got.couplings.values(), ref.couplings);
    if (!(diff <= tol)) {
      std::ostringstream os;
      os << "case " << c << " (" << G << "x" << I << "x" << J << "x" << D << ", " << iters
         << " iterations): max deviation " << diff << " from the loop reference";
      return make_result(name, t0, false, os.str());
    }
  }
  return make_result(name, t0, true, "");
}

// ---- the battery ------------------------------------------------------------------

namespace {

CheckResult check_squash_values(uint64_t) {
  const double t0 = now_ms();
  Tensor s = Tensor::from({3, 3}, {0, 0, 0, 1, 0, 0, 3, 0, 0});
  const auto norms = rows_norm(squash(s)).values();
  const real want[3] = {0, real(0.5), real(0.9)};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(norms[static_cast<size_t>(i)] - want[i]) > real(1e-15)) {
      std::ostringstream os;
      os << "norm " << i << " = " << norms[static_cast<size_t>(i)] << ", want " << want[i];
      return make_result("analytic/squash_values", t0, false, os.str());
    }
  }
  return make_result("analytic/squash_values", t0, true, "");
}

CheckResult check_chamfer_singleton(uint64_t) {
  const double t0 = now_ms();
  const real got = chamfer_distance(Tensor::from({1, 3}, {0, 0, 0}),
                                    Tensor::from({1, 3}, {1, 0, 0}))
                       .item();
  return make_result("analytic/chamfer_singleton", t0, got == real(2),
                     "CD({0},{e_x}) = " + std::to_string(got) + ", want 2");
}

CheckResult check_margin_cases(uint64_t) {
  const double t0 = now_ms();
  struct Case {
    std::vector<real> lengths;
    int64_t label;
    real want;
  };
  const Case cases[] = {
      {{real(0.9), real(0.1), real(0.1)}, 0, 0},
      {{0, 0}, 0, real(0.81)},
      {{real(0.5), real(0.5)}, 0, real(0.24)},
  };
  for (const Case& c : cases) {
    const real got =
        margin_loss(Tensor::from({static_cast<int64_t>(c.lengths.size())}, c.lengths), c.label,
                    real(0.9), real(0.1), real(0.5))
            .item();
    if (std::abs(got - c.want) > real(1e-15)) {
      std::ostringstream os;
      os << "label " << c.label << ": got " << got << ", want " << c.want;
      return make_result("analytic/margin_cases", t0, false, os.str());
    }
  }
  return make_result("analytic/margin_cases", t0, true, "");
}

CheckResult check_width_identity(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  std::vector<std::pair<int64_t, int64_t>> shapes;  // (capsules c, window n)
  for (const ModelConfig& c : {ModelConfig::defaults(256, 5), ModelConfig::micro(256, 5)}) {
    shapes.emplace_back(c.capc_count, c.capc_dim);
  }
  for (int r = 0; r < 6; ++r) {
    shapes.emplace_back(1 + static_cast<int64_t>(rng() % 8), 1 + static_cast<int64_t>(rng() % 8));
  }
  for (const auto& [c, n] : shapes) {
    Tensor input = random_tensor({2, c * n, 1}, -1, 1, rng, false);
    Tensor kernels = random_tensor({3, 1, n}, -1, 1, rng, false);
    Tensor out = conv2d_strided(input, kernels, n);
    if (out.extent(1) != c) {
      std::ostringstream os;
      os << "width " << c * n << " / stride " << n << " gave " << out.extent(1) << ", want " << c;
      return make_result("analytic/width_identity", t0, false, os.str());
    }
  }
  return make_result("analytic/width_identity", t0, true, "");
}

CheckResult check_increment_ranges(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  bool er_below_minus_one = false;
  for (int c = 0; c < 1000; ++c) {
    const int64_t D = 1 + static_cast<int64_t>(rng() % 8);
    std::vector<real> v(static_cast<size_t>(D)), p(static_cast<size_t>(D));
    real nv = 0, np = 0;
    for (int64_t d = 0; d < D; ++d) {
      v[static_cast<size_t>(d)] = gaussian(rng);
      p[static_cast<size_t>(d)] = gaussian(rng);
      nv += v[static_cast<size_t>(d)] * v[static_cast<size_t>(d)];
      np += p[static_cast<size_t>(d)] * p[static_cast<size_t>(d)];
    }
    nv = std::sqrt(nv);
    np = std::sqrt(np);
    if (nv == 0 || np == 0) continue;
    real dot = 0, dist = 0, dist10 = 0;
    for (int64_t d = 0; d < D; ++d) {
      const real uv = v[static_cast<size_t>(d)] / nv;
      const real up = p[static_cast<size_t>(d)] / np;
      dot += uv * up;
      dist += (uv - up) * (uv - up);
      dist10 += (10 * uv - up) * (10 * uv - up);
    }
    if (std::abs(dot) > 1 + real(1e-12)) {
      return make_result("routing/increment_ranges", t0, false,
                         "dot increment " + std::to_string(dot) + " outside [-1, 1]");
    }
    if (-dist > 0) {
      return make_result("routing/increment_ranges", t0, false,
                         "euclidean increment above zero");
    }
    if (-dist10 < -1) er_below_minus_one = true;
  }
  return make_result("routing/increment_ranges", t0, er_below_minus_one,
                     "no euclidean increment below -1 even for 10x votes");
}

CheckResult check_range_probe(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 50; ++c) {
    const int64_t I = 2 + static_cast<int64_t>(rng() % 6);
    const int64_t J = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t D = 1 + static_cast<int64_t>(rng() % 6);
    std::vector<real> votes(static_cast<size_t>(I * J * D));
    for (int64_t i = 0; i < I * J; ++i) {
      real n2 = 0;
      for (int64_t d = 0; d < D; ++d) {
        votes[static_cast<size_t>(i * D + d)] = gaussian(rng);
        n2 += votes[static_cast<size_t>(i * D + d)] * votes[static_cast<size_t>(i * D + d)];
      }
      const real n = std::sqrt(n2);
      if (n > 0) {
        for (int64_t d = 0; d < D; ++d) votes[static_cast<size_t>(i * D + d)] /= n;
      }
    }
    const RangeProbe probe = dissimilarity_range_probe(VoteTensor(Tensor::from({I, J, D}, votes)));
    if (probe.dynamic.lo < -1 - real(1e-12) || probe.dynamic.hi > 1 + real(1e-12)) {
      return make_result("routing/range_probe", t0, false,
                         "dot increments left [-1, 1] for unit votes");
    }
    if (probe.euclidean.hi > 0) {
      return make_result("routing/range_probe", t0, false, "euclidean increment above zero");
    }
  }
  return make_result("routing/range_probe", t0, true, "");
}

CheckResult check_er_monotone(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 30; ++c) {
    const int64_t I = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t J = 1 + static_cast<int64_t>(rng() % 6);
    const int64_t D = 1 + static_cast<int64_t>(rng() % 6);
    Tensor votes = random_tensor({I, J, D}, real(-1.5), real(1.5), rng, false);
    std::vector<real> prev;
    for (int iters = 1; iters <= 4; ++iters) {
      const auto logits = route_euclidean(VoteTensor(votes), iters).logits.values();
      for (size_t i = 0; i < logits.size(); ++i) {
        if (logits[i] > real(1e-15)) {
          return make_result("routing/er_logits_nonpositive", t0, false,
                             "positive euclidean logit after " + std::to_string(iters) +
                                 " iterations");
        }
        if (!prev.empty() && logits[i] > prev[i] + real(1e-12)) {
          return make_result("routing/er_logits_nonpositive", t0, false,
                             "euclidean logit rose between iterations");
        }
      }
      prev = logits;
    }
  }
  return make_result("routing/er_logits_nonpositive", t0, true, "");
}

CheckResult check_softmax_simplex(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 50; ++c) {
    const int64_t R = 1 + static_cast<int64_t>(rng() % 5);
    const int64_t C = 1 + static_cast<int64_t>(rng() % 7);
    Tensor x = random_tensor({R, C}, -60, 60, rng, false);
    const auto v = softmax_rows(x).values();
    for (int64_t r = 0; r < R; ++r) {
      real s = 0;
      for (int64_t k = 0; k < C; ++k) {
        const real e = v[static_cast<size_t>(r * C + k)];
        if (e < 0) return make_result("invariant/softmax_simplex", t0, false, "negative entry");
        s += e;
      }
      if (std::abs(s - 1) > real(1e-12)) {
        return make_result("invariant/softmax_simplex", t0, false,
                           "row sum " + std::to_string(s));
      }
    }
  }
  return make_result("invariant/softmax_simplex", t0, true, "");
}

CheckResult check_squash_bound(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  real prev_in = -1, prev_out = -1;
  for (int c = 0; c < 200; ++c) {
    const real target = uniform_real(rng, 0, 100);
    Tensor s = Tensor::from({1, 3}, {target, 0, 0});
    const real out = rows_norm(squash(s)).values()[0];
    if (out >= 1) return make_result("invariant/squash_norm_bound", t0, false, "norm >= 1");
    if (prev_in >= 0 && (target > prev_in) != (out > prev_out) && target != prev_in) {
      return make_result("invariant/squash_norm_bound", t0, false,
                         "squash norm is not monotone in the input norm");
    }
    prev_in = target;
    prev_out = out;
  }
  return make_result("invariant/squash_norm_bound", t0, true, "");
}

CheckResult check_conv_linearity(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 20; ++c) {
    Tensor x = random_tensor({3, 4, 5}, -1, 1, rng, false);
    Tensor y = random_tensor({3, 4, 5}, -1, 1, rng, false);
    Tensor k = random_tensor({6, 1, 5}, -1, 1, rng, false);
    const real a = uniform_real(rng, -2, 2), b = uniform_real(rng, -2, 2);
    const auto lhs = conv1d_feature(add(scale(x, a), scale(y, b)), k).values();
    const auto rhs = add(scale(conv1d_feature(x, k), a), scale(conv1d_feature(y, k), b)).values();
    for (size_t i = 0; i < lhs.size(); ++i) {
      if (std::abs(lhs[i] - rhs[i]) > real(1e-12)) {
        return make_result("invariant/conv_linearity", t0, false,
                           "conv broke superposition by " + std::to_string(lhs[i] - rhs[i]));
      }
    }
  }
  return make_result("invariant/conv_linearity", t0, true, "");
}

CheckResult check_permutation_invariance(uint64_t seed) {
  const double t0 = now_ms();
  NoGradScope ng;
  const ModelConfig cfg = ModelConfig::micro(32, 3);
  ModelState state = ModelState::init(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  Tensor input = random_tensor({cfg.num_points, 3}, -1, 1, rng, false);
  const auto base = rows_norm(encode(input, cfg, state, false).digit.activities).values();
  for (int p = 0; p < 5; ++p) {
    std::vector<int64_t> perm(static_cast<size_t>(cfg.num_points));
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
    for (size_t i = perm.size() - 1; i > 0; --i) {
      std::swap(perm[i], perm[static_cast<size_t>(rng() % (i + 1))]);
    }
    std::vector<real> shuffled(input.values().size());
    for (size_t i = 0; i < perm.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        shuffled[3 * i + static_cast<size_t>(k)] =
            input.values()[static_cast<size_t>(3 * perm[i] + k)];
      }
    }
    const auto got =
        rows_norm(encode(Tensor::from(input.shape(), shuffled), cfg, state, false).digit.activities)
            .values();
    for (size_t i = 0; i < base.size(); ++i) {
      if (std::abs(base[i] - got[i]) > real(1e-9)) {
        return make_result("invariant/permutation_invariance", t0, false,
                           "class lengths moved by " + std::to_string(base[i] - got[i]));
      }
    }
  }
  return make_result("invariant/permutation_invariance", t0, true, "");
}

CheckResult check_bn_normalization(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  Tensor x = random_tensor({64, 3}, -4, 7, rng, false);
  Tensor gamma = Tensor::full({3}, 1);
  Tensor beta = Tensor::zeros({3});
  const auto y = batch_norm(x, gamma, beta, nullptr, true).values();
  for (int64_t c = 0; c < 3; ++c) {
    real mean = 0, var = 0;
    for (int64_t i = 0; i < 64; ++i) mean += y[static_cast<size_t>(i * 3 + c)];
    mean /= 64;
    for (int64_t i = 0; i < 64; ++i) {
      const real d = y[static_cast<size_t>(i * 3 + c)] - mean;
      var += d * d;
    }
    var /= 64;
    if (std::abs(mean) > real(1e-12) || std::abs(var - 1) > real(1e-3)) {
      return make_result("invariant/bn_normalization", t0, false,
                         "channel mean/var " + std::to_string(mean) + "/" + std::to_string(var));
    }
  }
  return make_result("invariant/bn_normalization", t0, true, "");
}

CheckResult check_stopgrad_value_match(uint64_t seed) {
  const double t0 = now_ms();
  std::mt19937_64 rng(seed);
  for (int c = 0; c < 20; ++c) {
    Tensor votes = random_tensor({2, 4, 3, 2}, real(-1.5), real(1.5), rng, false);
    RoutingOptions unrolled;
    unrolled.kind = c % 2 == 0 ? RoutingKind::Euclidean : RoutingKind::Dynamic;
    unrolled.iterations = 3;
    RoutingOptions stopped = unrolled;
    stopped.unroll_grad = false;
    const auto a = route(VoteTensor(votes), unrolled).parents.values();
    const auto b = route(VoteTensor(votes), stopped).parents.values();
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) {
        return make_result("routing/stopgrad_value_match", t0, false,
                           "stop-gradient mode changed the forward value");
      }
    }
  }
  return make_result("routing/stopgrad_value_match", t0, true, "");
}

std::vector<CheckResult> gradient_checks(uint64_t seed) {
  std::vector<CheckResult> out;
  auto run = [&](const char* name, const std::function<std::vector<Tensor>(std::mt19937_64&)>& mk,
                 const OpFn& f) { out.push_back(grad_check(name, seed, 3, mk, f)); };

  run("grad/add",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3}, -1, 1, rng),
                                   random_tensor({2, 3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return add(in[0], in[1]); });
  run("grad/mul",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3}, -1, 1, rng),
                                   random_tensor({2, 3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return mul(in[0], in[1]); });
  run("grad/relu",
      [](std::mt19937_64& rng) {
        std::vector<real> v(8);
        for (real& x : v) {
          x = uniform_real(rng, real(0.1), 1);
          if (rng() & 1) x = -x;  // keep clear of the kink
        }
        return std::vector<Tensor>{Tensor::from({2, 4}, std::move(v), true)};
      },
      [](std::vector<Tensor>& in) { return relu(in[0]); });
  run("grad/swish",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 4}, -3, 3, rng)};
      },
      [](std::vector<Tensor>& in) { return swish(in[0]); });
  run("grad/softmax",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({3, 4}, -3, 3, rng)};
      },
      [](std::vector<Tensor>& in) { return softmax_rows(in[0]); });
  run("grad/squash",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({3, 4}, real(0.3), real(1.3), rng)};
      },
      [](std::vector<Tensor>& in) { return squash(in[0]); });
  run("grad/rows_norm",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({3, 4}, real(0.3), real(1.3), rng)};
      },
      [](std::vector<Tensor>& in) { return rows_norm(in[0]); });
  run("grad/conv1d",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4}, -1, 1, rng),
                                   random_tensor({5, 1, 4}, -1, 1, rng),
                                   random_tensor({5}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return conv1d_feature(in[0], in[1], in[2]); });
  run("grad/conv2d_strided",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 8, 1}, -1, 1, rng),
                                   random_tensor({3, 1, 2}, -1, 1, rng),
                                   random_tensor({3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return conv2d_strided(in[0], in[1], 2, in[2]); });
  run("grad/deconv",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4}, -1, 1, rng),
                                   random_tensor({2, 4, 3}, -1, 1, rng),
                                   random_tensor({3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return deconv_width(in[0], in[1], 2, in[2]); });
  run("grad/capsule_transform",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4}, -1, 1, rng),
                                   random_tensor({3, 5, 4, 2}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return capsule_transform(in[0], in[1]); });
  run("grad/weighted_vote_sum",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4, 2}, -1, 1, rng),
                                   random_tensor({2, 3, 4}, real(0.1), 1, rng)};
      },
      [](std::vector<Tensor>& in) { return weighted_vote_sum(in[0], in[1]); });
  run("grad/vote_sqdist",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4, 2}, -1, 1, rng),
                                   random_tensor({2, 4, 2}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return vote_parent_sqdist(in[0], in[1]); });
  run("grad/vote_dot",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4, 2}, -1, 1, rng),
                                   random_tensor({2, 4, 2}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return vote_parent_dot(in[0], in[1]); });
  run("grad/vote_dot_cosine",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 3, 4, 2}, real(0.3), real(1.3), rng),
                                   random_tensor({2, 4, 2}, real(0.3), real(1.3), rng)};
      },
      [](std::vector<Tensor>& in) { return vote_parent_dot(in[0], in[1], true); });
  run("grad/batch_norm",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({6, 3}, -2, 2, rng),
                                   random_tensor({3}, real(0.5), real(1.5), rng),
                                   random_tensor({3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return batch_norm(in[0], in[1], in[2], nullptr, true); });
  run("grad/chamfer",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({4, 3}, -1, 1, rng),
                                   random_tensor({5, 3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return chamfer_distance(in[0], in[1]); });
  run("grad/concat",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 2, 3}, -1, 1, rng),
                                   random_tensor({2, 4, 3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return concat(in[0], in[1], -2); });
  run("grad/select_rows",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 4, 3}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return select_rows(in[0], {1, 3}); });
  run("grad/reshape",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({2, 6}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) { return reshape(in[0], {3, 4}); });
  run("grad/route_er",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({1, 3, 4, 2}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) {
        RoutingOptions opt;
        opt.kind = RoutingKind::Euclidean;
        opt.iterations = 2;
        return route(VoteTensor(in[0]), opt).parents;
      });
  run("grad/route_dr",
      [](std::mt19937_64& rng) {
        return std::vector<Tensor>{random_tensor({1, 3, 4, 2}, -1, 1, rng)};
      },
      [](std::vector<Tensor>& in) {
        RoutingOptions opt;
        opt.kind = RoutingKind::Dynamic;
        opt.iterations = 2;
        return route(VoteTensor(in[0]), opt).parents;
      });
  return out;
}

}  // namespace

std::vector<CheckResult> run_verification(uint64_t seed) {
  std::vector<CheckResult> out = gradient_checks(seed);
  const RouteFn production = [](const VoteTensor& v, const RoutingOptions& o) {
    return route(v, o);
  };
  out.push_back(routing_oracle_check("routing/euclidean_oracle", production,
                                     RoutingKind::Euclidean, 60, seed + 1, real(1e-12)));
  out.push_back(routing_oracle_check("routing/dynamic_oracle", production, RoutingKind::Dynamic,
                                     60, seed + 2, real(1e-12)));
  out.push_back(check_er_monotone(seed + 3));
  out.push_back(check_increment_ranges(seed + 4));
  out.push_back(check_range_probe(seed + 5));
  out.push_back(check_stopgrad_value_match(seed + 6));
  out.push_back(check_squash_values(seed));
  out.push_back(check_chamfer_singleton(seed));
  out.push_back(check_margin_cases(seed));
  out.push_back(check_width_identity(seed + 7));
  out.push_back(check_softmax_simplex(seed + 8));
  out.push_back(check_squash_bound(seed + 9));
  out.push_back(check_conv_linearity(seed + 10));
  out.push_back(check_bn_normalization(seed + 11));
  out.push_back(check_permutation_invariance(seed + 12));
  return out;
}

}  // namespace pointcaps
