#include "support/oracles.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>

#include "pointcaps/ops.hpp"

namespace oracle {

using pointcaps::NoGradScope;
using pointcaps::real;
using pointcaps::Tape;
using pointcaps::TapeScope;
using pointcaps::Tensor;

namespace {

double splitmix_unit(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

}  // namespace

GradReport check_gradient(const std::vector<Tensor>& leaves,
                          const std::function<Tensor()>& forward, double h,
                          uint64_t weight_seed) {
  // Fix the loss weights from a probe evaluation so both routes see the same
  // scalar function.
  size_t out_n = 0;
  pointcaps::Shape out_shape;
  {
    NoGradScope ng;
    Tensor probe = forward();
    out_n = static_cast<size_t>(probe.size());
    out_shape = probe.shape();
  }
  uint64_t ws = weight_seed * 0x9e3779b97f4a7c15ull + 0x7f4a7c15ull;
  std::vector<real> w(out_n);
  for (auto& x : w) x = 2 * splitmix_unit(ws) - 1;

  const auto loss_value = [&]() {
    NoGradScope ng;
    Tensor out = forward();
    const auto& v = out.values();
    double s = 0;
    for (size_t i = 0; i < out_n; ++i) s += v[i] * w[i];
    return s;
  };

  std::vector<std::vector<real>> analytic(leaves.size());
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = forward();
    Tensor loss = pointcaps::sum(pointcaps::mul(out, Tensor::from(out_shape, w)));
    tape.backward(loss);
    for (size_t l = 0; l < leaves.size(); ++l) {
      analytic[l] = leaves[l].has_grad() ? leaves[l].grad()
                                         : std::vector<real>(leaves[l].values().size(), 0);
    }
  }
  for (const Tensor& leaf : leaves) {
    Tensor mut = leaf;
    mut.zero_grad();
  }

  GradReport report;
  for (size_t l = 0; l < leaves.size(); ++l) {
    Tensor leaf = leaves[l];
    auto& vals = leaf.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      const real orig = vals[i];
      vals[i] = orig + static_cast<real>(h);
      const double up = loss_value();
      vals[i] = orig - static_cast<real>(h);
      const double down = loss_value();
      vals[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = analytic[l][i];
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.fd = fd;
        report.analytic = an;
        report.where = "leaf " + std::to_string(l) + " [" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

RouteRef route_reference(const std::vector<double>& votes, int64_t groups, int64_t children,
                         int64_t parents, int64_t dim, int iterations, bool euclidean,
                         bool cosine) {
  const int64_t I = children, J = parents, D = dim;
  RouteRef ref;
  ref.parents.assign(static_cast<size_t>(groups * J * D), 0.0);
  ref.logits.assign(static_cast<size_t>(groups * I * J), 0.0);
  ref.couplings.assign(static_cast<size_t>(groups * I * J), 0.0);

  std::vector<double> s(static_cast<size_t>(J * D));
  std::vector<double> p(static_cast<size_t>(J * D));
  std::vector<double> k(static_cast<size_t>(I * J));

  for (int64_t g = 0; g < groups; ++g) {
    const double* v = votes.data() + g * I * J * D;
    double* b = ref.logits.data() + g * I * J;

    for (int t = 0; t < iterations; ++t) {
      // couplings: softmax over the parent axis, one row per child
      for (int64_t i = 0; i < I; ++i) {
        double mx = b[i * J];
        for (int64_t j = 1; j < J; ++j) mx = std::max(mx, b[i * J + j]);
        double z = 0;
        for (int64_t j = 0; j < J; ++j) {
          k[i * J + j] = std::exp(b[i * J + j] - mx);
          z += k[i * J + j];
        }
        for (int64_t j = 0; j < J; ++j) k[i * J + j] /= z;
      }
      // parent outputs: weighted vote sum, then squash
      for (int64_t j = 0; j < J; ++j) {
        for (int64_t e = 0; e < D; ++e) {
          double acc = 0;
          for (int64_t i = 0; i < I; ++i) acc += k[i * J + j] * v[(i * J + j) * D + e];
          s[j * D + e] = acc;
        }
        double n2 = 0;
        for (int64_t e = 0; e < D; ++e) n2 += s[j * D + e] * s[j * D + e];
        const double scale = n2 == 0 ? 0.0 : std::sqrt(n2) / (1.0 + n2);
        for (int64_t e = 0; e < D; ++e) p[j * D + e] = s[j * D + e] * scale;
      }
      // logit update, every iteration including the last
      for (int64_t i = 0; i < I; ++i) {
        for (int64_t j = 0; j < J; ++j) {
          if (euclidean) {
            double d2 = 0;
            for (int64_t e = 0; e < D; ++e) {
              const double diff = v[(i * J + j) * D + e] - p[j * D + e];
              d2 += diff * diff;
            }
            b[i * J + j] -= d2;
          } else {
            double dot = 0, vn = 0, pn = 0;
            for (int64_t e = 0; e < D; ++e) {
              dot += v[(i * J + j) * D + e] * p[j * D + e];
              vn += v[(i * J + j) * D + e] * v[(i * J + j) * D + e];
              pn += p[j * D + e] * p[j * D + e];
            }
            b[i * J + j] += cosine ? dot / (std::sqrt(vn) * std::sqrt(pn) + 1e-12) : dot;
          }
        }
      }
    }
    std::copy(p.begin(), p.end(), ref.parents.begin() + g * J * D);
    std::copy(k.begin(), k.end(), ref.couplings.begin() + g * I * J);
  }
  return ref;
}

std::vector<double> conv1d_reference(const std::vector<double>& input, int64_t rows,
                                     int64_t feat, const std::vector<double>& kernels,
                                     int64_t k, const std::vector<double>& bias) {
  std::vector<double> out(static_cast<size_t>(rows * k), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t o = 0; o < k; ++o) {
      double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
      for (int64_t f = 0; f < feat; ++f) {
        acc += input[static_cast<size_t>(r * feat + f)] *
               kernels[static_cast<size_t>(o * feat + f)];
      }
      out[static_cast<size_t>(r * k + o)] = acc;
    }
  }
  return out;
}

std::vector<double> strided_conv_reference(const std::vector<double>& input, int64_t width,
                                           const std::vector<double>& kernels, int64_t k,
                                           int64_t stride, const std::vector<double>& bias) {
  const int64_t out_w = width / stride;
  std::vector<double> out(static_cast<size_t>(out_w * k), 0.0);
  for (int64_t w = 0; w < out_w; ++w) {
    for (int64_t o = 0; o < k; ++o) {
      double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
      for (int64_t t = 0; t < stride; ++t) {
        acc += input[static_cast<size_t>(w * stride + t)] *
               kernels[static_cast<size_t>(o * stride + t)];
      }
      out[static_cast<size_t>(w * k + o)] = acc;
    }
  }
  return out;
}

std::vector<double> deconv_reference(const std::vector<double>& input, int64_t width,
                                     int64_t cin, const std::vector<double>& kernels,
                                     int64_t kw, int64_t cout, int64_t stride,
                                     const std::vector<double>& bias) {
  std::vector<double> out(static_cast<size_t>(width * stride * cout), 0.0);
  for (int64_t w = 0; w < width; ++w) {
    for (int64_t t = 0; t < kw; ++t) {
      for (int64_t o = 0; o < cout; ++o) {
        double acc = 0;
        for (int64_t c = 0; c < cin; ++c) {
          acc += input[static_cast<size_t>(w * cin + c)] *
                 kernels[static_cast<size_t>((t * cin + c) * cout + o)];
        }
        out[static_cast<size_t>((w * stride + t) * cout + o)] = acc;
      }
    }
  }
  if (!bias.empty()) {
    for (int64_t x = 0; x < width * stride; ++x) {
      for (int64_t o = 0; o < cout; ++o) {
        out[static_cast<size_t>(x * cout + o)] += bias[static_cast<size_t>(o)];
      }
    }
  }
  return out;
}

double chamfer_reference(const std::vector<double>& x, int64_t n,
                         const std::vector<double>& y, int64_t m, int64_t d) {
  const auto sq = [&](int64_t i, int64_t j) {
    double acc = 0;
    for (int64_t e = 0; e < d; ++e) {
      const double diff = x[static_cast<size_t>(i * d + e)] - y[static_cast<size_t>(j * d + e)];
      acc += diff * diff;
    }
    return acc;
  };
  double fwd = 0;
  for (int64_t i = 0; i < n; ++i) {
    double best = sq(i, 0);
    for (int64_t j = 1; j < m; ++j) best = std::min(best, sq(i, j));
    fwd += best;
  }
  double bwd = 0;
  for (int64_t j = 0; j < m; ++j) {
    double best = sq(0, j);
    for (int64_t i = 1; i < n; ++i) best = std::min(best, sq(i, j));
    bwd += best;
  }
  return fwd / static_cast<double>(n) + bwd / static_cast<double>(m);
}

std::vector<double> moment_trace_reference(double theta0, double lr,
                                           const std::vector<double>& grads, bool rectify,
                                           double beta1, double beta2, double eps) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  double theta = theta0, m = 0, v = 0;
  std::vector<double> trace;
  for (size_t t1 = 1; t1 <= grads.size(); ++t1) {
    const double t = static_cast<double>(t1);
    const double g = grads[t1 - 1];
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double m_hat = m / (1 - std::pow(beta1, t));
    if (!rectify) {
      theta -= lr * m_hat / (std::sqrt(v / (1 - std::pow(beta2, t))) + eps);
    } else {
      const double rho = rho_inf - 2 * t * std::pow(beta2, t) / (1 - std::pow(beta2, t));
      if (rho > 4) {
        const double rect = std::sqrt(((rho - 4) * (rho - 2) * rho_inf) /
                                      ((rho_inf - 4) * (rho_inf - 2) * rho));
        theta -= lr * rect * m_hat / (std::sqrt(v / (1 - std::pow(beta2, t))) + eps);
      } else {
        theta -= lr * m_hat;
      }
    }
    trace.push_back(theta);
  }
  return trace;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<uint64_t> counter{0};
  const uint64_t id = counter.fetch_add(1);
  path = std::filesystem::temp_directory_path() /
         (tag + "-" + std::to_string(static_cast<long long>(::getpid())) + "-" +
          std::to_string(id));
  std::filesystem::create_directories(path);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path, ec);
}

}  // namespace oracle
