#pragma once

// Conditional normalizing flow. In the density direction (ε -> z) the stack
// is a condition-dependent elementwise affine map followed by `depth`
// layers: RealNVP affine couplings over alternating halves of the residual
// for K >= 2, or monotone rational-quadratic splines for K = 1. Every
// layer's parameter subnet reads the encoder features h, and all output
// layers start at zero so an untrained flow is the identity.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

struct FlowConfig {
  std::size_t K = 2;
  std::size_t depth = 6;         // coupling (K >= 2) or spline (K = 1) layers
  std::size_t hidden = 64;       // subnet width
  std::size_t spline_bins = 8;
  double tail_bound = 5.0;       // splines act on [-B, B], identity outside
  double scale_bound = 2.0;      // initial value of each learned tanh bound
  EncoderConfig encoder;
};

struct FlowEvalResult {
  std::vector<double> z;
  double log_det = 0.0;  // ln |det ∂z/∂ε|
};

namespace detail {

/// (1, C) -> (n, C) by row replication; other shapes pass through.
inline Tensor expand_rows(const Tensor& t, std::size_t n) {
  if (t.dim(0) == n) return t;
  if (t.dim(0) != 1) throw ContractViolation("flow: cannot broadcast " + to_string(t.shape()) + " to " +
                                             std::to_string(n) + " rows");
  return matmul(Tensor::full({n, 1}, 1.0), t);
}

inline void check_layer(const Tensor& t, std::size_t layer) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError("flow: non-finite value after layer " + std::to_string(layer), static_cast<int>(layer));
}

}  // namespace detail

class FlowModel : public DensityModel {
 public:
  static constexpr double kMinBin = 1e-3;

  FlowModel(const FlowConfig& config, std::uint64_t seed) : cfg_(config) {
    if (cfg_.K == 0) throw ContractViolation("flow: K must be >= 1");
    if (cfg_.depth == 0 && cfg_.K == 1) throw ContractViolation("flow: K=1 needs at least one spline layer");
    if (cfg_.spline_bins < 2 || !(cfg_.tail_bound > 0.0)) throw ContractViolation("flow: invalid spline settings");
    Rng rng = make_stream(seed, 0xf10e);
    encoder_ = Encoder(cfg_.encoder, store_, rng);
    const std::size_t W = cfg_.encoder.width, K = cfg_.K, H = cfg_.hidden;

    affine_.net = make_linear(store_, "flow.affine", W, 2 * K, rng, Init::Zero);
    affine_.bound = store_.add("flow.affine.bound", {1, 1}, {cfg_.scale_bound});

    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::string name = "flow.layer" + std::to_string(i);
      Layer l;
      if (K == 1) {
        l.hidden = make_linear(store_, name + ".hidden", W, H, rng);
        l.out = make_linear(store_, name + ".out", H, 3 * cfg_.spline_bins - 1, rng, Init::Zero);
      } else {
        const std::size_t half = K / 2;
        // Even layers transform the upper half given the lower, odd layers the reverse.
        if (i % 2 == 0) {
          l.cond_lo = 0, l.cond_hi = half, l.tr_lo = half, l.tr_hi = K;
        } else {
          l.cond_lo = half, l.cond_hi = K, l.tr_lo = 0, l.tr_hi = half;
        }
        const std::size_t ka = l.cond_hi - l.cond_lo, kb = l.tr_hi - l.tr_lo;
        Rng sub = make_stream(seed, 0xf10e, i + 1);
        l.in_x = store_.add(name + ".in_x", {ka, H}, detail::init_values(ka * H, ka + W, Init::He, sub));
        l.in_h = make_linear(store_, name + ".in_h", W, H, sub);
        l.hidden = make_linear(store_, name + ".hidden", H, H, sub);
        l.scale = make_linear(store_, name + ".scale", H, kb, sub, Init::Zero);
        l.shift = make_linear(store_, name + ".shift", H, kb, sub, Init::Zero);
        l.bound = store_.add(name + ".bound", {1, 1}, {cfg_.scale_bound});
      }
      layers_.push_back(std::move(l));
    }
  }

  ModelFamily family() const override { return ModelFamily::Flow; }
  std::size_t K() const override { return cfg_.K; }
  const FlowConfig& config() const { return cfg_; }

  Tensor features(const Tensor& cond, bool training = false) const { return encoder_(cond, training); }

  /// z = f⁻¹(ε, x) and ln|det ∂z/∂ε| per row, from encoder features h
  /// (rows 1 or B).
  std::pair<Tensor, Tensor> inverse(const Tensor& h, const Tensor& eps) const {
    const std::size_t B = eps.dim(0);
    Tensor x = eps;
    Tensor logdet = Tensor::zeros({B, 1});
    std::size_t layer = 0;
    try {
      const Tensor ab = affine_.net(h);
      const Tensor a = affine_.bound * tanh(slice(ab, 1, 0, cfg_.K));
      const Tensor t = slice(ab, 1, cfg_.K, 2 * cfg_.K);
      x = (x - t) * exp(-a);
      logdet = logdet - sum(a, 1, true);
      detail::check_layer(x, layer);
      for (const auto& l : layers_) {
        ++layer;
        if (cfg_.K == 1) {
          auto [y, ld] = spline_inverse(l, h, x);
          x = y;
          logdet = logdet + ld;
        } else {
          const Tensor xa = slice(x, 1, l.cond_lo, l.cond_hi), xb = slice(x, 1, l.tr_lo, l.tr_hi);
          auto [s, sh] = coupling_params(l, h, xa);
          const Tensor yb = (xb - sh) * exp(-s);
          x = l.cond_lo == 0 ? concat({xa, yb}, 1) : concat({yb, xa}, 1);
          logdet = logdet - sum(s, 1, true);
        }
        detail::check_layer(x, layer);
      }
    } catch (const NumericError& e) {
      if (e.layer() >= 0) throw;
      throw NumericError(std::string(e.what()) + " (layer " + std::to_string(layer) + ")", static_cast<int>(layer));
    }
    detail::check_layer(logdet, layer);
    return {x, logdet};
  }

  /// ε = f(z, x) and ln|det ∂ε/∂z| per row. Off the tape.
  std::pair<Tensor, Tensor> forward(const Tensor& h, const Tensor& z) const {
    NoGradGuard guard;
    const std::size_t B = z.dim(0);
    Tensor x = z;
    Tensor logdet = Tensor::zeros({B, 1});
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto& l = layers_[i];
      if (cfg_.K == 1) {
        auto [y, ld] = spline_forward(l, h, x);
        x = y;
        logdet = logdet + ld;
      } else {
        const Tensor xa = slice(x, 1, l.cond_lo, l.cond_hi), yb = slice(x, 1, l.tr_lo, l.tr_hi);
        auto [s, sh] = coupling_params(l, h, xa);
        const Tensor xb = yb * exp(s) + sh;
        x = l.cond_lo == 0 ? concat({xa, xb}, 1) : concat({xb, xa}, 1);
        logdet = logdet + sum(s, 1, true);
      }
      detail::check_layer(x, i + 1);
    }
    const Tensor ab = affine_.net(h);
    const Tensor a = affine_.bound * tanh(slice(ab, 1, 0, cfg_.K));
    x = x * exp(a) + slice(ab, 1, cfg_.K, 2 * cfg_.K);
    logdet = logdet + sum(a, 1, true);
    detail::check_layer(x, 0);
    return {x, logdet};
  }

  Tensor log_prob(const Tensor& cond, const Tensor& eps, bool training = false) const override {
    check_eps(cond, eps);
    return log_prob_from_features(features(cond, training), eps);
  }

  /// ln π(z) + ln|det ∂z/∂ε| with h rows 1 (broadcast) or B.
  Tensor log_prob_from_features(const Tensor& h, const Tensor& eps) const {
    auto [z, logdet] = inverse(h, eps);
    const double c = 0.5 * static_cast<double>(cfg_.K) * std::log(2.0 * std::numbers::pi);
    return logdet - 0.5 * sum(square(z), 1, true) - c;
  }

  FlowEvalResult nf_inverse(std::span<const double> eps, const Tensor& cond1) const {
    check_single(cond1);
    NoGradGuard guard;
    auto [z, ld] = inverse(features(cond1), Tensor({1, cfg_.K}, std::vector<double>(eps.begin(), eps.end())));
    return {z.to_vector(), ld.item()};
  }

  double nf_log_prob(std::span<const double> eps, const Tensor& cond1) const {
    check_single(cond1);
    NoGradGuard guard;
    return log_prob_from_features(features(cond1), Tensor({1, cfg_.K}, std::vector<double>(eps.begin(), eps.end())))
        .item();
  }

  /// ε = f(z, x) for one latent vector.
  std::vector<double> nf_forward(std::span<const double> z, const Tensor& cond1) const {
    check_single(cond1);
    return forward(features(cond1), Tensor({1, cfg_.K}, std::vector<double>(z.begin(), z.end()))).first.to_vector();
  }

  std::vector<double> log_density_points(const Tensor& cond1, std::span<const double> points) const override {
    check_single(cond1);
    NoGradGuard guard;
    const Tensor h = features(cond1);
    const std::size_t P = points.size() / cfg_.K;
    std::vector<double> out;
    out.reserve(P);
    constexpr std::size_t chunk = 4096;
    for (std::size_t s = 0; s < P; s += chunk) {
      const std::size_t n = std::min(chunk, P - s);
      const Tensor eps({n, cfg_.K}, std::vector<double>(points.begin() + static_cast<std::ptrdiff_t>(s * cfg_.K),
                                                         points.begin() + static_cast<std::ptrdiff_t>((s + n) * cfg_.K)));
      const Tensor lp = log_prob_from_features(h, eps);
      out.insert(out.end(), lp.data().begin(), lp.data().end());
    }
    return out;
  }

  std::vector<double> sample(const Tensor& cond1, std::size_t n, Rng& rng) const override {
    check_single(cond1);
    NoGradGuard guard;
    const Tensor h = features(cond1);
    std::vector<double> z(n * cfg_.K);
    for (auto& v : z) v = standard_normal(rng);
    return forward(h, Tensor({n, cfg_.K}, std::move(z))).first.to_vector();
  }

 private:
  struct Affine {
    Linear net;  // h -> [log-scale raw (K) | shift (K)]
    Tensor bound;
  };

  struct Layer {
    // Coupling (K >= 2): dims [cond_lo, cond_hi) condition dims [tr_lo, tr_hi).
    std::size_t cond_lo = 0, cond_hi = 0, tr_lo = 0, tr_hi = 0;
    Tensor in_x;
    Linear in_h, hidden, scale, shift;
    Tensor bound;
    // Spline (K = 1): hidden then `out` -> [widths | heights | interior derivatives].
    Linear out;
  };

  std::pair<Tensor, Tensor> coupling_params(const Layer& l, const Tensor& h, const Tensor& xa) const {
    const Tensor a = relu(matmul(xa, l.in_x) + l.in_h(h));
    const Tensor b = relu(l.hidden(a));
    return {l.bound * tanh(l.scale(b)), l.shift(b)};
  }

  struct Knots {
    Tensor xs, ys, ds;  // (B, bins+1) each
  };

  Knots spline_knots(const Layer& l, const Tensor& h, std::size_t rows) const {
    const std::size_t nb = cfg_.spline_bins;
    const double B = cfg_.tail_bound;
    const Tensor raw = detail::expand_rows(l.out(relu(l.hidden(h))), rows);
    std::vector<double> upper(nb * (nb + 1), 0.0);
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t j = i + 1; j <= nb; ++j) upper[i * (nb + 1) + j] = 1.0;
    const Tensor cum({nb, nb + 1}, std::move(upper));
    const double scale = 1.0 - kMinBin * static_cast<double>(nb);
    auto knots = [&](std::size_t from) {
      const Tensor w = (softmax(slice(raw, 1, from, from + nb), 1) * scale + kMinBin) * (2.0 * B);
      return matmul(w, cum) - B;
    };
    const Tensor ones = Tensor::full({rows, 1}, 1.0);
    const Tensor d = exp(3.0 * tanh(slice(raw, 1, 2 * nb, 3 * nb - 1) / 3.0));
    return {knots(0), knots(nb), concat({ones, d, ones}, 1)};
  }

  static std::vector<std::size_t> locate(const Tensor& knots, const Tensor& v) {
    const std::size_t rows = v.dim(0), cols = knots.dim(1);
    std::vector<std::size_t> idx(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* k = knots.data().data() + r * cols;
      const double x = v.data()[r];
      std::size_t i = static_cast<std::size_t>(std::upper_bound(k, k + cols, x) - k);
      idx[r] = std::clamp<std::size_t>(i == 0 ? 0 : i - 1, 0, cols - 2);
    }
    return idx;
  }

  /// Monotone rational-quadratic map ε-side -> z-side, identity outside [-B, B].
  std::pair<Tensor, Tensor> spline_inverse(const Layer& l, const Tensor& h, const Tensor& x) const {
    const std::size_t rows = x.dim(0);
    const double B = cfg_.tail_bound;
    std::vector<double> in(rows);
    for (std::size_t r = 0; r < rows; ++r) in[r] = std::abs(x.data()[r]) <= B ? 1.0 : 0.0;
    const Tensor inside({rows, 1}, in), outside = 1.0 - inside;
    const Tensor xe = x * inside;  // outside rows evaluate at 0, then are masked away
    const Knots kn = spline_knots(l, h, rows);
    const auto idx = locate(kn.xs, xe);
    auto next = idx;
    for (auto& i : next) ++i;
    const Tensor xk = select_columns(kn.xs, idx), xk1 = select_columns(kn.xs, next);
    const Tensor yk = select_columns(kn.ys, idx), yk1 = select_columns(kn.ys, next);
    const Tensor dk = select_columns(kn.ds, idx), dk1 = select_columns(kn.ds, next);
    const Tensor w = xk1 - xk, hgt = yk1 - yk, s = hgt / w;
    const Tensor xi = (xe - xk) / w, om = 1.0 - xi, xo = xi * om;
    const Tensor den = s + (dk1 + dk - 2.0 * s) * xo;
    const Tensor y = yk + hgt * (s * square(xi) + dk * xo) / den;
    const Tensor dnum = dk1 * square(xi) + 2.0 * s * xo + dk * square(om);
    const Tensor ld = 2.0 * log(s) + log(dnum) - 2.0 * log(den);
    return {inside * y + outside * x, inside * ld};
  }

  /// Inverse of spline_inverse by the quadratic root, z-side -> ε-side.
  std::pair<Tensor, Tensor> spline_forward(const Layer& l, const Tensor& h, const Tensor& y) const {
    const std::size_t rows = y.dim(0);
    const double B = cfg_.tail_bound;
    const Knots kn = spline_knots(l, h, rows);
    const auto idx = locate(kn.ys, y);
    const std::size_t cols = kn.xs.dim(1);
    std::vector<double> out(rows), ld(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double v = y.data()[r];
      if (std::abs(v) > B) {
        out[r] = v;
        continue;
      }
      const std::size_t i = idx[r];
      const double* X = kn.xs.data().data() + r * cols;
      const double* Y = kn.ys.data().data() + r * cols;
      const double* D = kn.ds.data().data() + r * cols;
      const double w = X[i + 1] - X[i], hg = Y[i + 1] - Y[i], s = hg / w;
      const double dy = v - Y[i], c2 = D[i + 1] + D[i] - 2.0 * s;
      const double a = hg * (s - D[i]) + dy * c2;
      const double b = hg * D[i] - dy * c2;
      const double c = -s * dy;
      const double disc = std::max(0.0, b * b - 4.0 * a * c);
      const double xi = std::clamp(2.0 * c / (-b - std::sqrt(disc)), 0.0, 1.0);
      out[r] = X[i] + xi * w;
      const double xo = xi * (1.0 - xi);
      const double den = s + c2 * xo;
      const double dnum = D[i + 1] * xi * xi + 2.0 * s * xo + D[i] * (1.0 - xi) * (1.0 - xi);
      ld[r] = -(2.0 * std::log(s) + std::log(dnum) - 2.0 * std::log(den));
    }
    return {Tensor({rows, 1}, std::move(out)), Tensor({rows, 1}, std::move(ld))};
  }

  FlowConfig cfg_;
  Encoder encoder_;
  Affine affine_;
  std::vector<Layer> layers_;
};

}  // namespace dpdf
