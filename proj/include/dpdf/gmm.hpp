#pragma once

// Mixture density network: the encoder's features feed one linear head
// that emits, per component, a weight logit, a mean, the strictly lower
// entries of a unit-lower-triangular L and the log of a positive diagonal
// D, so each covariance is Σ = L D Lᵀ.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dpdf/dataset.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

// ---------------------------------------------------------------------------
// LDL covariance

/// Σ = L D Lᵀ with unit-lower-triangular L (row-major K x K) and D > 0.
class Ldl {
 public:
  Ldl(std::size_t K, std::vector<double> L, std::vector<double> D) : K_(K), L_(std::move(L)), D_(std::move(D)) {
    if (L_.size() != K * K || D_.size() != K) throw ContractViolation("ldl: factor sizes do not match K");
    for (std::size_t i = 0; i < K; ++i) {
      if (!(D_[i] > 0.0) || !std::isfinite(D_[i])) throw ContractViolation("ldl: D entries must be positive");
      if (L_[i * K + i] != 1.0) throw ContractViolation("ldl: L must have a unit diagonal");
      for (std::size_t j = i + 1; j < K; ++j)
        if (L_[i * K + j] != 0.0) throw ContractViolation("ldl: L must be lower triangular");
    }
  }

  std::size_t K() const { return K_; }
  const std::vector<double>& L() const { return L_; }
  const std::vector<double>& D() const { return D_; }

  Eigen::MatrixXd covariance() const {
    const auto n = static_cast<Eigen::Index>(K_);
    Eigen::Map<const RowMatrix> L(L_.data(), n, n);
    Eigen::Map<const Eigen::VectorXd> D(D_.data(), n);
    return L * D.asDiagonal() * L.transpose();
  }

  double log_det() const {
    double s = 0.0;
    for (double d : D_) s += std::log(d);
    return s;
  }

  /// y with L y = v (forward substitution).
  std::vector<double> forward(std::span<const double> v) const {
    std::vector<double> y(v.begin(), v.end());
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t j = 0; j < k; ++j) y[k] -= L_[k * K_ + j] * y[j];
    return y;
  }

  /// Σ⁻¹ v via two triangular solves.
  std::vector<double> solve(std::span<const double> v) const {
    std::vector<double> y = forward(v);
    for (std::size_t k = 0; k < K_; ++k) y[k] /= D_[k];
    for (std::size_t k = K_; k-- > 0;)
      for (std::size_t j = k + 1; j < K_; ++j) y[k] -= L_[j * K_ + k] * y[j];
    return y;
  }

  /// vᵀ Σ⁻¹ v.
  double mahalanobis2(std::span<const double> v) const {
    const auto y = forward(v);
    double q = 0.0;
    for (std::size_t k = 0; k < K_; ++k) q += y[k] * y[k] / D_[k];
    return q;
  }

 private:
  std::size_t K_;
  std::vector<double> L_, D_;
};

/// Σ from its factors.
inline Eigen::MatrixXd ldl_assemble(const Ldl& f) { return f.covariance(); }

/// LDL factorization of a symmetric positive definite matrix.
inline Ldl ldl_factor(const Eigen::MatrixXd& sigma) {
  const auto n = sigma.rows();
  if (n != sigma.cols() || n == 0) throw ContractViolation("ldl_factor: matrix must be square");
  const std::size_t K = static_cast<std::size_t>(n);
  std::vector<double> L(K * K, 0.0), D(K, 0.0);
  for (std::size_t j = 0; j < K; ++j) {
    double d = sigma(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j));
    for (std::size_t k = 0; k < j; ++k) d -= L[j * K + k] * L[j * K + k] * D[k];
    if (!(d > 0.0)) throw ContractViolation("ldl_factor: matrix is not positive definite");
    D[j] = d;
    L[j * K + j] = 1.0;
    for (std::size_t i = j + 1; i < K; ++i) {
      double v = sigma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      for (std::size_t k = 0; k < j; ++k) v -= L[i * K + k] * L[j * K + k] * D[k];
      L[i * K + j] = v / d;
    }
  }
  return Ldl(K, std::move(L), std::move(D));
}

/// ½(ε−μ)ᵀΣ⁻¹(ε−μ) + ½ ln|Σ| + (K/2) ln 2π.
inline double component_nll(std::span<const double> eps, std::span<const double> mu, const Ldl& cov) {
  if (eps.size() != cov.K() || mu.size() != cov.K()) throw ContractViolation("component_nll: dimension mismatch");
  std::vector<double> d(eps.size());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = eps[k] - mu[k];
  return 0.5 * cov.mahalanobis2(d) + 0.5 * cov.log_det() +
         0.5 * static_cast<double>(cov.K()) * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Head output

struct GmmHeadOutput {
  std::size_t K = 1;
  std::vector<double> weights;  // N, or N+1 with the background last
  std::vector<double> means;    // N*K
  std::vector<Ldl> covariances;
  std::optional<Domain> background;  // set when the background weight exists

  std::size_t modes() const { return covariances.size(); }
  std::span<const double> mean(std::size_t n) const { return {means.data() + n * K, K}; }
};

/// Mixture NLL -ln Σ wₙ exp(-Lⁿ), with the background term
/// ln w_{N+1} - ln(volume) when enabled.
inline double gmm_nll(const GmmHeadOutput& h, std::span<const double> eps) {
  if (eps.size() != h.K) throw ContractViolation("gmm_nll: residual dimension mismatch");
  std::vector<double> terms;
  for (std::size_t n = 0; n < h.modes(); ++n)
    if (h.weights[n] > 0.0) terms.push_back(std::log(h.weights[n]) - component_nll(eps, h.mean(n), h.covariances[n]));
  if (h.background) {
    if (!h.background->contains(eps))
      throw ContractViolation("gmm_nll: residual outside the background domain");
    if (h.weights.back() > 0.0) terms.push_back(std::log(h.weights.back()) - std::log(h.background->volume()));
  }
  return -detail::logsumexp(terms);
}

/// Weight choice by cumulative-sum inversion, then ε = μ + L √D z, or a
/// uniform draw over the domain for the background.
inline std::vector<double> gmm_sample(const GmmHeadOutput& h, Rng& rng) {
  const double u = uniform(rng);
  double acc = 0.0;
  std::size_t pick = h.weights.size() - 1;
  for (std::size_t n = 0; n < h.weights.size(); ++n) {
    acc += h.weights[n];
    if (u < acc) {
      pick = n;
      break;
    }
  }
  while (h.weights[pick] == 0.0 && pick > 0) --pick;
  std::vector<double> out(h.K);
  if (h.background && pick == h.modes()) {
    for (std::size_t k = 0; k < h.K; ++k) out[k] = uniform(rng, h.background->lower[k], h.background->upper[k]);
    return out;
  }
  const auto& c = h.covariances[pick];
  std::vector<double> z(h.K);
  for (std::size_t k = 0; k < h.K; ++k) z[k] = standard_normal(rng) * std::sqrt(c.D()[k]);
  for (std::size_t i = 0; i < h.K; ++i) {
    out[i] = h.mean(pick)[i];
    for (std::size_t j = 0; j <= i; ++j) out[i] += c.L()[i * h.K + j] * z[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct GmmConfig {
  std::size_t K = 1;
  std::size_t modes = 5;
  std::optional<Domain> background;  // enables the background weight
  EncoderConfig encoder;
};

/// Independent mixture values: N (K(K+3)/2 + 1).
inline std::size_t gmm_parameter_count(std::size_t K, std::size_t N) { return N * (K * (K + 3) / 2 + 1); }

class GmmModel : public DensityModel {
 public:
  static constexpr double kLogDBound = 15.0;

  GmmModel(const GmmConfig& config, std::uint64_t seed) : cfg_(config) {
    if (cfg_.K == 0 || cfg_.modes == 0) throw ContractViolation("gmm: K and modes must be positive");
    if (cfg_.background && (cfg_.background->lower.size() != cfg_.K || cfg_.background->upper.size() != cfg_.K))
      throw ContractViolation("gmm: background domain dimension mismatch");
    Rng rng = make_stream(seed, 0x6a11);
    encoder_ = Encoder(cfg_.encoder, store_, rng);
    head_ = make_linear(store_, "gmm.head", cfg_.encoder.width, head_width(), rng);
  }

  ModelFamily family() const override { return ModelFamily::Gmm; }
  std::size_t K() const override { return cfg_.K; }
  const GmmConfig& config() const { return cfg_; }

  std::size_t weight_count() const { return cfg_.modes + (cfg_.background ? 1 : 0); }
  std::size_t pair_count() const { return cfg_.K * (cfg_.K - 1) / 2; }
  /// Head layout: [weight logits | means (k-major) | L entries (pair-major) | ln D (k-major)].
  std::size_t head_width() const { return weight_count() + cfg_.modes * (2 * cfg_.K + pair_count()); }

  /// Raw head activations, (B, head_width).
  Tensor head(const Tensor& cond, bool training = false) const { return head_(encoder_(cond, training)); }

  Tensor log_prob(const Tensor& cond, const Tensor& eps, bool training = false) const override {
    check_eps(cond, eps);
    if (cfg_.background)
      for (std::size_t b = 0; b < eps.dim(0); ++b)
        if (!cfg_.background->contains({eps.data().data() + b * cfg_.K, cfg_.K}))
          throw ContractViolation("gmm: residual " + std::to_string(b) + " outside the background domain");
    return log_prob_from_head(head(cond, training), eps);
  }

  /// Mixture log density from raw head activations h (B, head_width).
  Tensor log_prob_from_head(const Tensor& h, const Tensor& eps) const {
    if (h.rank() != 2 || h.dim(1) != head_width() || h.dim(0) != eps.dim(0))
      throw ContractViolation("gmm: head activations have shape " + to_string(h.shape()));
    const std::size_t N = cfg_.modes, K = cfg_.K, W = weight_count();
    auto block = [&](std::size_t start) { return slice(h, 1, start, start + N); };
    const std::size_t mean0 = W, pair0 = W + N * K, logd0 = pair0 + N * pair_count();

    // Forward substitution L y = ε - μ, vectorised over components: y[k] is (B, N).
    std::vector<Tensor> y(K);
    Tensor quad, logdet;
    for (std::size_t k = 0; k < K; ++k) {
      Tensor yk = slice(eps, 1, k, k + 1) - block(mean0 + k * N);
      for (std::size_t j = 0; j < k; ++j) yk = yk - block(pair0 + pair_index(k, j) * N) * y[j];
      y[k] = yk;
      const Tensor logd = clamp(block(logd0 + k * N), -kLogDBound, kLogDBound);
      const Tensor qk = square(yk) * exp(-logd);
      quad = k == 0 ? qk : quad + qk;
      logdet = k == 0 ? logd : logdet + logd;
    }
    const double c = 0.5 * static_cast<double>(K) * std::log(2.0 * std::numbers::pi);
    const Tensor comp_nll = 0.5 * quad + 0.5 * logdet + c;  // (B, N)
    const Tensor logw = log_softmax(slice(h, 1, 0, W), 1);
    Tensor terms = slice(logw, 1, 0, N) - comp_nll;
    if (cfg_.background)
      terms = concat({terms, slice(logw, 1, N, N + 1) - std::log(cfg_.background->volume())}, 1);
    return logsumexp(terms, 1, true);
  }

  /// Mixture parameters for each condition in the batch.
  std::vector<GmmHeadOutput> predict_params(const Tensor& cond) const {
    NoGradGuard guard;
    const Tensor h = head(cond, false);
    std::vector<GmmHeadOutput> out;
    for (std::size_t b = 0; b < h.dim(0); ++b)
      out.push_back(decode_head({h.data().data() + b * head_width(), head_width()}));
    return out;
  }

  /// Mixture parameters from one row of raw head activations.
  GmmHeadOutput decode_head(std::span<const double> row) const {
    const std::size_t N = cfg_.modes, K = cfg_.K, W = weight_count();
    const std::size_t mean0 = W, pair0 = W + N * K, logd0 = pair0 + N * pair_count();
    GmmHeadOutput o;
    o.K = K;
    o.background = cfg_.background;
    std::vector<double> logits(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(W));
    const double lse = detail::logsumexp(logits);
    for (double l : logits) o.weights.push_back(std::exp(l - lse));
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) o.means.push_back(row[mean0 + k * N + n]);
      std::vector<double> L(K * K, 0.0), D(K);
      for (std::size_t k = 0; k < K; ++k) {
        L[k * K + k] = 1.0;
        for (std::size_t j = 0; j < k; ++j) L[k * K + j] = row[pair0 + pair_index(k, j) * N + n];
        D[k] = std::exp(std::clamp(row[logd0 + k * N + n], -kLogDBound, kLogDBound));
      }
      o.covariances.emplace_back(K, std::move(L), std::move(D));
    }
    return o;
  }

  std::vector<double> log_density_points(const Tensor& cond1, std::span<const double> points) const override {
    check_single(cond1);
    const auto h = predict_params(cond1).front();
    std::vector<double> out(points.size() / cfg_.K);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::span<const double> e{points.data() + i * cfg_.K, cfg_.K};
      if (h.background && !h.background->contains(e)) {
        GmmHeadOutput inner = h;
        inner.background.reset();
        out[i] = -gmm_nll(inner, e);
      } else {
        out[i] = -gmm_nll(h, e);
      }
    }
    return out;
  }

  std::vector<double> sample(const Tensor& cond1, std::size_t n, Rng& rng) const override {
    check_single(cond1);
    const auto h = predict_params(cond1).front();
    std::vector<double> out;
    out.reserve(n * cfg_.K);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = gmm_sample(h, rng);
      out.insert(out.end(), e.begin(), e.end());
    }
    return out;
  }

  bool supports(std::span<const double> eps) const override {
    return !cfg_.background || cfg_.background->contains(eps);
  }

 private:
  static std::size_t pair_index(std::size_t k, std::size_t j) { return k * (k - 1) / 2 + j; }

  GmmConfig cfg_;
  Encoder encoder_;
  Linear head_;
};

}  // namespace dpdf
