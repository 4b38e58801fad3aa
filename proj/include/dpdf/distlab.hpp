#pragma once

// Analytic ground truth: the skewed generalized error distribution (SGED),
// its rotated multivariate form (MV-SGED), finite mixtures of those
// (MM-SGED), random rotations, and spline-interpolated condition families.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "dpdf/errors.hpp"
#include "dpdf/random.hpp"

namespace dpdf {

namespace detail {
inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline double logsumexp(const std::vector<double>& v) {
  double m = -INFINITY;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar SGED

struct SgedParams {
  double s = 1.0;       // scale > 0
  double lambda = 0.0;  // skew in (-1, 1)
  double p = 2.0;       // kurtosis > 0

  void validate() const {
    if (!(s > 0.0) || !std::isfinite(s)) throw ContractViolation("sged: scale must be positive");
    if (!(lambda > -1.0 && lambda < 1.0)) throw ContractViolation("sged: skew must lie in (-1, 1)");
    if (!(p > 0.0) || !std::isfinite(p)) throw ContractViolation("sged: kurtosis must be positive");
  }
};

/// ln[p / (2 s Γ(1/p))] - (|ε| / (s (1 + λ sgn ε)))^p
inline double sged_logpdf(double eps, const SgedParams& prm) {
  prm.validate();
  const double z = std::abs(eps) / (prm.s * (1.0 + prm.lambda * detail::sgn(eps)));
  return std::log(prm.p) - std::log(2.0 * prm.s) - std::lgamma(1.0 / prm.p) - std::pow(z, prm.p);
}

/// Exact draw: sign +1 with probability (1+λ)/2, magnitude s(1+λσ)·G^{1/p}
/// with G ~ Gamma(1/p, 1).
inline double sged_sample(const SgedParams& prm, Rng& rng) {
  prm.validate();
  const double sign = uniform(rng) < 0.5 * (1.0 + prm.lambda) ? 1.0 : -1.0;
  const double g = std::gamma_distribution<double>(1.0 / prm.p, 1.0)(rng);
  return sign * prm.s * (1.0 + prm.lambda * sign) * std::pow(g, 1.0 / prm.p);
}

// ---------------------------------------------------------------------------
// Multivariate SGED

struct MvSgedParams {
  std::size_t K = 1;
  std::vector<double> s;         // per-dim scales > 0
  std::vector<double> lambda;    // per-dim skews in (-1, 1)
  double p = 2.0;                // shared kurtosis
  std::vector<double> rotation;  // K x K row-major, in SO(K)
  std::vector<double> offset;    // K

  static MvSgedParams standard(std::size_t K, double scale = 1.0, double p = 2.0) {
    MvSgedParams m;
    m.K = K;
    m.s.assign(K, scale);
    m.lambda.assign(K, 0.0);
    m.p = p;
    m.rotation.assign(K * K, 0.0);
    for (std::size_t i = 0; i < K; ++i) m.rotation[i * K + i] = 1.0;
    m.offset.assign(K, 0.0);
    return m;
  }

  void validate(double tol = 1e-12) const {
    if (K == 0) throw ContractViolation("mvsged: K must be >= 1");
    if (s.size() != K || lambda.size() != K || offset.size() != K || rotation.size() != K * K)
      throw ContractViolation("mvsged: parameter lengths do not match K=" + std::to_string(K));
    for (std::size_t k = 0; k < K; ++k) {
      if (!(s[k] > 0.0) || !std::isfinite(s[k])) throw ContractViolation("mvsged: scales must be positive");
      if (!(lambda[k] > -1.0 && lambda[k] < 1.0)) throw ContractViolation("mvsged: skews must lie in (-1, 1)");
    }
    if (!(p > 0.0) || !std::isfinite(p)) throw ContractViolation("mvsged: kurtosis must be positive");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> R(
        rotation.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
    const auto eye = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
    if ((R.transpose() * R - eye).cwiseAbs().maxCoeff() > tol)
      throw ContractViolation("mvsged: rotation is not orthogonal");
    if (std::abs(R.determinant() - 1.0) > tol) throw ContractViolation("mvsged: rotation determinant is not +1");
  }
};

/// ln of the normalization constant p Γ(K/2) / (π^{K/2} K Π s_k Γ(K²/(2p))),
/// from the radial integral ∫ r^{K-1} exp(-r^{2p/K}) dr = (K/(2p)) Γ(K²/(2p)).
inline double mvsged_log_norm(std::size_t K, double p, const std::vector<double>& s) {
  const double k = static_cast<double>(K);
  double log_s = 0.0;
  for (double v : s) log_s += std::log(v);
  return std::log(p) + std::lgamma(k / 2.0) - 0.5 * k * std::log(std::numbers::pi) - std::log(k) - log_s -
         std::lgamma(k * k / (2.0 * p));
}

namespace detail {
// Σ_k (u_k / (s_k (1 + λ_k sgn u_k)))² for u = Rᵀ(ε - offset).
inline double mvsged_radius2(const double* eps, const MvSgedParams& prm) {
  const std::size_t K = prm.K;
  double r2 = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double u = 0.0;
    for (std::size_t j = 0; j < K; ++j) u += prm.rotation[j * K + k] * (eps[j] - prm.offset[j]);
    const double z = u / (prm.s[k] * (1.0 + prm.lambda[k] * sgn(u)));
    r2 += z * z;
  }
  return r2;
}
}  // namespace detail

/// Rotated, offset MV-SGED log density.
inline double mvsged_logpdf(std::span<const double> eps, const MvSgedParams& prm) {
  if (eps.size() != prm.K)
    throw ContractViolation("mvsged_logpdf: residual has " + std::to_string(eps.size()) + " dims, expected " +
                            std::to_string(prm.K));
  const double r2 = detail::mvsged_radius2(eps.data(), prm);
  return mvsged_log_norm(prm.K, prm.p, prm.s) - std::pow(r2, prm.p / static_cast<double>(prm.K));
}

/// Exact draw: radius from Gamma(K²/(2p)) raised to K/(2p), uniform
/// direction, per-dim orthant sign with probability (1+λ_k)/2, then scale,
/// rotate and offset.
inline std::vector<double> mvsged_sample(const MvSgedParams& prm, Rng& rng) {
  const std::size_t K = prm.K;
  const double k = static_cast<double>(K);
  const double t = std::gamma_distribution<double>(k * k / (2.0 * prm.p), 1.0)(rng);
  const double r = std::pow(t, k / (2.0 * prm.p));
  std::vector<double> dir(K);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& d : dir) {
      d = standard_normal(rng);
      norm += d * d;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  std::vector<double> scaled(K);
  for (std::size_t i = 0; i < K; ++i) {
    const double sign = uniform(rng) < 0.5 * (1.0 + prm.lambda[i]) ? 1.0 : -1.0;
    const double u = sign * std::abs(r * dir[i] / norm);
    scaled[i] = prm.s[i] * (1.0 + prm.lambda[i] * sign) * u;
  }
  std::vector<double> out(prm.offset);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) out[i] += prm.rotation[i * K + j] * scaled[j];
  return out;
}

// ---------------------------------------------------------------------------
// Multimodal mixture

struct MmSgedParams {
  std::vector<double> weights;
  std::vector<MvSgedParams> components;

  std::size_t K() const { return components.empty() ? 0 : components.front().K; }

  void validate() const {
    if (components.empty() || weights.size() != components.size())
      throw ContractViolation("mmsged: need one weight per component");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ContractViolation("mmsged: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ContractViolation("mmsged: weights do not sum to 1");
    for (const auto& c : components) {
      if (c.K != K()) throw ContractViolation("mmsged: components disagree on K");
      c.validate();
    }
  }
};

inline double mmsged_logpdf(std::span<const double> eps, const MmSgedParams& prm) {
  if (eps.size() != prm.K())
    throw ContractViolation("mmsged_logpdf: residual has " + std::to_string(eps.size()) + " dims, expected " +
                            std::to_string(prm.K()));
  std::vector<double> terms;
  terms.reserve(prm.components.size());
  for (std::size_t n = 0; n < prm.components.size(); ++n)
    if (prm.weights[n] > 0.0) terms.push_back(std::log(prm.weights[n]) + mvsged_logpdf(eps, prm.components[n]));
  return detail::logsumexp(terms);
}

inline std::vector<double> mmsged_sample(const MmSgedParams& prm, Rng& rng) {
  const double u = uniform(rng);
  double acc = 0.0;
  std::size_t pick = prm.components.size() - 1;
  for (std::size_t n = 0; n < prm.components.size(); ++n) {
    acc += prm.weights[n];
    if (u < acc && prm.weights[n] > 0.0) {
      pick = n;
      break;
    }
  }
  while (prm.weights[pick] == 0.0 && pick > 0) --pick;
  return mvsged_sample(prm.components[pick], rng);
}

// ---------------------------------------------------------------------------
// Rotations

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::vector<double> to_row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMatrix>(out.data(), m.rows(), m.cols()) = m;
  return out;
}

/// Haar-uniform rotation: QR of a Gaussian matrix, column signs fixed so
/// R has a positive diagonal, then one column flipped if det = -1.
inline std::vector<double> random_rotation(std::size_t K, Rng& rng) {
  if (K == 0) throw ContractViolation("random_rotation: K must be >= 1");
  const auto n = static_cast<Eigen::Index>(K);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = standard_normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  if (q.determinant() < 0.0) q.col(0) *= -1.0;
  return to_row_major(q);
}

/// Number of free generator entries of so(K).
inline std::size_t generator_size(std::size_t K) { return K * (K - 1) / 2; }

/// exp of the skew-symmetric matrix whose strict upper triangle (row-major)
/// holds -generator and lower triangle +generator. For K=2 the single entry
/// is the rotation angle.
inline std::vector<double> rotation_from_generator(std::size_t K, const std::vector<double>& generator) {
  if (generator.size() != generator_size(K)) throw ContractViolation("rotation_from_generator: wrong length");
  if (K == 1) return {1.0};
  if (K == 2) {
    const double c = std::cos(generator[0]), s = std::sin(generator[0]);
    return {c, -s, s, c};
  }
  const auto n = static_cast<Eigen::Index>(K);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  std::size_t idx = 0;
  for (Eigen::Index i = 1; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) {
      a(i, j) = generator[idx];
      a(j, i) = -generator[idx];
      ++idx;
    }
  Eigen::MatrixXd r = a.exp();
  // Re-orthonormalize away the last few ulps of the Padé approximant.
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(r);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd rr = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (rr(j, j) < 0.0) q.col(j) *= -1.0;
  return to_row_major(q);
}

// ---------------------------------------------------------------------------
// Condition families

/// Sampling ranges for random MM-SGED parameters.
struct ParamRanges {
  double s_lo = 0.3, s_hi = 1.5;
  double lambda_lo = -0.6, lambda_hi = 0.6;
  double p_lo = 0.8, p_hi = 3.0;
  double offset_lo = -2.0, offset_hi = 2.0;
};

/// One MV-SGED with every parameter drawn uniformly from `ranges` and a
/// Haar-random rotation.
inline MvSgedParams random_mvsged(std::size_t K, const ParamRanges& ranges, Rng& rng) {
  MvSgedParams m;
  m.K = K;
  for (std::size_t k = 0; k < K; ++k) m.s.push_back(uniform(rng, ranges.s_lo, ranges.s_hi));
  for (std::size_t k = 0; k < K; ++k) m.lambda.push_back(uniform(rng, ranges.lambda_lo, ranges.lambda_hi));
  m.p = uniform(rng, ranges.p_lo, ranges.p_hi);
  m.rotation = random_rotation(K, rng);
  for (std::size_t k = 0; k < K; ++k) m.offset.push_back(uniform(rng, ranges.offset_lo, ranges.offset_hi));
  return m;
}

/// MM-SGED parameters that vary smoothly with a scalar condition x in
/// (-1, 1). Each anchor stores the mixture in unconstrained coordinates
/// (ln s, atanh λ, ln p, raw offsets, rotation generator, weight logit per
/// mode); between anchors every coordinate follows a Catmull-Rom cubic
/// Hermite spline, so decoded parameters always satisfy their constraints.
class ConditionedFamily {
 public:
  ConditionedFamily() = default;

  ConditionedFamily(std::size_t K, std::size_t modes, std::vector<double> anchors,
                    std::vector<std::vector<double>> coords)
      : K_(K), modes_(modes), x_(std::move(anchors)), y_(std::move(coords)) {
    if (x_.size() < 2 || x_.size() != y_.size())
      throw ContractViolation("family: need at least two anchors with coordinates");
    for (std::size_t i = 1; i < x_.size(); ++i)
      if (!(x_[i] > x_[i - 1])) throw ContractViolation("family: anchors must be strictly increasing");
    for (const auto& y : y_)
      if (y.size() != modes_ * stride()) throw ContractViolation("family: coordinate length mismatch");
    tangents_.resize(y_.size());
    const std::size_t last = x_.size() - 1;
    for (std::size_t i = 0; i <= last; ++i) {
      const std::size_t lo = i == 0 ? 0 : i - 1, hi = i == last ? last : i + 1;
      tangents_[i].resize(y_[i].size());
      for (std::size_t c = 0; c < y_[i].size(); ++c) tangents_[i][c] = (y_[hi][c] - y_[lo][c]) / (x_[hi] - x_[lo]);
    }
  }

  /// Random family: `anchor_count` evenly spaced anchors on [-1, 1], each an
  /// independent MM-SGED drawn from `ranges`.
  static ConditionedFamily random(std::size_t K, std::size_t modes, std::size_t anchor_count,
                                  const ParamRanges& ranges, std::uint64_t seed) {
    if (K == 0 || modes == 0 || anchor_count < 2) throw ContractViolation("family: invalid K/modes/anchors");
    Rng rng = make_stream(seed, 0xfa17);
    std::vector<double> xs;
    std::vector<std::vector<double>> coords;
    for (std::size_t a = 0; a < anchor_count; ++a) {
      xs.push_back(-1.0 + 2.0 * static_cast<double>(a) / static_cast<double>(anchor_count - 1));
      std::vector<double> y;
      for (std::size_t n = 0; n < modes; ++n) {
        for (std::size_t k = 0; k < K; ++k) y.push_back(std::log(uniform(rng, ranges.s_lo, ranges.s_hi)));
        for (std::size_t k = 0; k < K; ++k)
          y.push_back(std::atanh(uniform(rng, ranges.lambda_lo, ranges.lambda_hi)));
        y.push_back(std::log(uniform(rng, ranges.p_lo, ranges.p_hi)));
        for (std::size_t k = 0; k < K; ++k) y.push_back(uniform(rng, ranges.offset_lo, ranges.offset_hi));
        for (std::size_t g = 0; g < generator_size(K); ++g)
          y.push_back(K == 2 ? uniform(rng, -std::numbers::pi, std::numbers::pi)
                             : uniform(rng, -0.5 * std::numbers::pi, 0.5 * std::numbers::pi));
        y.push_back(uniform(rng, -1.0, 1.0));  // weight logit
      }
      coords.push_back(std::move(y));
    }
    return ConditionedFamily(K, modes, std::move(xs), std::move(coords));
  }

  std::size_t K() const { return K_; }
  std::size_t modes() const { return modes_; }
  const std::vector<double>& anchors() const { return x_; }

  /// Parameters stored at anchor i.
  MmSgedParams anchor_params(std::size_t i) const { return decode(y_.at(i)); }

  /// Interpolated mixture at x in (-1, 1).
  MmSgedParams eval(double x) const {
    if (!(x > -1.0 && x < 1.0)) throw DomainError("family_eval: condition " + std::to_string(x) + " outside (-1, 1)");
    return decode(coordinates(x));
  }

  /// Spline coordinates at any x within the anchor span.
  std::vector<double> coordinates(double x) const {
    if (x < x_.front() || x > x_.back()) throw DomainError("family: condition outside anchor span");
    std::size_t i = static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin());
    i = i == 0 ? 0 : std::min(i - 1, x_.size() - 2);
    const double h = x_[i + 1] - x_[i];
    const double t = (x - x_[i]) / h;
    const double t2 = t * t, t3 = t2 * t;
    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + t, h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
    std::vector<double> out(y_[i].size());
    for (std::size_t c = 0; c < out.size(); ++c)
      out[c] = h00 * y_[i][c] + h10 * h * tangents_[i][c] + h01 * y_[i + 1][c] + h11 * h * tangents_[i + 1][c];
    return out;
  }

 private:
  std::size_t stride() const { return 3 * K_ + 2 + generator_size(K_); }

  MmSgedParams decode(const std::vector<double>& y) const {
    MmSgedParams out;
    std::vector<double> logits;
    for (std::size_t n = 0; n < modes_; ++n) {
      const double* c = y.data() + n * stride();
      MvSgedParams m;
      m.K = K_;
      for (std::size_t k = 0; k < K_; ++k) m.s.push_back(std::exp(c[k]));
      for (std::size_t k = 0; k < K_; ++k) m.lambda.push_back(std::tanh(c[K_ + k]));
      m.p = std::exp(c[2 * K_]);
      for (std::size_t k = 0; k < K_; ++k) m.offset.push_back(c[2 * K_ + 1 + k]);
      std::vector<double> gen(c + 3 * K_ + 1, c + 3 * K_ + 1 + generator_size(K_));
      m.rotation = rotation_from_generator(K_, gen);
      logits.push_back(c[stride() - 1]);
      out.components.push_back(std::move(m));
    }
    const double lse = detail::logsumexp(logits);
    for (double l : logits) out.weights.push_back(std::exp(l - lse));
    double total = 0.0;
    for (double w : out.weights) total += w;
    for (double& w : out.weights) w /= total;
    return out;
  }

  std::size_t K_ = 0, modes_ = 0;
  std::vector<double> x_;
  std::vector<std::vector<double>> y_, tangents_;
};

}  // namespace dpdf
