#pragma once

// Common interface of the three conditional density model families.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpdf/errors.hpp"
#include "dpdf/nn.hpp"
#include "dpdf/random.hpp"
#include "dpdf/tensor.hpp"

namespace dpdf {

enum class ModelFamily : std::uint32_t { Gmm = 0, Disc = 1, Flow = 2 };

inline std::string to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::Gmm: return "gmm";
    case ModelFamily::Disc: return "disc";
    case ModelFamily::Flow: return "nf";
  }
  return "unknown";
}

inline ModelFamily parse_model_family(const std::string& s) {
  if (s == "gmm") return ModelFamily::Gmm;
  if (s == "disc") return ModelFamily::Disc;
  if (s == "nf" || s == "flow") return ModelFamily::Flow;
  throw ContractViolation("unknown model family '" + s + "'");
}

/// p(ε | x) backed by a condition encoder and a family-specific head.
class DensityModel {
 public:
  virtual ~DensityModel() = default;

  virtual ModelFamily family() const = 0;
  virtual std::size_t K() const = 0;

  /// ln p(ε_b | x_b) for a batch, shape (B, 1), on the tape. `training`
  /// selects batch statistics in the encoder's normalization layers.
  virtual Tensor log_prob(const Tensor& cond, const Tensor& eps, bool training = false) const = 0;

  /// ln p(ε | x) at many residuals (flat, P*K) for a single condition
  /// (leading dim 1). Off the tape; the condition is encoded once.
  virtual std::vector<double> log_density_points(const Tensor& cond1, std::span<const double> points) const = 0;

  /// n draws (flat, n*K) from p(· | x) for a single condition.
  virtual std::vector<double> sample(const Tensor& cond1, std::size_t n, Rng& rng) const = 0;

  /// Whether ε lies where the model defines a density.
  virtual bool supports(std::span<const double> /*eps*/) const { return true; }

  /// Training objective: mean negative log-likelihood of the batch.
  Tensor loss(const Tensor& cond, const Tensor& eps, bool training = true) const {
    return -mean(log_prob(cond, eps, training));
  }

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

 protected:
  static void check_single(const Tensor& cond1) {
    if (cond1.rank() == 0 || cond1.dim(0) != 1)
      throw ContractViolation("expected a single condition with leading dim 1, got " + to_string(cond1.shape()));
  }

  void check_eps(const Tensor& cond, const Tensor& eps) const {
    if (eps.rank() != 2 || eps.dim(1) != K() || cond.rank() == 0 || cond.dim(0) != eps.dim(0))
      throw ContractViolation("residual batch " + to_string(eps.shape()) + " does not match K=" +
                              std::to_string(K()) + " and condition batch " + to_string(cond.shape()));
  }

  ParameterStore store_;
};

}  // namespace dpdf
