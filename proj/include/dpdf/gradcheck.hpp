#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dpdf/tensor.hpp"

namespace dpdf {

namespace detail {
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8);
}

inline double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw DomainError("finite_diff_check: non-finite value at perturbed point");
  return v;
}
}  // namespace detail

/// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8)
/// for a scalar function of one tensor.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                double step) {
  if (!(step > 0.0)) throw ContractViolation("finite_diff_check: step must be positive");
  Tensor x(point.shape(), point.to_vector(), true);
  const Tensor out = f(x);
  const Gradients grads = backward(out, std::span<const Tensor>(&x, 1));
  const auto analytic = grads.at(x).data();

  double worst = 0.0;
  auto values = point.to_vector();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + step;
    const double up = detail::eval_scalar([&] { return f(Tensor(point.shape(), values)); });
    values[i] = orig - step;
    const double down = detail::eval_scalar([&] { return f(Tensor(point.shape(), values)); });
    values[i] = orig;
    worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

/// Same check for a loss that closes over parameter tensors; each parameter
/// entry is perturbed in place and restored.
inline double finite_diff_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                double step) {
  if (!(step > 0.0)) throw ContractViolation("finite_diff_check: step must be positive");
  const Tensor out = loss();
  const Gradients grads = backward(out, params);
  double worst = 0.0;
  for (auto& p : params) {
    const auto analytic = grads.at(p).to_vector();
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = detail::eval_scalar(loss);
      data[i] = orig - step;
      const double down = detail::eval_scalar(loss);
      data[i] = orig;
      worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

}  // namespace dpdf
