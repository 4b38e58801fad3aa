#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// Every op allocates a result node. When grad recording is enabled and any
// input requires a gradient, the node keeps its inputs and a backprop
// closure; backward() walks the graph in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dpdf/errors.hpp"

namespace dpdf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Suspends tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != values.size())
      throw ContractViolation("tensor: shape " + to_string(shape) + " does not match " +
                              std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }
  /// Column vector (n, 1).
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n, 1}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const {
    if (numel() != 1)
      throw ContractViolation("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  /// Writable storage. Only meaningful for leaves (parameters, buffers):
  /// graphs already built from this tensor are not re-evaluated.
  std::span<double> mutable_data() { return node_->value; }

  Tensor detach() const { return Tensor(shape(), node_->value); }

  /// Stable identity used to key gradients.
  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradients keyed by parameter identity.
class Gradients {
 public:
  bool contains(const Tensor& p) const { return map_.count(p.id()) != 0; }
  const Tensor& at(const Tensor& p) const {
    auto it = map_.find(p.id());
    if (it == map_.end()) throw ContractViolation("gradients: no entry for requested parameter");
    return it->second;
  }
  void set(const Tensor& p, Tensor g) { map_[p.id()] = std::move(g); }
  void set(const detail::Node* key, Tensor g) { map_[key] = std::move(g); }
  std::size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }

 private:
  std::unordered_map<const detail::Node*, Tensor> map_;
};

namespace detail {

/// Wraps a computed value into a tensor; records inputs and backprop only
/// when recording is enabled and some input needs a gradient.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(backprop);
  }
  return Tensor::from_node(std::move(node));
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite result");
}

// Row-major strides.
inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct BroadcastPlan {
  Shape out;
  bool same = false;  // no index maps needed
  std::vector<std::size_t> ia, ib;
  // For scalar operands the maps would be all zeros; these flags avoid them.
  bool a_scalar = false, b_scalar = false;

  std::size_t index_a(std::size_t i) const { return same || b_scalar ? i : a_scalar ? 0 : ia[i]; }
  std::size_t index_b(std::size_t i) const { return same || a_scalar ? i : b_scalar ? 0 : ib[i]; }
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  if (numel_of(b) == 1 && b.size() <= a.size()) {
    plan.out = a;
    plan.b_scalar = true;
    return plan;
  }
  if (numel_of(a) == 1 && a.size() <= b.size()) {
    plan.out = b;
    plan.a_scalar = true;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw ContractViolation("broadcast: incompatible shapes " + to_string(a) + " and " +
                              to_string(b));
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  const auto sa = strides_of(pa), sb = strides_of(pb);
  const std::size_t n = numel_of(plan.out);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < r; ++d) {
      if (pa[d] != 1) oa += idx[d] * sa[d];
      if (pb[d] != 1) ob += idx[d] * sb[d];
    }
    plan.ia[flat] = oa;
    plan.ib[flat] = ob;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < plan.out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

// f(a, b) -> value; da(a, b) and db(a, b) are partial derivatives.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(broadcast_plan(a.shape(), b.shape()));
  const auto A = a.data();
  const auto B = b.data();
  const std::size_t n = numel_of(plan->out);
  std::vector<double> out(n);
  if (plan->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i], B[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(A[plan->index_a(i)], B[plan->index_b(i)]);
  }
  Shape shape = plan->out;
  return make_op(std::move(shape), std::move(out), {a, b}, [plan, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    const auto& A = pa.value;
    const auto& B = pb.value;
    const std::size_t n = g.size();
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = plan->index_a(i);
        ga[ia] += g[i] * da(A[ia], B[plan->index_b(i)]);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ib = plan->index_b(i);
        gb[ib] += g[i] * db(A[plan->index_a(i)], B[ib]);
      }
    }
  });
}

// f(x) -> value; df(x, y) derivative given input x and output y.
template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF df, const char* name, bool check = false) {
  const auto A = a.data();
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
  if (check) check_finite(out, name);
  return make_op(a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

// Decomposes shape around an axis into (outer, len, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ContractViolation("axis " + std::to_string(axis) + " out of range for shape " +
                            to_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; }, "neg");
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp", true);
}

/// Natural log; nonpositive inputs are a domain error.
inline Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw DomainError("log: nonpositive input " + std::to_string(x));
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

/// max(x, 0); derivative at exactly 0 is 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator+(double c, const Tensor& a) { return add(Tensor::scalar(c), a); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator-(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(Tensor::scalar(c), a); }
inline Tensor operator/(const Tensor& a, double c) { return mul(a, Tensor::scalar(1.0 / c)); }

/// Clamp to [lo, hi], composed from relu so the derivative is 0 outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor lower = relu(a - lo) + lo;
  return hi - relu(hi - lower);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_op({}, {s}, {a}, [](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (auto& g : gp) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.numel())); }

inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis(a.shape(), axis);
  const auto A = a.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += A[(o * sp.len + l) * sp.inner + i];
  return detail::make_op(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out), {a},
                         [sp](detail::Node& self) {
                           auto& gp = self.parents[0]->grad_buffer();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t l = 0; l < sp.len; ++l)
                               for (std::size_t i = 0; i < sp.inner; ++i)
                                 gp[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
                         });
}

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const double len = static_cast<double>(a.shape().at(axis));
  return sum(a, axis, keepdim) * (1.0 / len);
}

/// Maximum along an axis; the gradient flows to the first maximal entry.
inline Tensor max(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis(a.shape(), axis);
  if (sp.len == 0) throw ContractViolation("max: empty axis");
  const auto A = a.data();
  std::vector<double> out(sp.outer * sp.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = (o * sp.len) * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        const std::size_t k = (o * sp.len + l) * sp.inner + i;
        if (A[k] > A[best]) best = k;
      }
      out[o * sp.inner + i] = A[best];
      (*arg)[o * sp.inner + i] = best;
    }
  return detail::make_op(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out), {a},
                         [arg](detail::Node& self) {
                           auto& gp = self.parents[0]->grad_buffer();
                           for (std::size_t j = 0; j < arg->size(); ++j) gp[(*arg)[j]] += self.grad[j];
                         });
}

/// Stable log-sum-exp: max_j t_j + ln sum_j exp(t_j - max).
inline Tensor logsumexp(const Tensor& a, std::size_t axis, bool keepdim = false) {
  const auto sp = detail::split_axis(a.shape(), axis);
  if (sp.len == 0) throw ContractViolation("logsumexp: empty axis");
  const auto A = a.data();
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -INFINITY;
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, A[(o * sp.len + l) * sp.inner + i]);
      if (!std::isfinite(m)) {
        out[o * sp.inner + i] = m;
        continue;
      }
      double s = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(A[(o * sp.len + l) * sp.inner + i] - m);
      out[o * sp.inner + i] = m + std::log(s);
    }
  return detail::make_op(detail::reduced_shape(a.shape(), axis, keepdim), std::move(out), {a},
                         [sp](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           auto& gp = p.grad_buffer();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t i = 0; i < sp.inner; ++i) {
                               const double lse = self.value[o * sp.inner + i];
                               const double g = self.grad[o * sp.inner + i];
                               for (std::size_t l = 0; l < sp.len; ++l) {
                                 const std::size_t k = (o * sp.len + l) * sp.inner + i;
                                 gp[k] += g * std::exp(p.value[k] - lse);
                               }
                             }
                         });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
  return a - logsumexp(a, axis, true);
}

inline Tensor softmax(const Tensor& a, std::size_t axis) { return exp(log_softmax(a, axis)); }

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
}  // namespace detail

/// (n, k) x (k, m) -> (n, m).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ContractViolation("matmul: shapes " + to_string(a.shape()) + " and " +
                            to_string(b.shape()));
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto m = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(n * m));
  detail::MutMap(out.data(), n, m).noalias() =
      detail::ConstMap(a.data().data(), n, k) * detail::ConstMap(b.data().data(), k, m);
  return detail::make_op({a.dim(0), b.dim(1)}, std::move(out), {a, b},
                         [n, k, m](detail::Node& self) {
                           detail::Node& pa = *self.parents[0];
                           detail::Node& pb = *self.parents[1];
                           detail::ConstMap G(self.grad.data(), n, m);
                           if (pa.requires_grad)
                             detail::MutMap(pa.grad_buffer().data(), n, k).noalias() +=
                                 G * detail::ConstMap(pb.value.data(), k, m).transpose();
                           if (pb.requires_grad)
                             detail::MutMap(pb.grad_buffer().data(), k, m).noalias() +=
                                 detail::ConstMap(pa.value.data(), n, k).transpose() * G;
                         });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ContractViolation("transpose: rank-2 tensor required");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return detail::make_op({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Shape

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ContractViolation("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<double> v(a.data().begin(), a.data().end());
  return detail::make_op(std::move(shape), std::move(v), {a}, [](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

/// Entries [begin, end) along axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_axis(a.shape(), axis);
  if (begin > end || end > sp.len)
    throw ContractViolation("slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                            ") out of range on axis of length " + std::to_string(sp.len));
  const std::size_t w = end - begin;
  Shape shape = a.shape();
  shape[axis] = w;
  std::vector<double> out(sp.outer * w * sp.inner);
  const auto A = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(A.begin() + static_cast<std::ptrdiff_t>((o * sp.len + begin) * sp.inner),
                w * sp.inner, out.begin() + static_cast<std::ptrdiff_t>(o * w * sp.inner));
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [sp, begin, w](detail::Node& self) {
                           auto& gp = self.parents[0]->grad_buffer();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t j = 0; j < w * sp.inner; ++j)
                               gp[(o * sp.len + begin) * sp.inner + j] += self.grad[o * w * sp.inner + j];
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ContractViolation("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ContractViolation("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != shape[d])
        throw ContractViolation("concat: shapes " + to_string(shape) + " and " + to_string(s));
    total += s[axis];
  }
  shape[axis] = total;
  const auto sp = detail::split_axis(shape, axis);
  std::vector<double> out(numel_of(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    const auto P = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(P.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + off) * sp.inner));
    off += len;
  }
  return detail::make_op(std::move(shape), std::move(out), parts,
                         [sp, offsets, total](detail::Node& self) {
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                             detail::Node& p = *self.parents[k];
                             if (!p.requires_grad) continue;
                             auto& gp = p.grad_buffer();
                             const std::size_t len = gp.size() / (sp.outer * sp.inner);
                             for (std::size_t o = 0; o < sp.outer; ++o)
                               for (std::size_t j = 0; j < len * sp.inner; ++j)
                                 gp[o * len * sp.inner + j] +=
                                     self.grad[(o * total + offsets[k]) * sp.inner + j];
                           }
                         });
}

/// Row-wise gather on a (B, M) tensor: out[b] = t[b, index[b]], shape (B, 1).
inline Tensor select_columns(const Tensor& t, std::vector<std::size_t> index) {
  if (t.rank() != 2 || index.size() != t.dim(0))
    throw ContractViolation("select_columns: need (B, M) tensor and B indices");
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) throw ContractViolation("select_columns: index out of range");
    out[r] = t.data()[r * cols + index[r]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return detail::make_op({rows, 1}, std::move(out), {t}, [idx, cols](detail::Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx->size(); ++r) gp[r * cols + (*idx)[r]] += self.grad[r];
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace detail {
inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}
}  // namespace detail

/// d(output)/d(leaf) for every leaf reachable through taped ops. Leaves in
/// `wrt` that are unreachable get a zero gradient of their own shape.
inline Gradients backward(const Tensor& output, std::span<const Tensor> wrt = {}) {
  if (output.numel() != 1)
    throw ContractViolation("backward: output of shape " + to_string(output.shape()) +
                            " is not a scalar");
  if (!output.requires_grad()) throw ContractViolation("backward: output is detached from any parameter");
  auto order = detail::topo_order(output.node().get());
  for (auto* n : order) n->grad.assign(n->value.size(), 0.0);
  output.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
  Gradients grads;
  for (auto* n : order) {
    if (n->parents.empty()) {
      std::shared_ptr<detail::Node> g = std::make_shared<detail::Node>();
      g->shape = n->shape;
      g->value = n->grad;
      grads.set(n, Tensor::from_node(std::move(g)));
    }
  }
  for (auto* n : order) n->grad.clear();
  for (const auto& p : wrt)
    if (!grads.contains(p)) grads.set(p, Tensor::zeros(p.shape()));
  return grads;
}

}  // namespace dpdf
