#pragma once

// Neural building blocks: parameter store, linear/conv/batch-norm layers,
// nearest-neighbour upsampling, condition encoders, the upsampling decoder
// and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dpdf/errors.hpp"
#include "dpdf/random.hpp"
#include "dpdf/tensor.hpp"

namespace dpdf {

// ---------------------------------------------------------------------------
// Parameter store

/// Named tensors in insertion order. Trainable entries require gradients;
/// buffers (batch-norm running statistics) do not.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor add(const std::string& name, Shape shape, std::vector<double> values, bool trainable = true) {
    if (index_.count(name)) throw ContractViolation("parameter store: duplicate name '" + name + "'");
    Tensor t(std::move(shape), std::move(values), trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("parameter store: no entry '" + name + "'");
    return entries_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  /// Overwrites values of an existing entry; shapes must agree.
  void assign(const std::string& name, const Shape& shape, const std::vector<double>& values) {
    Tensor t = get(name);
    if (t.shape() != shape)
      throw ContractViolation("parameter store: shape mismatch for '" + name + "': " +
                              to_string(t.shape()) + " vs " + to_string(shape));
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Init { He, Zero };

// ---------------------------------------------------------------------------
// Convolution, batch norm, upsampling

namespace detail {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, ph, pw, ho, wo;
};

// Output columns [lo, hi) whose input column ox * stride + j - pw lies inside the image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t j) {
  const std::size_t lo = g.pw > j ? (g.pw - j + g.stride - 1) / g.stride : 0;
  const std::size_t hi = g.w + g.pw > j ? std::min(g.wo, (g.w + g.pw - j + g.stride - 1) / g.stride) : 0;
  return {std::min(lo, hi), hi};
}

inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t area = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * area;
        const auto [lo, hi] = valid_columns(g, j);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* dst = row + oy * g.wo;
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.ph);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          std::fill(dst, dst + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + j - g.pw];
          std::fill(dst + hi, dst + g.wo, 0.0);
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t area = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * area;
        const auto [lo, hi] = valid_columns(g, j);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.ph);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const double* src = row + oy * g.wo;
          double* dst = img + (c * g.h + static_cast<std::size_t>(y)) * g.w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + j - g.pw] += src[ox];
        }
      }
}

}  // namespace detail

/// Cross-correlation of an NCHW input with an OIHW kernel.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad_h,
                     std::size_t pad_w) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw ContractViolation("conv2d: need NCHW input and OIHW kernel");
  if (input.dim(1) != kernel.dim(1))
    throw ContractViolation("conv2d: input has " + std::to_string(input.dim(1)) +
                            " channels, kernel expects " + std::to_string(kernel.dim(1)));
  if (stride < 1) throw ContractViolation("conv2d: stride must be >= 1");
  detail::ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                     kernel.dim(2), kernel.dim(3), stride, pad_h, pad_w, 0, 0};
  if (g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw)
    throw ContractViolation("conv2d: padded input smaller than kernel");
  g.ho = (g.h + 2 * g.ph - g.kh) / stride + 1;
  g.wo = (g.w + 2 * g.pw - g.kw) / stride + 1;

  const auto ckk = static_cast<Eigen::Index>(g.c * g.kh * g.kw);
  const auto area = static_cast<Eigen::Index>(g.ho * g.wo);
  const auto outc = static_cast<Eigen::Index>(g.o);
  std::vector<double> out(g.n * g.o * g.ho * g.wo);
  std::vector<double> cols(static_cast<std::size_t>(ckk * area));
  detail::ConstMap K(kernel.data().data(), outc, ckk);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(input.data().data() + n * g.c * g.h * g.w, g, cols.data());
    detail::MutMap(out.data() + n * g.o * g.ho * g.wo, outc, area).noalias() =
        K * detail::ConstMap(cols.data(), ckk, area);
  }
  return detail::make_op({g.n, g.o, g.ho, g.wo}, std::move(out), {input, kernel},
                         [g, ckk, area, outc](detail::Node& self) {
                           detail::Node& in = *self.parents[0];
                           detail::Node& ker = *self.parents[1];
                           std::vector<double> cols(static_cast<std::size_t>(ckk * area));
                           detail::ConstMap K(ker.value.data(), outc, ckk);
                           for (std::size_t n = 0; n < g.n; ++n) {
                             detail::ConstMap G(self.grad.data() + n * g.o * g.ho * g.wo, outc, area);
                             if (ker.requires_grad) {
                               detail::im2col(in.value.data() + n * g.c * g.h * g.w, g, cols.data());
                               detail::MutMap(ker.grad_buffer().data(), outc, ckk).noalias() +=
                                   G * detail::ConstMap(cols.data(), ckk, area).transpose();
                             }
                             if (in.requires_grad) {
                               detail::MutMap(cols.data(), ckk, area).noalias() = K.transpose() * G;
                               detail::col2im_add(cols.data(), g, in.grad_buffer().data() + n * g.c * g.h * g.w);
                             }
                           }
                         });
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, stride, padding, padding);
}

/// Nearest-neighbour upsampling of an NCHW tensor by (fh, fw).
inline Tensor upsample2d(const Tensor& input, std::size_t fh, std::size_t fw) {
  if (fh < 1 || fw < 1) throw ContractViolation("upsample2d: factor must be >= 1");
  if (input.rank() != 4) throw ContractViolation("upsample2d: need NCHW input");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t H = h * fh, W = w * fw;
  std::vector<double> out(nc * H * W);
  const auto A = input.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(p * H + y) * W + x] = A[(p * h + y / fh) * w + x / fw];
  return detail::make_op({input.dim(0), input.dim(1), H, W}, std::move(out), {input},
                         [nc, h, w, fh, fw, H, W](detail::Node& self) {
                           auto& gp = self.parents[0]->grad_buffer();
                           for (std::size_t p = 0; p < nc; ++p)
                             for (std::size_t y = 0; y < H; ++y)
                               for (std::size_t x = 0; x < W; ++x)
                                 gp[(p * h + y / fh) * w + x / fw] += self.grad[(p * H + y) * W + x];
                         });
}

inline Tensor upsample2d(const Tensor& input, std::size_t factor) { return upsample2d(input, factor, factor); }

struct BatchNormState {
  Tensor running_mean;  // (C), buffer
  Tensor running_var;   // (C), buffer
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization of an (N, C, ...) tensor with affine
/// gamma/beta of shape (C). Train mode uses batch statistics and updates the
/// running estimates; eval mode uses the running estimates.
inline Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                          BatchNormState& state, bool training) {
  if (input.rank() < 2) throw ContractViolation("batchnorm: need (N, C, ...) input");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t inner = input.numel() / (n * c);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.numel() != c)
    throw ContractViolation("batchnorm: channel count mismatch");
  if (training && n < 2) throw ContractViolation("batchnorm: train mode needs batch size >= 2");
  const double m = static_cast<double>(n * inner);
  const auto X = input.data();
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  auto rm = state.running_mean.mutable_data();
  auto rv = state.running_var.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += X[(b * c + ch) * inner + i];
      const double mean = s / m;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = X[(b * c + ch) * inner + i] - mean;
          ss += d * d;
        }
      const double var = ss / m;
      mu[ch] = mean;
      inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
      rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mean;
      rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * ss / std::max(m - 1.0, 1.0);
    } else {
      mu[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + state.eps);
    }
  }
  std::vector<double> out(input.numel());
  auto xhat = std::make_shared<std::vector<double>>(input.numel());
  const auto G = gamma.data(), B = beta.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (b * c + ch) * inner + i;
        (*xhat)[k] = (X[k] - mu[ch]) * inv_std[ch];
        out[k] = G[ch] * (*xhat)[k] + B[ch];
      }
  return detail::make_op(input.shape(), std::move(out), {input, gamma, beta},
                         [n, c, inner, m, xhat, inv_std, training](detail::Node& self) {
                           detail::Node& in = *self.parents[0];
                           detail::Node& ga = *self.parents[1];
                           detail::Node& be = *self.parents[2];
                           const auto& dy = self.grad;
                           std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                           for (std::size_t b = 0; b < n; ++b)
                             for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t i = 0; i < inner; ++i) {
                                 const std::size_t k = (b * c + ch) * inner + i;
                                 sum_dy[ch] += dy[k];
                                 sum_dy_xhat[ch] += dy[k] * (*xhat)[k];
                               }
                           if (ga.requires_grad) {
                             auto& gg = ga.grad_buffer();
                             for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
                           }
                           if (be.requires_grad) {
                             auto& gb = be.grad_buffer();
                             for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
                           }
                           if (in.requires_grad) {
                             auto& gx = in.grad_buffer();
                             for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 const double scale = ga.value[ch] * inv_std[ch];
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const std::size_t k = (b * c + ch) * inner + i;
                                   if (training)
                                     gx[k] += scale * (dy[k] - sum_dy[ch] / m - (*xhat)[k] * sum_dy_xhat[ch] / m);
                                   else
                                     gx[k] += scale * dy[k];
                                 }
                               }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Layers

namespace detail {
inline std::vector<double> init_values(std::size_t count, std::size_t fan_in, Init init, Rng& rng) {
  std::vector<double> v(count, 0.0);
  if (init == Init::He) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& x : v) x = dist(rng);
  }
  return v;
}
}  // namespace detail

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (1, out)

  Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

/// He (fan-in) normal weights and zero bias; Init::Zero zeroes both.
inline Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in,
                          std::size_t out, Rng& rng, Init init = Init::He) {
  Linear l;
  l.weight = store.add(name + ".weight", {in, out}, detail::init_values(in * out, in, init, rng));
  l.bias = store.add(name + ".bias", {1, out}, std::vector<double>(out, 0.0));
  return l;
}

struct Conv2d {
  Tensor kernel;  // (O, C, kh, kw)
  Tensor bias;    // (1, O, 1, 1); undefined when the layer has no bias
  std::size_t stride = 1, pad_h = 0, pad_w = 0;

  Tensor operator()(const Tensor& x) const {
    Tensor y = conv2d(x, kernel, stride, pad_h, pad_w);
    return bias.defined() ? y + bias : y;
  }
};

inline Conv2d make_conv2d(ParameterStore& store, const std::string& name, std::size_t in_ch,
                          std::size_t out_ch, std::size_t kh, std::size_t kw, std::size_t stride,
                          std::size_t pad_h, std::size_t pad_w, Rng& rng, Init init = Init::He,
                          bool with_bias = true) {
  Conv2d c;
  c.kernel = store.add(name + ".kernel", {out_ch, in_ch, kh, kw},
                       detail::init_values(out_ch * in_ch * kh * kw, in_ch * kh * kw, init, rng));
  if (with_bias) c.bias = store.add(name + ".bias", {1, out_ch, 1, 1}, std::vector<double>(out_ch, 0.0));
  c.stride = stride;
  c.pad_h = pad_h;
  c.pad_w = pad_w;
  return c;
}

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore& store, const std::string& name, std::size_t channels, double momentum = 0.1) {
    gamma_ = store.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    beta_ = store.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
    state_ = std::make_shared<BatchNormState>();
    state_->running_mean = store.add(name + ".running_mean", {channels}, std::vector<double>(channels, 0.0), false);
    state_->running_var = store.add(name + ".running_var", {channels}, std::vector<double>(channels, 1.0), false);
    state_->momentum = momentum;
  }

  Tensor operator()(const Tensor& x, bool training) const {
    return batchnorm2d(x, gamma_, beta_, *state_, training);
  }

 private:
  Tensor gamma_, beta_;
  std::shared_ptr<BatchNormState> state_;
};

// ---------------------------------------------------------------------------
// Encoder / decoder

struct EncoderConfig {
  enum class Kind { Mlp, Conv };
  Kind kind = Kind::Mlp;
  std::size_t input_dim = 1;    // Mlp: condition vector length
  std::size_t image_size = 32;  // Conv: side of a square one-channel image
  std::size_t depth = 3;        // Mlp: number of Linear+ReLU layers
  std::vector<std::size_t> channels = {8, 16, 16};  // Conv: stride-2 stages
  std::size_t width = 64;       // output feature width
};

/// Condition encoder: a ReLU perceptron for scalar/vector conditions or
/// stride-2 conv + batch-norm + ReLU stages for images.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, ParameterStore& store, Rng& rng, const std::string& prefix = "encoder")
      : config_(config) {
    if (config.width == 0) throw ContractViolation("encoder: width must be positive");
    if (config.kind == EncoderConfig::Kind::Mlp) {
      if (config.depth == 0) throw ContractViolation("encoder: depth must be positive");
      std::size_t in = config.input_dim;
      for (std::size_t i = 0; i < config.depth; ++i) {
        layers_.push_back(make_linear(store, prefix + ".fc" + std::to_string(i), in, config.width, rng));
        in = config.width;
      }
    } else {
      std::size_t in = 1, side = config.image_size;
      for (std::size_t i = 0; i < config.channels.size(); ++i) {
        const std::string name = prefix + ".conv" + std::to_string(i);
        // No conv bias: batch norm removes any per-channel offset.
        convs_.push_back(make_conv2d(store, name, in, config.channels[i], 3, 3, 2, 1, 1, rng, Init::He, false));
        norms_.emplace_back(store, prefix + ".bn" + std::to_string(i), config.channels[i]);
        in = config.channels[i];
        side = (side + 2 - 3) / 2 + 1;
      }
      flat_ = in * side * side;
      layers_.push_back(make_linear(store, prefix + ".fc", flat_, config.width, rng));
    }
  }

  const EncoderConfig& config() const { return config_; }

  /// (B, input_dim) or (B, 1, S, S) -> (B, width).
  Tensor operator()(const Tensor& x, bool training) const {
    if (config_.kind == EncoderConfig::Kind::Mlp) {
      if (x.rank() != 2 || x.dim(1) != config_.input_dim)
        throw ContractViolation("encoder: expected (B, " + std::to_string(config_.input_dim) +
                                ") condition, got " + to_string(x.shape()));
      Tensor h = x;
      for (const auto& l : layers_) h = relu(l(h));
      return h;
    }
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.image_size || x.dim(3) != config_.image_size)
      throw ContractViolation("encoder: expected (B, 1, " + std::to_string(config_.image_size) + ", " +
                              std::to_string(config_.image_size) + ") image, got " + to_string(x.shape()));
    Tensor h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) h = relu(norms_[i](convs_[i](h), training));
    h = reshape(h, {x.dim(0), flat_});
    return relu(layers_.back()(h));
  }

 private:
  EncoderConfig config_;
  std::vector<Linear> layers_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> norms_;
  std::size_t flat_ = 0;
};

struct DecoderConfig {
  std::size_t input_width = 64;
  std::size_t out_h = 64;  // bins along the first residual dimension
  std::size_t out_w = 64;  // bins along the second; 1 for scalar residuals
  std::size_t channels = 8;
  std::size_t stages = 2;  // each stage upsamples by 2 then convolves
};

/// Upsampling decoder: dense projection to a coarse C-channel map, then
/// repeated (nearest x2 upsample, 3x3 conv, ReLU), then a zero-initialized
/// 3x3 conv to one channel plus a per-bin bias. Output: (B, out_h * out_w)
/// logits in row-major bin order.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& config, ParameterStore& store, Rng& rng, const std::string& prefix = "decoder")
      : config_(config) {
    const std::size_t f = std::size_t{1} << config.stages;
    const bool wide = config.out_w > 1;
    if (config.out_h % f != 0 || (wide && config.out_w % f != 0))
      throw ContractViolation("decoder: bin grid " + std::to_string(config.out_h) + "x" +
                              std::to_string(config.out_w) + " not divisible by 2^stages");
    base_h_ = config.out_h / f;
    base_w_ = wide ? config.out_w / f : 1;
    fw_ = wide ? 2 : 1;
    const std::size_t kw = wide ? 3 : 1, pw = wide ? 1 : 0;
    const std::size_t C = config.channels;
    project_ = make_linear(store, prefix + ".project", config.input_width, C * base_h_ * base_w_, rng);
    for (std::size_t s = 0; s < config.stages; ++s)
      convs_.push_back(make_conv2d(store, prefix + ".conv" + std::to_string(s), C, C, 3, kw, 1, 1, pw, rng));
    out_ = make_conv2d(store, prefix + ".out", C, 1, 3, kw, 1, 1, pw, rng, Init::Zero, false);
    const std::size_t M = config.out_h * config.out_w;
    bin_bias_ = store.add(prefix + ".bin_bias", {1, M}, std::vector<double>(M, 0.0));
  }

  const DecoderConfig& config() const { return config_; }

  Tensor operator()(const Tensor& h) const {
    if (h.rank() != 2 || h.dim(1) != config_.input_width)
      throw ContractViolation("decoder: expected (B, " + std::to_string(config_.input_width) +
                              ") features, got " + to_string(h.shape()));
    const std::size_t B = h.dim(0);
    Tensor x = reshape(relu(project_(h)), {B, config_.channels, base_h_, base_w_});
    for (const auto& c : convs_) x = relu(c(upsample2d(x, 2, fw_)));
    x = out_(x);
    return reshape(x, {B, config_.out_h * config_.out_w}) + bin_bias_;
  }

 private:
  DecoderConfig config_;
  std::size_t base_h_ = 0, base_w_ = 0, fw_ = 1;
  Linear project_;
  std::vector<Conv2d> convs_;
  Conv2d out_;
  Tensor bin_bias_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // per trainable entry, store order
};

/// Bias-corrected Adam update of every trainable entry in the store.
inline void adam_step(ParameterStore& params, const Gradients& grads, AdamState& state) {
  auto trainable = params.trainable();
  if (state.m.empty()) {
    for (const auto& p : trainable) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != trainable.size()) throw ContractViolation("adam: state does not match parameter store");
  for (const auto& p : trainable)
    if (!grads.contains(p)) throw ContractViolation("adam: missing gradient for a trainable parameter");
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    auto w = trainable[k].mutable_data();
    const auto g = grads.at(trainable[k]).data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      w[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
}

/// Fresh store holding an encoder built from `config` with weights drawn
/// from `seed`.
inline ParameterStore init_parameters(const EncoderConfig& config, std::uint64_t seed) {
  ParameterStore store;
  Rng rng = make_stream(seed, 0x1417);
  Encoder enc(config, store, rng);
  return store;
}

}  // namespace dpdf
