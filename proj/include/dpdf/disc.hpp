#pragma once

// Discretized density: a categorical distribution over a regular grid of
// residual bins. K <= 2 predicts the logit map with the upsampling decoder,
// K = 3 with a dense layer.

#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dpdf/dataset.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

struct BinningSpec {
  std::vector<double> lower, upper;
  std::vector<std::size_t> counts;

  std::size_t K() const { return counts.size(); }

  std::size_t total() const {
    std::size_t m = 1;
    for (auto n : counts) m *= n;
    return m;
  }

  double width(std::size_t k) const { return (upper[k] - lower[k]) / static_cast<double>(counts[k]); }

  double bin_volume() const {
    double v = 1.0;
    for (std::size_t k = 0; k < K(); ++k) v *= width(k);
    return v;
  }

  Domain domain() const { return {lower, upper}; }

  void validate() const {
    if (counts.empty() || lower.size() != counts.size() || upper.size() != counts.size())
      throw ContractViolation("binning: bounds and counts must share one length K >= 1");
    if (counts.size() > 3) throw ContractViolation("binning: discretized densities support K <= 3 only");
    for (std::size_t k = 0; k < K(); ++k) {
      if (!(upper[k] > lower[k])) throw ContractViolation("binning: upper bound must exceed lower bound");
      if (counts[k] == 0) throw ContractViolation("binning: bin counts must be >= 1");
    }
  }
};

/// 1-based bin along dimension k: ⌈(ε - b⁻)/(b⁺ - b⁻) · N⌉, with ε = b⁻ mapped to 1.
inline std::size_t bin_index(double eps, std::size_t k, const BinningSpec& spec) {
  if (k >= spec.K()) throw ContractViolation("bin_index: dimension out of range");
  if (!(eps >= spec.lower[k] && eps <= spec.upper[k]))
    throw RangeError(k, eps, "bin_index: residual " + std::to_string(eps) + " outside [" +
                                 std::to_string(spec.lower[k]) + ", " + std::to_string(spec.upper[k]) +
                                 "] along dim " + std::to_string(k));
  const double n = static_cast<double>(spec.counts[k]);
  const double r = std::ceil((eps - spec.lower[k]) / (spec.upper[k] - spec.lower[k]) * n);
  return static_cast<std::size_t>(std::clamp(r, 1.0, n));
}

/// 1 + Σ_k (Π_{j>k} N_j)(n_k - 1) for 1-based per-dimension indices.
inline std::size_t flat_index_of(std::span<const std::size_t> n, const BinningSpec& spec) {
  if (n.size() != spec.K()) throw ContractViolation("flat_index: index dimension mismatch");
  std::size_t m = 0;
  for (std::size_t k = 0; k < n.size(); ++k) {
    if (n[k] < 1 || n[k] > spec.counts[k]) throw ContractViolation("flat_index: bin index out of range");
    m = m * spec.counts[k] + (n[k] - 1);
  }
  return m + 1;
}

inline std::size_t flat_index(std::span<const double> eps, const BinningSpec& spec) {
  if (eps.size() != spec.K()) throw ContractViolation("flat_index: residual dimension mismatch");
  std::vector<std::size_t> n(eps.size());
  for (std::size_t k = 0; k < eps.size(); ++k) n[k] = bin_index(eps[k], k, spec);
  return flat_index_of(n, spec);
}

/// Per-dimension 1-based indices of flat bin m.
inline std::vector<std::size_t> unflatten(std::size_t m, const BinningSpec& spec) {
  if (m < 1 || m > spec.total()) throw ContractViolation("unflatten: bin out of range");
  std::vector<std::size_t> n(spec.K());
  std::size_t r = m - 1;
  for (std::size_t k = spec.K(); k-- > 0;) {
    n[k] = r % spec.counts[k] + 1;
    r /= spec.counts[k];
  }
  return n;
}

struct DiscConfig {
  BinningSpec binning;
  EncoderConfig encoder;
  std::size_t decoder_channels = 8;
  std::size_t decoder_stages = 2;
};

class DiscModel : public DensityModel {
 public:
  DiscModel(const DiscConfig& config, std::uint64_t seed) : cfg_(config) {
    cfg_.binning.validate();
    Rng rng = make_stream(seed, 0xd15c);
    encoder_ = Encoder(cfg_.encoder, store_, rng);
    const auto& b = cfg_.binning;
    if (b.K() <= 2) {
      DecoderConfig d;
      d.input_width = cfg_.encoder.width;
      d.out_h = b.counts[0];
      d.out_w = b.K() == 2 ? b.counts[1] : 1;
      d.channels = cfg_.decoder_channels;
      d.stages = cfg_.decoder_stages;
      decoder_ = Decoder(d, store_, rng);
    } else {
      dense_ = make_linear(store_, "disc.dense", cfg_.encoder.width, b.total(), rng, Init::Zero);
    }
  }

  ModelFamily family() const override { return ModelFamily::Disc; }
  std::size_t K() const override { return cfg_.binning.K(); }
  const DiscConfig& config() const { return cfg_; }
  const BinningSpec& binning() const { return cfg_.binning; }

  /// Bin logits (B, M), bins in flat-index order.
  Tensor logits(const Tensor& cond, bool training = false) const {
    const Tensor h = encoder_(cond, training);
    return cfg_.binning.K() <= 2 ? decoder_(h) : dense_(h);
  }

  /// Bin probabilities P_1..P_M for each condition.
  std::vector<std::vector<double>> forward(const Tensor& cond) const {
    NoGradGuard guard;
    const Tensor p = softmax(logits(cond, false), 1);
    const std::size_t M = cfg_.binning.total();
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < p.dim(0); ++b)
      out.emplace_back(p.data().begin() + static_cast<std::ptrdiff_t>(b * M),
                       p.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * M));
    return out;
  }

  /// Cross-entropy -ln P_{m(ε)}(x), (B, 1).
  Tensor nll(const Tensor& cond, const Tensor& eps, bool training = false) const {
    return -select_columns(log_softmax(logits(cond, training), 1), bins_of(cond, eps));
  }

  /// ln(P_{m(ε)} / bin volume), (B, 1).
  Tensor log_prob(const Tensor& cond, const Tensor& eps, bool training = false) const override {
    return select_columns(log_softmax(logits(cond, training), 1), bins_of(cond, eps)) -
           std::log(cfg_.binning.bin_volume());
  }

  std::vector<double> log_density_points(const Tensor& cond1, std::span<const double> points) const override {
    check_single(cond1);
    NoGradGuard guard;
    const Tensor lp = log_softmax(logits(cond1, false), 1);
    const double lv = std::log(cfg_.binning.bin_volume());
    const std::size_t K = this->K();
    std::vector<double> out(points.size() / K);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::span<const double> e{points.data() + i * K, K};
      out[i] = supports(e) ? lp.data()[flat_index(e, cfg_.binning) - 1] - lv : -INFINITY;
    }
    return out;
  }

  std::vector<double> sample(const Tensor& cond1, std::size_t n, Rng& rng) const override {
    check_single(cond1);
    return sample_bins(forward(cond1).front(), cfg_.binning, n, rng);
  }

  /// Categorical bin choice, then uniform within the bin.
  static std::vector<double> sample_bins(const std::vector<double>& probs, const BinningSpec& spec, std::size_t n,
                                         Rng& rng) {
    std::vector<double> cdf(probs.size());
    double acc = 0.0;
    for (std::size_t m = 0; m < probs.size(); ++m) cdf[m] = acc += probs[m];
    std::vector<double> out;
    out.reserve(n * spec.K());
    for (std::size_t i = 0; i < n; ++i) {
      const double u = uniform(rng) * acc;
      std::size_t m = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      m = std::min(m, probs.size() - 1);
      while (probs[m] == 0.0 && m > 0) --m;
      const auto idx = unflatten(m + 1, spec);
      for (std::size_t k = 0; k < spec.K(); ++k) {
        const double lo = spec.lower[k] + static_cast<double>(idx[k] - 1) * spec.width(k);
        // Bins are (lo, lo + w]; the open end has measure zero.
        out.push_back(uniform(rng, lo, lo + spec.width(k)));
      }
    }
    return out;
  }

  bool supports(std::span<const double> eps) const override {
    for (std::size_t k = 0; k < eps.size(); ++k)
      if (!(eps[k] >= cfg_.binning.lower[k] && eps[k] <= cfg_.binning.upper[k])) return false;
    return true;
  }

 private:
  std::vector<std::size_t> bins_of(const Tensor& cond, const Tensor& eps) const {
    check_eps(cond, eps);
    const std::size_t K = this->K();
    std::vector<std::size_t> idx(eps.dim(0));
    for (std::size_t b = 0; b < idx.size(); ++b) idx[b] = flat_index({eps.data().data() + b * K, K}, cfg_.binning) - 1;
    return idx;
  }

  DiscConfig cfg_;
  Encoder encoder_;
  Decoder decoder_;
  Linear dense_;
};

// ---------------------------------------------------------------------------
// Heatmaps

/// Binary P5 graymap (16-bit when `wide`), row-major, scaled so the largest
/// value maps to the top gray level.
inline void write_pgm(const std::string& path, std::span<const double> values, std::size_t rows, std::size_t cols,
                      bool wide = true) {
  if (values.size() != rows * cols) throw ContractViolation("write_pgm: value count does not match dimensions");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  const unsigned maxval = wide ? 65535u : 255u;
  os << "P5\n" << cols << " " << rows << "\n" << maxval << "\n";
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, v);
  for (double v : values) {
    const double scaled = peak > 0.0 ? std::max(0.0, v) / peak * maxval : 0.0;
    const auto q = static_cast<unsigned>(std::lround(scaled));
    if (wide) {
      const char b[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
      os.write(b, 2);
    } else {
      os.put(static_cast<char>(q));
    }
  }
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

/// Sidecar text describing the axes of a heatmap.
inline void write_bounds_sidecar(const std::string& path, const BinningSpec& spec, double peak) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.precision(17);
  os << "dims " << spec.K() << "\n";
  for (std::size_t k = 0; k < spec.K(); ++k)
    os << "axis " << k << " lower " << spec.lower[k] << " upper " << spec.upper[k] << " bins " << spec.counts[k]
       << "\n";
  os << "peak " << peak << "\n";
}

/// Heatmap of the bin probabilities of one condition (K <= 2) plus sidecar.
inline void export_heatmap(const DiscModel& model, const Tensor& cond1, const std::string& stem) {
  const auto& spec = model.binning();
  if (spec.K() > 2) throw ContractViolation("export_heatmap: K must be <= 2");
  const auto p = model.forward(cond1).front();
  write_pgm(stem + ".pgm", p, spec.counts[0], spec.K() == 2 ? spec.counts[1] : 1);
  write_bounds_sidecar(stem + ".bounds.txt", spec, *std::max_element(p.begin(), p.end()));
}

}  // namespace dpdf
