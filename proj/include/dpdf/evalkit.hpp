#pragma once

// Evaluation: test-set NLL, grid Hellinger distance to the true density,
// the perfect-reference baseline and probability calibration curves.

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dpdf/dataset.hpp"
#include "dpdf/disc.hpp"
#include "dpdf/distlab.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

// ---------------------------------------------------------------------------
// Quadrature grid

/// Midpoint grid over a box: counts[k] cells along dim k.
struct EvalGrid {
  std::vector<double> lower, upper;
  std::vector<std::size_t> counts;

  static EvalGrid box(std::size_t K, double lo, double hi, std::size_t n) {
    return {std::vector<double>(K, lo), std::vector<double>(K, hi), std::vector<std::size_t>(K, n)};
  }
  static EvalGrid over(const Domain& d, std::size_t n) {
    return {d.lower, d.upper, std::vector<std::size_t>(d.lower.size(), n)};
  }

  std::size_t K() const { return counts.size(); }
  std::size_t size() const {
    std::size_t m = 1;
    for (auto n : counts) m *= n;
    return m;
  }
  double cell_volume() const {
    double v = 1.0;
    for (std::size_t k = 0; k < K(); ++k) v *= (upper[k] - lower[k]) / static_cast<double>(counts[k]);
    return v;
  }

  void validate() const {
    if (counts.empty() || lower.size() != counts.size() || upper.size() != counts.size())
      throw ContractViolation("grid: bounds and counts must share one length");
    for (std::size_t k = 0; k < K(); ++k)
      if (!(upper[k] > lower[k]) || counts[k] == 0) throw ContractViolation("grid: empty cell range");
  }

  /// Cell centres, flat (size * K), last dimension fastest.
  std::vector<double> points() const {
    validate();
    const std::size_t K = this->K(), n = size();
    std::vector<double> out(n * K);
    std::vector<std::size_t> idx(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        const double w = (upper[k] - lower[k]) / static_cast<double>(counts[k]);
        out[i * K + k] = lower[k] + (static_cast<double>(idx[k]) + 0.5) * w;
      }
      for (std::size_t k = K; k-- > 0;) {
        if (++idx[k] < counts[k]) break;
        idx[k] = 0;
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Hellinger distance

using DensityFn = std::function<double(std::span<const double>)>;

/// sqrt(max(0, 1 - Σ √(p q) · vol)) from density values at the same cells.
inline double hellinger_from_values(std::span<const double> p, std::span<const double> q, double cell_volume) {
  if (p.size() != q.size()) throw ContractViolation("hellinger: value count mismatch");
  double bc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0 || std::isnan(p[i]) || std::isnan(q[i]))
      throw ContractViolation("hellinger: negative or NaN density at cell " + std::to_string(i));
    bc += std::sqrt(p[i] * q[i]);
  }
  return std::clamp(std::sqrt(std::max(0.0, 1.0 - bc * cell_volume)), 0.0, 1.0);
}

inline double hellinger(const DensityFn& p, const DensityFn& q, const EvalGrid& grid) {
  if (grid.K() > 2) throw ContractViolation("hellinger: grid quadrature is defined for K <= 2");
  const auto pts = grid.points();
  const std::size_t K = grid.K(), n = grid.size();
  std::vector<double> pv(n), qv(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> e{pts.data() + i * K, K};
    pv[i] = p(e);
    qv[i] = q(e);
  }
  return hellinger_from_values(pv, qv, grid.cell_volume());
}

// ---------------------------------------------------------------------------
// True density

/// The analytic density of each record, renormalized to the simulator
/// domain when residuals were drawn by rejection into one.
class TruthOracle {
 public:
  TruthOracle(const Simulator& sim, std::uint64_t seed, std::uint64_t stream, std::size_t mass_points = 400,
              std::size_t mass_draws = 20000)
      : sim_(sim), seed_(seed), stream_(stream), mass_points_(mass_points), mass_draws_(mass_draws) {}

  std::size_t K() const { return sim_.config().K; }
  const std::optional<Domain>& domain() const { return sim_.config().domain; }

  MmSgedParams params(const Dataset& ds, std::size_t i) const { return sim_.truth(ds.condition(i), seed_, stream_, i); }

  /// ln of the probability mass inside the domain (0 without a domain):
  /// midpoint quadrature for K <= 2, Monte Carlo otherwise.
  double log_mass(const MmSgedParams& prm, std::size_t index) const {
    const auto& d = domain();
    if (!d) return 0.0;
    const std::size_t K = this->K();
    double mass = 0.0;
    if (K <= 2) {
      const EvalGrid g = EvalGrid::over(*d, mass_points_);
      const auto pts = g.points();
      for (std::size_t i = 0; i < g.size(); ++i) mass += std::exp(mmsged_logpdf({pts.data() + i * K, K}, prm));
      mass *= g.cell_volume();
    } else {
      Rng rng = make_stream(seed_, stream_ ^ 0x6d617373ULL, index);
      std::size_t inside = 0;
      for (std::size_t j = 0; j < mass_draws_; ++j) inside += d->contains(mmsged_sample(prm, rng)) ? 1 : 0;
      mass = static_cast<double>(inside) / static_cast<double>(mass_draws_);
    }
    if (!(mass > 0.0)) throw DomainError("truth: no probability mass inside the domain");
    return std::log(std::min(mass, 1.0));
  }

  double logpdf(std::span<const double> eps, const MmSgedParams& prm, double log_mass) const {
    if (domain() && !domain()->contains(eps)) return -INFINITY;
    return mmsged_logpdf(eps, prm) - log_mass;
  }

  /// ln p(ε_i | x_i) for every record.
  std::vector<double> log_probs(const Dataset& ds) const {
    std::vector<double> out(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto prm = params(ds, i);
      out[i] = logpdf(ds.residual(i), prm, log_mass(prm, i));
    }
    return out;
  }

  /// Density values at grid cells for record i's condition, normalized
  /// over the grid so the quadrature of the reference is exactly one.
  std::vector<double> grid_density(const Dataset& ds, std::size_t i, const EvalGrid& grid,
                                   const std::vector<double>& pts) const {
    const auto prm = params(ds, i);
    const std::size_t K = grid.K();
    std::vector<double> out(grid.size());
    double mass = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) mass += out[j] = std::exp(logpdf({pts.data() + j * K, K}, prm, 0.0));
    mass *= grid.cell_volume();
    if (!(mass > 0.0)) throw DomainError("truth: no probability mass on the evaluation grid");
    for (auto& v : out) v /= mass;
    return out;
  }

 private:
  const Simulator& sim_;
  std::uint64_t seed_, stream_;
  std::size_t mass_points_, mass_draws_;
};

// ---------------------------------------------------------------------------
// NLL

/// Mean of -ln p over records; any non-finite entry is an error listing
/// the offending indices.
inline double nll_from_log_probs(std::span<const double> lp) {
  if (lp.empty()) throw ContractViolation("nll: empty test set");
  std::vector<std::size_t> bad;
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (!std::isfinite(lp[i])) bad.push_back(i);
    s -= lp[i];
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "nll: " << bad.size() << " record(s) not evaluable by the model, indices";
    for (std::size_t j = 0; j < std::min<std::size_t>(bad.size(), 20); ++j) os << ' ' << bad[j];
    if (bad.size() > 20) os << " ...";
    throw DomainError(os.str());
  }
  return s / static_cast<double>(lp.size());
}

/// ln p(ε_i | x_i) under a model, in batches; records outside the model's
/// support give -inf.
inline std::vector<double> model_log_probs(const DensityModel& model, const Dataset& ds, std::size_t batch = 256) {
  if (ds.K != model.K()) throw ContractViolation("nll: dataset K does not match the model");
  NoGradGuard guard;
  std::vector<double> out(ds.size(), -INFINITY);
  std::vector<std::size_t> rows;
  auto flush = [&] {
    if (rows.empty()) return;
    const Tensor lp = model.log_prob(ds.condition_batch(rows), ds.residual_batch(rows), false);
    for (std::size_t j = 0; j < rows.size(); ++j) out[rows[j]] = lp[j];
    rows.clear();
  };
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!model.supports(ds.residual(i))) continue;
    rows.push_back(i);
    if (rows.size() == batch) flush();
  }
  flush();
  return out;
}

inline double nll_eval(const DensityModel& model, const Dataset& ds) { return nll_from_log_probs(model_log_probs(model, ds)); }
inline double nll_eval(const TruthOracle& truth, const Dataset& ds) { return nll_from_log_probs(truth.log_probs(ds)); }

// ---------------------------------------------------------------------------
// Average Hellinger distance

namespace detail {
/// f(i) for i in [0, n) on `threads` workers; results land by index.
inline std::vector<double> parallel_map(std::size_t n, unsigned threads, const std::function<double(std::size_t)>& f) {
  std::vector<double> out(n);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = n * t / threads; i < n * (t + 1) / threads; ++i) out[i] = f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}
}  // namespace detail

struct HellingerResult {
  double mean = 0.0;
  std::vector<double> per_condition;
};

inline HellingerResult mean_of(std::vector<double> v) {
  HellingerResult r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(std::max<std::size_t>(v.size(), 1));
  r.per_condition = std::move(v);
  return r;
}

/// H̄ of a model against the truth over the conditions of records `rows`.
inline HellingerResult avg_hellinger(const DensityModel& model, const TruthOracle& truth, const Dataset& ds,
                                     std::span<const std::size_t> rows, const EvalGrid& grid, unsigned threads = 1) {
  if (model.K() > 2 || grid.K() != model.K()) throw ContractViolation("avg_hellinger: requires K <= 2 and a matching grid");
  if (rows.empty()) throw ContractViolation("avg_hellinger: no conditions");
  const auto pts = grid.points();
  return mean_of(detail::parallel_map(rows.size(), threads, [&](std::size_t j) {
    const std::size_t i = rows[j];
    const Tensor cond = ds.condition_batch(std::span<const std::size_t>(&i, 1));
    auto pv = model.log_density_points(cond, pts);
    for (auto& v : pv) v = std::exp(v);
    return hellinger_from_values(pv, truth.grid_density(ds, i, grid, pts), grid.cell_volume());
  }));
}

/// H̄ of the truth against itself: zero up to quadrature.
inline HellingerResult avg_hellinger(const TruthOracle& truth, const Dataset& ds, std::span<const std::size_t> rows,
                                     const EvalGrid& grid, unsigned threads = 1) {
  if (truth.K() > 2) throw ContractViolation("avg_hellinger: requires K <= 2");
  const auto pts = grid.points();
  return mean_of(detail::parallel_map(rows.size(), threads, [&](std::size_t j) {
    const auto q = truth.grid_density(ds, rows[j], grid, pts);
    return hellinger_from_values(q, q, grid.cell_volume());
  }));
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationSpec {
  double lowest = 1e-3;  // lower edge of the first decade
  std::size_t bins_per_decade = 2;
};

struct CalibrationPoint {
  double lo = 0.0, hi = 0.0;  // predicted-probability bin edges
  double predicted = 0.0;     // mean predicted probability of the cells in the bin
  double observed = 0.0;      // fraction of those cells that held the true residual
  std::size_t count = 0, hits = 0;
};

/// Log-spaced bins from `lowest` to 1, preceded by one bin [0, lowest) so
/// every cell is counted.
inline std::vector<CalibrationPoint> calibration_curve(const std::vector<std::vector<double>>& probs,
                                                       std::span<const std::size_t> true_bins,
                                                       const CalibrationSpec& spec = {}) {
  if (probs.empty()) throw ContractViolation("calibration: empty test set");
  if (probs.size() != true_bins.size()) throw ContractViolation("calibration: one true bin per record required");
  if (!(spec.lowest > 0.0 && spec.lowest < 1.0) || spec.bins_per_decade == 0)
    throw ContractViolation("calibration: invalid bin specification");
  const double decades = -std::log10(spec.lowest);
  const auto nlog = static_cast<std::size_t>(std::ceil(decades * static_cast<double>(spec.bins_per_decade) - 1e-9));
  std::vector<CalibrationPoint> pts(nlog + 1);
  pts[0].lo = 0.0;
  pts[0].hi = spec.lowest;
  for (std::size_t b = 0; b < nlog; ++b) {
    pts[b + 1].lo = spec.lowest * std::pow(10.0, static_cast<double>(b) / static_cast<double>(spec.bins_per_decade));
    pts[b + 1].hi = b + 1 == nlog ? 1.0
                                  : spec.lowest * std::pow(10.0, static_cast<double>(b + 1) /
                                                                     static_cast<double>(spec.bins_per_decade));
  }
  std::vector<double> psum(pts.size(), 0.0);
  auto locate = [&](double p) {
    if (p < spec.lowest) return std::size_t{0};
    const auto b = static_cast<std::size_t>(std::floor(std::log10(p / spec.lowest) * static_cast<double>(spec.bins_per_decade)));
    return std::min(b, nlog - 1) + 1;
  };
  for (std::size_t r = 0; r < probs.size(); ++r) {
    if (true_bins[r] >= probs[r].size()) throw ContractViolation("calibration: true bin out of range");
    for (std::size_t m = 0; m < probs[r].size(); ++m) {
      const std::size_t b = locate(probs[r][m]);
      pts[b].count += 1;
      psum[b] += probs[r][m];
      if (m == true_bins[r]) pts[b].hits += 1;
    }
  }
  for (std::size_t b = 0; b < pts.size(); ++b)
    if (pts[b].count > 0) {
      pts[b].predicted = psum[b] / static_cast<double>(pts[b].count);
      pts[b].observed = static_cast<double>(pts[b].hits) / static_cast<double>(pts[b].count);
    }
  return pts;
}

/// Calibration of a discretized model on a test set whose residuals lie
/// inside the binning.
inline std::vector<CalibrationPoint> calibration_curve(const DiscModel& model, const Dataset& ds,
                                                       const CalibrationSpec& spec = {}, std::size_t batch = 256) {
  if (ds.size() == 0) throw ContractViolation("calibration: empty test set");
  std::vector<std::vector<double>> probs;
  std::vector<std::size_t> bins;
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < ds.size(); s += batch) {
    rows.clear();
    for (std::size_t i = s; i < std::min(ds.size(), s + batch); ++i) rows.push_back(i);
    for (auto& p : model.forward(ds.condition_batch(rows))) probs.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < ds.size(); ++i) bins.push_back(flat_index(ds.residual(i), model.binning()) - 1);
  return calibration_curve(probs, bins, spec);
}

// ---------------------------------------------------------------------------
// Report rows

struct EvalReport {
  std::string model, experiment;
  std::size_t K = 0;
  double nll = 0.0;
  std::optional<double> hellinger;
  std::uint64_t seed = 0;
  double wall_clock = 0.0;  // seconds
};

inline std::string csv_header() { return "model,experiment,K,NLL,H,seed,wall_clock_s"; }

inline std::string to_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << r.model << ',' << r.experiment << ',' << r.K << ',' << r.nll << ',';
  if (r.hellinger) os << *r.hellinger;
  else os << "n/a";
  os << ',' << r.seed << ',' << r.wall_clock;
  return os.str();
}

inline EvalReport parse_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
  if (f.size() != 7) throw ParseError("results: expected 7 columns in '" + line + "'");
  try {
    EvalReport r;
    r.model = f[0];
    r.experiment = f[1];
    r.K = std::stoul(f[2]);
    r.nll = std::stod(f[3]);
    if (f[4] != "n/a") r.hellinger = std::stod(f[4]);
    r.seed = std::stoull(f[5]);
    r.wall_clock = std::stod(f[6]);
    return r;
  } catch (const std::logic_error&) {
    throw ParseError("results: malformed row '" + line + "'");
  }
}

}  // namespace dpdf
