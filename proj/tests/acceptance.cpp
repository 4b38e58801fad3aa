// Acceptance run: criteria 1-10, one PASS/FAIL line each. Criteria 5 and 6
// train every desk-scale experiment in configs/ and take the longest.
//
//   dpdf_acceptance [--only 1,3,8] [--work DIR] [--configs DIR] [--reuse]

#include <CLI11.hpp>

#include <chrono>
#include <limits>
#include <cstdio>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "dpdf/gradcheck.hpp"
#include "dpdf/harness.hpp"
#include "oracles.hpp"

using namespace dpdf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

void perturb(DensityModel& m, std::uint64_t seed, double scale) {
  Rng rng = make_stream(seed, 0);
  for (auto& t : m.parameters().trainable())
    for (auto& v : t.mutable_data()) v += scale * standard_normal(rng);
}

EncoderConfig small_encoder() {
  EncoderConfig e;
  e.depth = 2;
  e.width = 6;
  return e;
}

FlowConfig small_flow(std::size_t K, std::size_t depth) {
  FlowConfig c;
  c.K = K;
  c.depth = depth;
  c.hidden = 8;
  c.spline_bins = 5;
  c.tail_bound = 3.0;
  c.encoder = small_encoder();
  return c;
}

DiscConfig small_disc(std::size_t K) {
  DiscConfig c;
  c.binning = K == 1 ? BinningSpec{{-3.0}, {3.0}, {16}} : BinningSpec{{-2.0, -2.0}, {2.0, 2.0}, {8, 8}};
  c.encoder = small_encoder();
  c.decoder_channels = 3;
  c.decoder_stages = 2;
  return c;
}

GmmConfig small_gmm(std::size_t K, std::size_t N) { return GmmConfig{K, N, std::nullopt, small_encoder()}; }

// Midpoint grid of n^K points (K <= 2) over [lo, hi]^K, last dimension fastest.
std::vector<double> grid_points(std::size_t K, double lo, double hi, std::size_t n) {
  const double w = (hi - lo) / static_cast<double>(n);
  std::vector<double> pts;
  pts.reserve(K == 1 ? n : 2 * n * n);
  for (std::size_t i = 0; i < n; ++i) {
    if (K == 1) {
      pts.push_back(lo + (static_cast<double>(i) + 0.5) * w);
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) {
      pts.push_back(lo + (static_cast<double>(i) + 0.5) * w);
      pts.push_back(lo + (static_cast<double>(j) + 0.5) * w);
    }
  }
  return pts;
}

double integrate_log_density(std::size_t K, double lo, double hi, std::size_t n,
                             const std::function<std::vector<double>(const std::vector<double>&)>& logpdf) {
  const auto pts = grid_points(K, lo, hi, n);
  double s = 0.0;
  for (double v : logpdf(pts)) s += std::exp(v);
  return s * std::pow((hi - lo) / static_cast<double>(n), static_cast<double>(K));
}

// Integral over all of R^K (K <= 2) through x = a tan(u), midpoint rule on
// (-pi/2, pi/2)^K with Jacobian a sec^2(u) per dimension.
double integrate_log_density_tan(std::size_t K, double a, std::size_t n,
                                 const std::function<std::vector<double>(const std::vector<double>&)>& logpdf) {
  const double du = std::numbers::pi / static_cast<double>(n);
  std::vector<double> x(n), jac(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = -std::numbers::pi / 2 + (static_cast<double>(i) + 0.5) * du;
    x[i] = a * std::tan(u);
    jac[i] = a / (std::cos(u) * std::cos(u)) * du;
  }
  std::vector<double> pts, w;
  for (std::size_t i = 0; i < n; ++i) {
    if (K == 1) {
      pts.push_back(x[i]);
      w.push_back(jac[i]);
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) {
      pts.push_back(x[i]);
      pts.push_back(x[j]);
      w.push_back(jac[i] * jac[j]);
    }
  }
  const auto lp = logpdf(pts);
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) s += std::exp(lp[i]) * w[i];
  return s;
}

// χ² of 2-D samples on a bins x bins grid over [lo, hi]² plus one outside
// cell; cell masses by sub x sub midpoint quadrature of a batched log-density.
double chi2_2d(const std::vector<double>& xs, const std::function<std::vector<double>(const std::vector<double>&)>& logpdf,
               double lo, double hi, std::size_t bins = 12, std::size_t sub = 16) {
  const std::size_t cells = bins * bins, n = xs.size() / 2;
  std::vector<double> counts(cells + 1, 0.0), probs(cells + 1, 0.0);
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = xs[2 * i], b = xs[2 * i + 1];
    if (!(a > lo && a <= hi && b > lo && b <= hi)) {
      counts[cells] += 1;
      continue;
    }
    const auto ia = std::min(bins - 1, static_cast<std::size_t>((a - lo) / w));
    const auto ib = std::min(bins - 1, static_cast<std::size_t>((b - lo) / w));
    counts[ia * bins + ib] += 1;
  }
  const std::size_t m = bins * sub;
  const auto pts = grid_points(2, lo, hi, m);
  const auto lp = logpdf(pts);
  const double h = (hi - lo) / static_cast<double>(m);
  double inner = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double p = std::exp(lp[i * m + j]) * h * h;
      probs[(i / sub) * bins + j / sub] += p;
      inner += p;
    }
  probs[cells] = std::max(0.0, 1.0 - inner);
  return oracle::chi2_pvalue(counts, probs, static_cast<double>(n));
}

// Single-condition batched log-density of a model.
auto model_logpdf(const DensityModel& m, const Tensor& cond) {
  return [&m, cond](const std::vector<double>& pts) { return m.log_density_points(cond, pts); };
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

// A finite-difference check is only meaningful where the function is smooth
// across the stencil. ReLU corners and spline knots make the losses piecewise
// smooth, so an instance whose central differences at h and h/4 disagree
// (values only, no gradients involved) straddles a kink and is redrawn.
using Instance = std::pair<std::function<Tensor()>, std::vector<Tensor>>;

// Gradient magnitude below which a central difference at step h cannot
// resolve 1e-5 relative accuracy: a few ulps of f over 2h, times 1e5.
double fd_resolution(double f, double h) { return 1e6 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f)) / h; }

double central(const Instance& inst, double* v, double step) {
  const double orig = *v;
  *v = orig + step;
  const double up = detail::eval_scalar(inst.first);
  *v = orig - step;
  const double down = detail::eval_scalar(inst.first);
  *v = orig;
  return (up - down) / (2.0 * step);
}

bool smooth_stencil(const Instance& inst, double h) {
  const double tau = fd_resolution(detail::eval_scalar(inst.first), h);
  for (auto p : inst.second)
    for (auto& v : p.mutable_data()) {
      const double a = central(inst, &v, h), b = central(inst, &v, h / 4);
      if (std::abs(a - b) > 1e-6 * std::max(std::abs(a), std::abs(b)) + 1e-4 * tau) return false;
    }
  return true;
}

// Max of |analytic - central| / max(|analytic|, resolution) over all coordinates.
double fd_error(const Instance& inst, double h, std::size_t& coords, std::size_t& below) {
  const Tensor out = inst.first();
  const double tau = fd_resolution(out.item(), h);
  const Gradients grads = backward(out, inst.second);
  double worst = 0.0;
  for (auto p : inst.second) {
    const auto analytic = grads.at(p).to_vector();
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double n = central(inst, &data[i], h);
      ++coords;
      if (std::abs(analytic[i]) < tau) ++below;
      worst = std::max(worst, std::abs(analytic[i] - n) / std::max(std::abs(analytic[i]), tau));
    }
  }
  return worst;
}

Instance of_tensor(const std::function<Tensor(const Tensor&)>& f, const Tensor& point) {
  Tensor x(point.shape(), point.to_vector(), true);
  return {[f, x] { return f(x); }, {x}};
}

Outcome gradient_integrity() {
  using Fn = std::function<Tensor(const Tensor&)>;
  const double h = 1e-5;
  const int trials = 20;
  std::map<std::string, double> worst;
  std::size_t redrawn = 0, coords = 0, below = 0;
  auto check = [&](const std::string& name, const std::function<Instance()>& draw) {
    for (int i = 0, misses = 0; i < trials;) {
      const Instance inst = draw();
      if (!smooth_stencil(inst, h)) {
        ++redrawn;
        if (++misses > trials) throw std::runtime_error(name + ": no smooth instance found");
        continue;
      }
      worst[name] = std::max(worst[name], fd_error(inst, h, coords, below));
      ++i;
    }
  };

  Rng rng = make_stream(101, 0);
  const Tensor other = random_tensor({3, 4}, rng, 0.5, 1.5);
  const Tensor row = random_tensor({1, 4}, rng, 0.5, 1.5);
  const Tensor right = random_tensor({4, 2}, rng);
  const std::vector<std::pair<std::string, Fn>> ops = {
      {"add", [=](const Tensor& t) { return sum(square(t + other)); }},
      {"add_broadcast", [=](const Tensor& t) { return sum(square(t + row)); }},
      {"sub", [=](const Tensor& t) { return sum(square(other - t)); }},
      {"mul", [=](const Tensor& t) { return sum(t * other * t); }},
      {"div", [=](const Tensor& t) { return sum(other / (t * t + 1.0)); }},
      {"div_broadcast", [=](const Tensor& t) { return sum(t / row); }},
      {"neg", [=](const Tensor& t) { return sum(square(-t)); }},
      {"exp", [=](const Tensor& t) { return sum(exp(t)); }},
      {"log", [=](const Tensor& t) { return sum(log(square(t) + 0.5)); }},
      {"tanh", [=](const Tensor& t) { return sum(tanh(t) * other); }},
      {"relu", [=](const Tensor& t) { return sum(relu(t) * other); }},
      {"square", [=](const Tensor& t) { return sum(square(t)); }},
      {"clamp", [=](const Tensor& t) { return sum(square(clamp(t, -0.5, 0.5)) * other); }},
      {"sum", [=](const Tensor& t) { return square(sum(t * other)); }},
      {"sum_axis", [=](const Tensor& t) { return sum(square(sum(t, 1))); }},
      {"mean_axis", [=](const Tensor& t) { return sum(square(mean(t, 0))); }},
      {"mean", [=](const Tensor& t) { return square(mean(t)); }},
      {"max", [=](const Tensor& t) { return sum(square(max(t, 1))); }},
      {"matmul", [=](const Tensor& t) { return sum(square(matmul(t, right))); }},
      {"transpose", [=](const Tensor& t) { return sum(square(matmul(transpose(t), other))); }},
      {"reshape", [=](const Tensor& t) { return sum(square(reshape(t, {2, 6})) * 0.5); }},
      {"slice", [=](const Tensor& t) { return sum(square(slice(t, 1, 1, 3))); }},
      {"concat", [=](const Tensor& t) { return sum(square(concat({t, other * t}, 0))); }},
      {"logsumexp", [=](const Tensor& t) { return sum(logsumexp(t * 3.0, 1)); }},
      {"softmax", [=](const Tensor& t) { return sum(softmax(t, 1) * other); }},
      {"log_softmax", [=](const Tensor& t) { return sum(log_softmax(t, 0) * other); }},
      {"select_columns", [=](const Tensor& t) { return sum(square(select_columns(t, {3, 0, 2}))); }},
  };
  for (const auto& [name, f] : ops) check(name, [&, f = f] { return of_tensor(f, random_tensor({3, 4}, rng)); });

  const Tensor up_w = random_tensor({1, 2, 4, 3}, rng);
  int conv_i = 0;
  check("conv2d", [&] {
    Tensor x(Shape{2, 2, 5, 4}, random_tensor({2, 2, 5, 4}, rng).to_vector(), true);
    Tensor k(Shape{3, 2, 3, 3}, random_tensor({3, 2, 3, 3}, rng).to_vector(), true);
    const std::size_t stride = 1 + static_cast<std::size_t>(conv_i++ % 2);
    return Instance{[x, k, stride] { return sum(square(conv2d(x, k, stride, 1))); }, {x, k}};
  });
  check("upsample2d", [&] {
    return of_tensor([up_w](const Tensor& t) { return sum(square(upsample2d(t, 2, 1)) * up_w); },
                     random_tensor({1, 2, 2, 3}, rng));
  });
  int bn_i = 0;
  check("batchnorm2d", [&] {
    auto store = std::make_shared<ParameterStore>();
    auto bn = std::make_shared<BatchNorm2d>(*store, "bn", 2);
    store->assign("bn.gamma", {2}, {uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0)});
    Tensor xb(Shape{3, 2, 2, 2}, random_tensor({3, 2, 2, 2}, rng).to_vector(), true);
    const Tensor w = random_tensor({3, 2, 2, 2}, rng);
    const bool training = bn_i++ % 4 != 3;
    auto params = store->trainable();
    params.push_back(xb);
    return Instance{[store, bn, xb, w, training] { return sum(square((*bn)(xb, training) * w + w)); }, params};
  });

  // The three training losses, end to end through the encoder.
  auto batch = [&](std::size_t K, auto residual) {
    const std::size_t B = 4;
    std::vector<double> cv(B), ev(B * K);
    for (auto& v : cv) v = uniform(rng, -1, 1);
    for (std::size_t j = 0; j < ev.size(); ++j) ev[j] = residual(j % K);
    return std::pair{Tensor({B, 1}, cv), Tensor({B, K}, ev)};
  };
  auto loss_of = [](std::shared_ptr<DensityModel> m, std::pair<Tensor, Tensor> data) {
    return Instance{[m, data] { return m->loss(data.first, data.second); }, m->parameters().trainable()};
  };
  std::uint64_t draw = 0;
  check("loss_gmm", [&] {
    ++draw;
    const std::size_t K = 1 + draw % 2;
    auto m = std::make_shared<GmmModel>(small_gmm(K, 3), 200 + draw);
    perturb(*m, 300 + draw, 0.2);
    return loss_of(m, batch(K, [&](std::size_t) { return uniform(rng, -1.5, 1.5); }));
  });
  check("loss_disc", [&] {
    ++draw;
    const std::size_t K = 1 + draw % 2;
    DiscConfig dc = small_disc(K);
    if (K == 1) dc.binning.counts = {8};
    auto m = std::make_shared<DiscModel>(dc, 400 + draw);
    perturb(*m, 500 + draw, 0.2);
    return loss_of(m, batch(K, [&](std::size_t k) { return uniform(rng, dc.binning.lower[k], dc.binning.upper[k]); }));
  });
  check("loss_nf", [&] {
    ++draw;
    const std::size_t K = 1 + draw % 2;
    auto m = std::make_shared<FlowModel>(small_flow(K, 2), 600 + draw);
    perturb(*m, 700 + draw, 0.2);
    return loss_of(m, batch(K, [&](std::size_t) { return standard_normal(rng); }));
  });

  double max_err = 0.0;
  std::string arg = "none";
  for (const auto& [name, e] : worst)
    if (e >= max_err) max_err = e, arg = name;
  return {max_err < 1e-5,
          fmt("%zu checks x %d instances, max rel err %.2e (%s), %zu instances redrawn at kinks, %zu of %zu "
              "gradient entries below the difference resolution",
              worst.size(), trials, max_err, arg.c_str(), redrawn, below, coords)};
}

// ---------------------------------------------------------------------------
// 2. Normalization

Outcome normalization() {
  // The constant printed in the source text, checked against quadrature
  // before the derived one is trusted.
  auto printed = [](std::size_t K, double p, const std::vector<double>& s) {
    const double k = static_cast<double>(K);
    double ls = 0.0;
    for (double v : s) ls += std::log(v);
    return std::log(p) + std::lgamma(k / 2) - std::log(2.0) - 0.5 * k * std::log(std::numbers::pi) - ls -
           std::lgamma(k / p);
  };
  std::vector<std::string> notes;
  bool ok = true;
  double worst = 0.0;
  auto record = [&](const std::string& what, double total) {
    const double e = std::abs(total - 1.0);
    worst = std::max(worst, e);
    if (!(e <= 1e-3)) {
      ok = false;
      notes.push_back(fmt("%s integrates to %.6f", what.c_str(), total));
    }
  };

  {
    // Validation of the normalization constant.
    auto unit = MvSgedParams::standard(1, 1.0, 1.7);
    const double shift = printed(1, unit.p, unit.s) - mvsged_log_norm(1, unit.p, unit.s);
    const double with_printed = integrate_log_density(1, -40, 40, 80000, [&](const std::vector<double>& pts) {
      std::vector<double> out;
      for (double x : pts) out.push_back(mvsged_logpdf(std::vector<double>{x}, unit) + shift);
      return out;
    });
    const double k2_gap = std::abs(printed(2, 1.7, {0.8, 1.3}) - mvsged_log_norm(2, 1.7, {0.8, 1.3}));
    if (std::abs(with_printed - 1.0) < 1e-3 || k2_gap > 1e-12) {
      ok = false;
      notes.push_back(fmt("constant validation unexpected: printed K=1 integral %.4f, K=2 gap %.2e", with_printed, k2_gap));
    }
  }

  Rng rng = make_stream(202, 0);
  const ParamRanges ranges{0.3, 1.5, -0.6, 0.6, 0.8, 3.0, -1.0, 1.0};
  for (std::size_t K : {1u, 2u}) {
    const std::size_t n = K == 1 ? 20000 : 1500;
    for (int t = 0; t < 4; ++t) {
      const auto prm = random_mvsged(K, ranges, rng);
      record(fmt("mvsged K=%zu p=%.2f", K, prm.p), integrate_log_density_tan(K, 2.0, n, [&](const std::vector<double>& pts) {
               std::vector<double> out;
               for (std::size_t i = 0; i < pts.size(); i += K)
                 out.push_back(mvsged_logpdf(std::span<const double>(pts.data() + i, K), prm));
               return out;
             }));
      const auto mm = ConditionedFamily::random(K, 3, 8, ranges, 900 + static_cast<std::uint64_t>(t) + 10 * K)
                          .eval(uniform(rng, -0.95, 0.95));
      record(fmt("mmsged K=%zu", K), integrate_log_density_tan(K, 2.0, n, [&](const std::vector<double>& pts) {
               std::vector<double> out;
               for (std::size_t i = 0; i < pts.size(); i += K)
                 out.push_back(mmsged_logpdf(std::span<const double>(pts.data() + i, K), mm));
               return out;
             }));

      const Tensor cond({1, 1}, {uniform(rng, -1, 1)});
      GmmModel g(small_gmm(K, 3), 1000 + static_cast<std::uint64_t>(t));
      perturb(g, 1100 + static_cast<std::uint64_t>(t), 0.5);
      const auto head = g.predict_params(cond).front();
      record(fmt("gmm K=%zu", K), integrate_log_density_tan(K, 2.0, n, [&](const std::vector<double>& pts) {
               std::vector<double> out;
               for (std::size_t i = 0; i < pts.size(); i += K)
                 out.push_back(-gmm_nll(head, std::span<const double>(pts.data() + i, K)));
               return out;
             }));

      DiscModel d(small_disc(K), 1200 + static_cast<std::uint64_t>(t));
      perturb(d, 1300 + static_cast<std::uint64_t>(t), 0.5);
      const auto& b = d.binning();
      record(fmt("disc K=%zu", K), integrate_log_density(K, b.lower[0], b.upper[0], K == 1 ? 1600 : 400, model_logpdf(d, cond)));

      FlowModel f(small_flow(K, 4), 1400 + static_cast<std::uint64_t>(t));
      perturb(f, 1500 + static_cast<std::uint64_t>(t), 0.2);
      record(fmt("nf K=%zu", K), integrate_log_density_tan(K, 2.0, n, model_logpdf(f, cond)));
    }
  }
  std::string detail = fmt("5 densities x K in {1,2} x 4 instances, max |integral - 1| = %.2e", worst);
  for (const auto& n : notes) detail += "; " + n;
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 3. Flow exactness

Outcome flow_exactness() {
  double worst_rt = 0.0, worst_ld = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng = make_stream(303, s);
    FlowModel m(small_flow(2, 2 + s % 5), 3000 + s);
    perturb(m, 3100 + s, 0.3);
    const Tensor cond({1, 1}, {uniform(rng, -1, 1)});
    const Tensor h = m.features(cond);
    std::vector<double> ev(2 * 8);
    for (auto& v : ev) v = 1.5 * standard_normal(rng);
    const Tensor eps({8, 2}, ev);
    const auto [z, ld] = m.inverse(h, eps);
    const auto [back, fld] = m.forward(h, z);
    for (std::size_t i = 0; i < ev.size(); ++i) worst_rt = std::max(worst_rt, std::abs(back[i] - ev[i]));
    for (std::size_t i = 0; i < 8; ++i) {
      worst_rt = std::max(worst_rt, std::abs(fld[i] + ld[i]));
      const std::vector<double> e{ev[2 * i], ev[2 * i + 1]};
      Eigen::Matrix2d J;
      const double step = 1e-6;
      for (int j = 0; j < 2; ++j) {
        auto up = e, dn = e;
        up[static_cast<std::size_t>(j)] += step;
        dn[static_cast<std::size_t>(j)] -= step;
        const auto zu = m.nf_inverse(up, cond).z, zd = m.nf_inverse(dn, cond).z;
        for (int r = 0; r < 2; ++r) J(r, j) = (zu[static_cast<std::size_t>(r)] - zd[static_cast<std::size_t>(r)]) / (2 * step);
      }
      worst_ld = std::max(worst_ld, std::abs(ld[i] - std::log(std::abs(J.determinant()))));
    }
  }
  return {worst_rt < 1e-8 && worst_ld < 1e-6,
          fmt("100 stacks x 8 points at K=2, max round-trip err %.2e, max log-det err %.2e", worst_rt, worst_ld)};
}

// ---------------------------------------------------------------------------
// 4. Sampler fidelity

Outcome sampler_fidelity() {
  const std::size_t n = 100000;
  std::vector<std::pair<std::string, double>> pv;

  {
    const SgedParams prm{0.9, 0.45, 1.6};
    Rng rng = make_stream(404, 1);
    std::vector<double> xs(n);
    for (auto& x : xs) x = sged_sample(prm, rng);
    pv.emplace_back("sged", oracle::chi2_1d(xs, [&](double x) { return std::exp(sged_logpdf(x, prm)); }, -5, 5, 50));
  }
  auto sged_pts = [&](auto draw) {
    std::vector<double> xs;
    xs.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = draw();
      xs.insert(xs.end(), e.begin(), e.end());
    }
    return xs;
  };
  {
    MvSgedParams prm = MvSgedParams::standard(2);
    prm.s = {0.8, 1.3};
    prm.lambda = {0.4, -0.3};
    prm.p = 1.5;
    prm.rotation = rotation_from_generator(2, {0.7});
    prm.offset = {0.3, -0.5};
    Rng rng = make_stream(404, 2);
    const auto xs = sged_pts([&] { return mvsged_sample(prm, rng); });
    pv.emplace_back("mvsged", chi2_2d(xs, [&](const std::vector<double>& pts) {
      std::vector<double> out;
      for (std::size_t i = 0; i < pts.size(); i += 2) out.push_back(mvsged_logpdf(std::span<const double>(pts.data() + i, 2), prm));
      return out;
    }, -5, 5));
  }
  {
    const auto prm = ConditionedFamily::random(2, 3, 8, ParamRanges{0.3, 1.5, -0.6, 0.6, 1.0, 3.0, -2.0, 2.0}, 77).eval(0.31);
    Rng rng = make_stream(404, 3);
    const auto xs = sged_pts([&] { return mmsged_sample(prm, rng); });
    pv.emplace_back("mmsged", chi2_2d(xs, [&](const std::vector<double>& pts) {
      std::vector<double> out;
      for (std::size_t i = 0; i < pts.size(); i += 2) out.push_back(mmsged_logpdf(std::span<const double>(pts.data() + i, 2), prm));
      return out;
    }, -6, 6));
  }
  const Tensor cond({1, 1}, {0.35});
  {
    GmmModel m(small_gmm(2, 3), 4040);
    perturb(m, 4041, 0.5);
    const auto head = m.predict_params(cond).front();
    Rng rng = make_stream(404, 4);
    const auto xs = sged_pts([&] { return gmm_sample(head, rng); });
    pv.emplace_back("gmm", chi2_2d(xs, [&](const std::vector<double>& pts) {
      std::vector<double> out;
      for (std::size_t i = 0; i < pts.size(); i += 2) out.push_back(-gmm_nll(head, std::span<const double>(pts.data() + i, 2)));
      return out;
    }, -5, 5));
  }
  {
    DiscModel m(small_disc(2), 4050);
    perturb(m, 4051, 0.5);
    const auto probs = m.forward(cond).front();
    Rng rng = make_stream(404, 5);
    const auto xs = m.sample(cond, n, rng);
    std::vector<double> counts(probs.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) counts[flat_index(std::span<const double>(xs.data() + 2 * i, 2), m.binning()) - 1] += 1;
    pv.emplace_back("disc bins", oracle::chi2_pvalue(counts, probs, static_cast<double>(n)));
    pv.emplace_back("disc within-bin", chi2_2d(xs, model_logpdf(m, cond), -2, 2, 16, 8));
  }
  {
    FlowModel m(small_flow(2, 4), 4060);
    perturb(m, 4061, 0.2);
    Rng rng = make_stream(404, 6);
    const auto xs = m.sample(cond, n, rng);
    pv.emplace_back("nf", chi2_2d(xs, model_logpdf(m, cond), -4, 4));
  }
  bool ok = true;
  std::string detail = "n=1e5, p-values:";
  for (const auto& [name, p] : pv) {
    ok = ok && p > 0.01;
    detail += fmt(" %s %.3f", name.c_str(), p);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 5 and 6. Desk-scale experiments

struct ExperimentRun {
  ExperimentConfig config;
  std::vector<EvalReport> rows;
  std::map<std::string, double> train_seconds;
};

class Experiments {
 public:
  Experiments(fs::path configs, fs::path work, bool reuse) : configs_(std::move(configs)), work_(std::move(work)), reuse_(reuse) {}

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(configs_))
      if (e.path().extension() == ".json") out.push_back(e.path().stem().string());
    std::sort(out.begin(), out.end());
    return out;
  }

  const ExperimentRun& get(const std::string& name) {
    auto it = runs_.find(name);
    if (it != runs_.end()) return it->second;
    ExperimentRun run;
    run.config = load_config((configs_ / (name + ".json")).string());
    run.config.out = (work_ / name).string();
    run.config.record_wall_clock = true;
    const RunPaths paths = run_paths(run.config);
    bool have = reuse_ && fs::exists(paths.results());
    for (const auto& m : run.config.models) have = have && fs::exists(paths.checkpoint(m.name)) && fs::exists(paths.timing(m.name));
    const auto start = std::chrono::steady_clock::now();
    if (have) {
      run.rows = read_results(paths.results());
      for (const auto& m : run.config.models) {
        std::ifstream t(paths.timing(m.name));
        t >> run.train_seconds[m.name];
      }
    } else {
      std::cout << "  [" << name << "] generate, train, eval" << std::endl;
      cmd_generate(run.config);
      for (const auto& [m, s] : cmd_train(run.config, {}, &std::cout)) run.train_seconds[m] = s.seconds;
      run.rows = cmd_eval(run.config);
    }
    std::cout << "  [" << name << "] "
              << fmt("%.0f s", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()) << '\n';
    for (const auto& r : run.rows)
      std::cout << "    " << fmt("%-10s NLL %8.4f  H %s  train %s", r.model.c_str(), r.nll,
                                 r.hellinger ? fmt("%.4f", *r.hellinger).c_str() : "n/a   ",
                                 run.train_seconds.count(r.model) ? fmt("%.0f s", run.train_seconds[r.model]).c_str() : "-")
                << '\n';
    std::cout.flush();
    return runs_.emplace(name, std::move(run)).first->second;
  }

 private:
  fs::path configs_, work_;
  bool reuse_;
  std::map<std::string, ExperimentRun> runs_;
};

const EvalReport& row_of(const ExperimentRun& run, const std::string& model) {
  for (const auto& r : run.rows)
    if (r.model == model) return r;
  throw std::runtime_error("no result row for " + model + " in " + run.config.name);
}

Outcome gibbs_bound(Experiments& ex) {
  bool ok = true;
  double min_margin = 1e9, max_ref_h = 0.0;
  std::string detail;
  std::size_t checked = 0;
  for (const auto& name : ex.names()) {
    const auto& run = ex.get(name);
    const auto& ref = row_of(run, "reference");
    if (ref.hellinger) {
      max_ref_h = std::max(max_ref_h, *ref.hellinger);
      if (!(*ref.hellinger <= 1e-3)) {
        ok = false;
        detail += fmt("; %s reference H %.2e", name.c_str(), *ref.hellinger);
      }
    }
    for (const auto& r : run.rows) {
      if (r.model == "reference") continue;
      ++checked;
      const double margin = r.nll - (ref.nll - 0.05);
      min_margin = std::min(min_margin, margin);
      if (!(margin >= 0.0)) {
        ok = false;
        detail += fmt("; %s/%s NLL %.4f < reference %.4f - 0.05", name.c_str(), r.model.c_str(), r.nll, ref.nll);
      }
    }
  }
  return {ok, fmt("%zu trained models, min NLL - (ref - 0.05) = %.4f, max reference H = %.2e", checked, min_margin,
                  max_ref_h) + detail};
}

Outcome learning_effectiveness(Experiments& ex) {
  bool ok = true;
  std::string detail;
  auto close = [&](const ExperimentRun& run, const std::string& model, double tol) {
    const auto& r = row_of(run, model);
    const double gap = r.nll - row_of(run, "reference").nll;
    const double h = r.hellinger.value_or(1.0);
    detail += fmt(" %s/%s gap %.3f H %.3f;", run.config.name.c_str(), model.c_str(), gap, h);
    return gap <= tol && h <= tol;
  };
  const auto& k1 = ex.get("scalar_k1");
  ok = close(k1, "gmm", 0.15) && ok;
  ok = close(k1, "disc", 0.15) && ok;
  const auto& k2 = ex.get("scalar_k2");
  int good = 0;
  for (const std::string m : {"gmm", "disc", "nf"}) good += close(k2, m, 0.20) ? 1 : 0;
  detail += fmt(" K=2 families within bound: %d of 3;", good);
  ok = ok && good >= 2;
  double slowest = 0.0;
  for (const auto* run : {&k1, &k2})
    for (const auto& [m, s] : run->train_seconds) slowest = std::max(slowest, s);
  detail += fmt(" slowest training run %.0f s", slowest);
  ok = ok && slowest <= 600.0;
  return {ok, detail.substr(1)};
}

// ---------------------------------------------------------------------------
// 7. Gaussian sanity

Outcome gaussian_sanity() {
  Eigen::Matrix2d sigma;
  sigma << 1.0, 0.4, 0.4, 0.6;
  auto mu = [](double x) { return Eigen::Vector2d(0.8 * x, -0.5 + 0.4 * x * x); };
  const Eigen::Matrix2d chol = sigma.llt().matrixL();
  auto draw = [&](std::size_t count, std::uint64_t stream) {
    Dataset ds;
    ds.K = 2;
    ds.condition_shape = {1};
    Rng rng = make_stream(707, stream);
    for (std::size_t i = 0; i < count; ++i) {
      const double x = uniform(rng, -1.0, 1.0);
      const Eigen::Vector2d e = mu(x) + chol * Eigen::Vector2d(standard_normal(rng), standard_normal(rng));
      ds.conditions.push_back(x);
      ds.residuals.push_back(e(0));
      ds.residuals.push_back(e(1));
    }
    return ds;
  };
  const Dataset train = draw(50000, 1), test = draw(5000, 2);

  // Moment oracle on the data itself: residual minus the true mean has covariance Σ.
  Eigen::Matrix2d emp = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Eigen::Vector2d d = Eigen::Vector2d(train.residual(i)[0], train.residual(i)[1]) - mu(train.condition(i)[0]);
    emp += d * d.transpose();
  }
  emp /= static_cast<double>(train.size());

  GmmConfig g;
  g.K = 2;
  g.modes = 1;
  g.encoder.depth = 2;
  g.encoder.width = 16;
  GmmModel model(g, 77);
  // Step decay: a second phase at a tenth of the rate settles the Adam jitter.
  TrainOptions opt;
  opt.lr = 1e-3;
  opt.epochs = 40;
  opt.seed = 78;
  train_model(model, train, nullptr, opt, nullptr);
  opt.lr = 1e-4;
  opt.epochs = 20;
  opt.seed = 79;
  train_model(model, train, nullptr, opt, nullptr);

  double mean_err = 0.0, cov_err = 0.0;
  std::vector<double> xs;
  for (int i = -8; i <= 8; ++i) xs.push_back(0.1 * i);
  const auto heads = model.predict_params(Tensor({xs.size(), 1}, xs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto m = heads[i].mean(0);
    const Eigen::Vector2d t = mu(xs[i]);
    mean_err = std::max({mean_err, std::abs(m[0] - t(0)), std::abs(m[1] - t(1))});
    const Eigen::MatrixXd c = heads[i].covariances[0].covariance();
    for (int r = 0; r < 2; ++r)
      for (int col = 0; col < 2; ++col) cov_err = std::max(cov_err, std::abs(c(r, col) / emp(r, col) - 1.0));
  }
  const double entropy = 0.5 * std::log(std::pow(2.0 * std::numbers::pi * std::numbers::e, 2) * sigma.determinant());
  const double nll = nll_eval(model, test);
  const bool ok = mean_err < 0.05 && cov_err < 0.10 && std::abs(nll - entropy) < 0.05;
  return {ok, fmt("max mean err %.4f, max cov rel err %.3f (empirical vs true %.3f), test NLL %.4f vs entropy %.4f",
                  mean_err, cov_err, (emp - sigma).cwiseAbs().maxCoeff(), nll, entropy)};
}

// ---------------------------------------------------------------------------
// 8. Bin arithmetic

Outcome bin_arithmetic() {
  bool ok = true;
  std::string fail;
  std::size_t visited = 0;
  for (const BinningSpec& s : {BinningSpec{{-1.0, 0.0}, {1.0, 2.5}, {4, 5}},
                               BinningSpec{{-3.0, -3.0, 0.0}, {3.0, 3.0, 1.5}, {3, 3, 3}}}) {
    std::set<std::size_t> seen;
    std::vector<std::size_t> n(s.K(), 1);
    for (bool more = true; more;) {
      std::size_t expected = 1, stride = 1;
      for (std::size_t k = s.K(); k-- > 0;) {
        expected += stride * (n[k] - 1);
        stride *= s.counts[k];
      }
      // Residual at the centre of the cell must land in it.
      std::vector<double> centre(s.K());
      for (std::size_t k = 0; k < s.K(); ++k) centre[k] = s.lower[k] + (static_cast<double>(n[k]) - 0.5) * s.width(k);
      const std::size_t m = flat_index_of(n, s);
      if (m != expected || !seen.insert(m).second || unflatten(m, s) != n || flat_index(centre, s) != m) {
        ok = false;
        fail += fmt(" flat index %zu (expected %zu);", m, expected);
      }
      ++visited;
      std::size_t k = s.K();
      while (k-- > 0) {
        if (++n[k] <= s.counts[k]) break;
        n[k] = 1;
      }
      more = k != static_cast<std::size_t>(-1);
    }
    ok = ok && seen.size() == s.total() && *seen.begin() == 1 && *seen.rbegin() == s.total();

    for (std::size_t k = 0; k < s.K(); ++k) {
      const double lo = s.lower[k], hi = s.upper[k], w = s.width(k);
      const std::size_t N = s.counts[k];
      auto expect = [&](double e, std::size_t bin, const char* what) {
        const std::size_t got = bin_index(e, k, s);
        if (got != bin) {
          ok = false;
          fail += fmt(" %s dim %zu: bin %zu, expected %zu;", what, k, got, bin);
        }
      };
      expect(lo, 1, "b-");
      expect(lo + 1e-15, 1, "b- + 1e-15");
      expect(hi, N, "b+");
      expect(std::nextafter(hi, lo), N, "b+ - ulp");
      expect(lo + w, 1, "first interior edge");
      expect(lo + w * (1.0 + 1e-9), 2, "just past the first edge");
      for (double outside : {std::nextafter(lo, lo - 1.0), std::nextafter(hi, hi + 1.0)}) {
        try {
          bin_index(outside, k, s);
          ok = false;
          fail += fmt(" %.17g accepted along dim %zu;", outside, k);
        } catch (const RangeError& e) {
          if (e.dim() != k) ok = false;
        }
      }
    }
    std::vector<double> low(s.lower), high(s.upper);
    ok = ok && flat_index(low, s) == 1 && flat_index(high, s) == s.total();
  }
  return {ok, fmt("%zu cells over (4,5) and (3,3,3) visited, boundary cases at b-, b-+1e-15, b+, interior edges%s",
                  visited, fail.c_str())};
}

// ---------------------------------------------------------------------------
// 9. Calibration

Outcome calibration() {
  // Discretized predictor with widely spread bin probabilities; every test
  // residual is drawn from the predictor's own distribution.
  DiscConfig dc;
  dc.binning = {{-4.0}, {4.0}, {32}};
  dc.encoder = small_encoder();
  dc.decoder_channels = 3;
  dc.decoder_stages = 2;
  DiscModel m(dc, 909);
  perturb(m, 910, 1.5);
  const std::size_t n = 20000;
  Rng rng = make_stream(911, 0);
  Dataset ds;
  ds.K = 1;
  ds.condition_shape = {1};
  for (std::size_t i = 0; i < n; ++i) ds.conditions.push_back(uniform(rng, -1.0, 1.0));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto probs = m.forward(ds.condition_batch(all));
  for (std::size_t i = 0; i < n; ++i) {
    const auto xs = DiscModel::sample_bins(probs[i], dc.binning, 1, rng);
    ds.residuals.push_back(xs[0]);
  }
  const auto curve = calibration_curve(m, ds, {1e-3, 2});
  bool ok = true;
  std::size_t checked = 0, total = 0;
  double worst = 0.0;
  std::set<int> decades;
  for (const auto& pt : curve) {
    total += pt.count;
    if (pt.lo < 1e-3 || pt.count < 30) continue;
    const double sd = std::sqrt(pt.predicted * (1.0 - pt.predicted) / static_cast<double>(pt.count));
    const double z = std::abs(pt.observed - pt.predicted) / sd;
    worst = std::max(worst, z);
    ok = ok && z <= 3.0;
    decades.insert(static_cast<int>(std::floor(std::log10(pt.lo) + 1e-9)));
    ++checked;
  }
  ok = ok && total == n * dc.binning.total() && decades.size() == 3;
  return {ok, fmt("%zu probability bins across %zu decades in [1e-3, 1], max |obs - pred| = %.2f sigma", checked,
                  decades.size(), worst)};
}

// ---------------------------------------------------------------------------
// 10. Determinism

std::map<std::string, std::string> snapshot_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::ifstream is(e.path(), std::ios::binary);
      std::stringstream ss;
      ss << is.rdbuf();
      out[fs::relative(e.path(), dir).string()] = ss.str();
    }
  return out;
}

Outcome determinism(const fs::path& work) {
  Json j = Json::parse(R"({
    "name": "determinism", "kind": "scalar", "K": 2, "seed": 5,
    "domain": {"lower": [-6, -6], "upper": [6, 6]},
    "data": {"train": 3000, "test": 24, "validation_fraction": 0.1},
    "encoder": {"depth": 2, "width": 24},
    "optimizer": {"epochs": 3, "batch": 128},
    "models": [
      {"name": "gaussian", "family": "gmm", "modes": 1},
      {"name": "gmm", "family": "gmm", "modes": 3, "background": true},
      {"name": "disc", "family": "disc", "bins": [16, 16], "decoder_channels": 4},
      {"name": "nf", "family": "nf", "depth": 3, "hidden": 24}
    ],
    "eval": {"grid_points": 60, "mass_points": 200},
    "report": {"heatmap_conditions": 2, "heatmap_points": 32},
    "record_wall_clock": false
  })");
  std::vector<std::map<std::string, std::string>> runs;
  for (unsigned threads : {1u, 1u, 3u}) {
    j["data"]["threads"] = threads;
    j["eval"]["threads"] = threads;
    j["out"] = (work / ("determinism_" + std::to_string(runs.size()))).string();
    const auto c = parse_config(j);
    fs::remove_all(c.out);
    cmd_generate(c);
    cmd_train(c);
    cmd_eval(c);
    cmd_report(c, {});
    runs.push_back(snapshot_dir(c.out));
  }
  std::size_t differing = 0;
  std::string which;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    if (runs[r].size() != runs[0].size()) ++differing;
    for (const auto& [name, bytes] : runs[0]) {
      auto it = runs[r].find(name);
      if (it == runs[r].end() || it->second != bytes) {
        ++differing;
        which += " " + name;
      }
    }
  }
  return {differing == 0 && runs[0].size() > 20,
          fmt("%zu files compared across two single-thread runs and one 3-thread run, %zu differ%s", runs[0].size(),
              differing, which.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::vector<int> only;
  std::string work = "acceptance_runs", configs = DPDF_CONFIG_DIR;
  bool reuse = false;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "directory for experiment runs");
  app.add_option("--configs", configs, "directory of desk-scale experiment configs");
  app.add_flag("--reuse", reuse, "reuse finished experiment runs found in the work directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  Experiments experiments(configs, work, reuse);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"normalization", normalization},
      {"flow exactness", flow_exactness},
      {"sampler fidelity", sampler_fidelity},
      {"Gibbs bound", [&] { return gibbs_bound(experiments); }},
      {"learning effectiveness", [&] { return learning_effectiveness(experiments); }},
      {"Gaussian sanity", gaussian_sanity},
      {"bin arithmetic", bin_arithmetic},
      {"calibration", calibration},
      {"determinism", [&] { return determinism(work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << fmt(" [%.1f s]", secs) << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
