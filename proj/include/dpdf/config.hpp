#pragma once

// Experiment configuration: one JSON document per experiment. Every object
// is checked against its allowed keys, so a misspelled option is an error
// rather than a silently ignored default.

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpdf/binary_io.hpp"
#include "dpdf/dataset.hpp"
#include "dpdf/distlab.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelSpec {
  std::string name;  // row label in results, e.g. "gaussian", "gmm", "disc", "nf"
  ModelFamily family = ModelFamily::Gmm;
  // gmm
  std::size_t modes = 5;
  bool background = false;
  // disc
  std::vector<std::size_t> bins;
  std::size_t decoder_channels = 8;
  std::size_t decoder_stages = 2;
  // nf
  std::size_t depth = 6;
  std::size_t hidden = 64;
  std::size_t spline_bins = 8;
  double tail_bound = 5.0;
  double scale_bound = 2.0;
  // optimizer overrides
  std::optional<double> lr;
  std::optional<std::size_t> epochs;
};

struct FamilySpec {
  std::size_t modes = 3;
  std::size_t anchors = 8;
  std::uint64_t seed = 1;
  ParamRanges ranges;  // offsets ±2 by default
};

struct DataSpec {
  std::size_t train = 20000;
  std::size_t test = 200;
  double validation_fraction = 0.0;
  unsigned threads = 1;
};

struct EncoderSpec {
  std::size_t depth = 3;
  std::size_t width = 64;
  std::vector<std::size_t> channels = {8, 16, 16};
};

struct OptimizerSpec {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t epochs = 50;
  std::size_t batch = 256;
};

struct EvalSpec {
  std::size_t grid_points = 400;  // per dimension, K <= 2
  double box = 12.0;              // half-width of the grid when there is no domain
  std::size_t mass_points = 400;  // truncation quadrature, K <= 2
  unsigned threads = 1;
};

struct ReportSpec {
  std::size_t heatmap_conditions = 4;
  std::size_t heatmap_points = 128;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ConditionKind kind = ConditionKind::Scalar;
  std::size_t K = 1;
  std::uint64_t seed = 1;
  FamilySpec family;
  ParamRanges ranges{0.3, 1.5, -0.6, 0.6, 0.8, 3.0, -1.0, 1.0};  // parameter/image kinds
  std::size_t image_size = 32;
  double image_extent = 4.0;
  std::optional<Domain> domain;
  DataSpec data;
  EncoderSpec encoder;
  OptimizerSpec optimizer;
  std::vector<ModelSpec> models;
  EvalSpec eval;
  ReportSpec report;
  bool record_wall_clock = true;
  std::string out = "runs/experiment";

  const ModelSpec& model(const std::string& name) const {
    for (const auto& m : models)
      if (m.name == name) return m;
    throw ConfigError("config: no model named '" + name + "'");
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError("config: bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
  }
}

inline void read_pair(const Json& j, const char* key, double& lo, double& hi, const std::string& where) {
  if (!j.contains(key)) return;
  std::vector<double> v;
  read(j, key, v, where);
  if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError("config: '" + std::string(key) + "' in " + where + " must be [lo, hi]");
  lo = v[0];
  hi = v[1];
}

inline ParamRanges read_ranges(const Json& j, ParamRanges r, const std::string& where) {
  check_keys(j, {"s", "lambda", "p", "offset"}, where);
  read_pair(j, "s", r.s_lo, r.s_hi, where);
  read_pair(j, "lambda", r.lambda_lo, r.lambda_hi, where);
  read_pair(j, "p", r.p_lo, r.p_hi, where);
  read_pair(j, "offset", r.offset_lo, r.offset_hi, where);
  if (!(r.s_lo > 0.0) || !(r.p_lo > 0.0) || r.lambda_lo <= -1.0 || r.lambda_hi >= 1.0)
    throw ConfigError("config: " + where + " violates s > 0, p > 0, |lambda| < 1");
  return r;
}

inline Json ranges_json(const ParamRanges& r) {
  return {{"s", {r.s_lo, r.s_hi}}, {"lambda", {r.lambda_lo, r.lambda_hi}}, {"p", {r.p_lo, r.p_hi}},
          {"offset", {r.offset_lo, r.offset_hi}}};
}

inline ModelSpec read_model(const Json& j, std::size_t index) {
  const std::string where = "models[" + std::to_string(index) + "]";
  check_keys(j, {"name", "family", "modes", "background", "bins", "decoder_channels", "decoder_stages", "depth",
                 "hidden", "spline_bins", "tail_bound", "scale_bound", "lr", "epochs"},
             where);
  ModelSpec m;
  std::string family;
  read(j, "family", family, where);
  if (family.empty()) throw ConfigError("config: " + where + " needs a 'family' (gmm, disc or nf)");
  try {
    m.family = parse_model_family(family);
  } catch (const ContractViolation& e) {
    throw ConfigError("config: " + where + ": " + e.what());
  }
  m.name = to_string(m.family);
  read(j, "name", m.name, where);
  read(j, "modes", m.modes, where);
  read(j, "background", m.background, where);
  read(j, "bins", m.bins, where);
  read(j, "decoder_channels", m.decoder_channels, where);
  read(j, "decoder_stages", m.decoder_stages, where);
  read(j, "depth", m.depth, where);
  read(j, "hidden", m.hidden, where);
  read(j, "spline_bins", m.spline_bins, where);
  read(j, "tail_bound", m.tail_bound, where);
  read(j, "scale_bound", m.scale_bound, where);
  if (j.contains("lr")) {
    double lr = 0.0;
    read(j, "lr", lr, where);
    m.lr = lr;
  }
  if (j.contains("epochs")) {
    std::size_t e = 0;
    read(j, "epochs", e, where);
    m.epochs = e;
  }
  return m;
}

}  // namespace detail

/// Checks the compatibility rules between kind, K, domain and models.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (c.K == 0) fail("K must be >= 1");
  if (c.kind == ConditionKind::Image && c.K != 2) fail("image conditioning requires K = 2");
  if (c.kind == ConditionKind::Scalar && (c.family.modes == 0 || c.family.anchors < 2))
    fail("scalar family needs modes >= 1 and anchors >= 2");
  if (c.domain) {
    if (c.domain->lower.size() != c.K || c.domain->upper.size() != c.K) fail("domain bounds must have K entries");
    for (std::size_t k = 0; k < c.K; ++k)
      if (!(c.domain->upper[k] > c.domain->lower[k])) fail("domain upper bound must exceed lower bound");
  }
  if (c.data.train < 2 || c.data.test == 0) fail("data.train must be >= 2 and data.test >= 1");
  if (c.data.validation_fraction < 0.0 || c.data.validation_fraction >= 1.0) fail("data.validation_fraction must be in [0, 1)");
  if (c.optimizer.batch < 2 || c.optimizer.epochs == 0 || !(c.optimizer.lr > 0.0)) fail("optimizer needs batch >= 2, epochs >= 1, lr > 0");
  if (c.encoder.width == 0 || (c.kind != ConditionKind::Image && c.encoder.depth == 0)) fail("encoder width/depth must be positive");
  if (c.kind == ConditionKind::Image && c.encoder.channels.empty()) fail("image encoder needs at least one conv stage");
  if (c.eval.grid_points == 0 || !(c.eval.box > 0.0)) fail("eval.grid_points and eval.box must be positive");
  if (c.models.empty()) fail("at least one model is required");
  std::set<std::string> names;
  for (const auto& m : c.models) {
    if (m.name.empty() || m.name == "reference") fail("model name '" + m.name + "' is reserved or empty");
    if (m.name.find_first_of(",/\\ \t\n") != std::string::npos) fail("model name '" + m.name + "' must not contain separators");
    if (!names.insert(m.name).second) fail("duplicate model name '" + m.name + "'");
    switch (m.family) {
      case ModelFamily::Gmm:
        if (m.modes == 0) fail(m.name + ": modes must be >= 1");
        if (m.background && !c.domain) fail(m.name + ": a background weight needs a domain");
        break;
      case ModelFamily::Disc:
        if (c.K > 3) fail(m.name + ": discretized models support K <= 3");
        if (!c.domain) fail(m.name + ": discretized models need a domain (the binning bounds)");
        if (m.bins.size() != c.K) fail(m.name + ": bins must list K bin counts");
        for (auto b : m.bins)
          if (b == 0) fail(m.name + ": bin counts must be >= 1");
        break;
      case ModelFamily::Flow:
        if (c.K == 1 && m.depth == 0) fail(m.name + ": K = 1 flows need depth >= 1");
        if (m.hidden == 0 || m.spline_bins < 2 || !(m.tail_bound > 0.0)) fail(m.name + ": invalid flow settings");
        break;
    }
  }
}

inline ExperimentConfig parse_config(const Json& j) {
  using detail::read;
  detail::check_keys(j, {"name", "kind", "K", "seed", "family", "ranges", "image", "domain", "data", "encoder",
                         "optimizer", "models", "eval", "report", "record_wall_clock", "out"},
                     "the top level");
  ExperimentConfig c;
  const std::string top = "the top level";
  read(j, "name", c.name, top);
  std::string kind = "scalar";
  read(j, "kind", kind, top);
  try {
    c.kind = parse_condition_kind(kind);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  read(j, "K", c.K, top);
  read(j, "seed", c.seed, top);
  if (j.contains("family")) {
    const auto& f = j.at("family");
    detail::check_keys(f, {"modes", "anchors", "seed", "ranges"}, "family");
    read(f, "modes", c.family.modes, "family");
    read(f, "anchors", c.family.anchors, "family");
    read(f, "seed", c.family.seed, "family");
    if (f.contains("ranges")) c.family.ranges = detail::read_ranges(f.at("ranges"), c.family.ranges, "family.ranges");
  }
  if (j.contains("ranges")) c.ranges = detail::read_ranges(j.at("ranges"), c.ranges, "ranges");
  if (j.contains("image")) {
    const auto& im = j.at("image");
    detail::check_keys(im, {"size", "extent"}, "image");
    read(im, "size", c.image_size, "image");
    read(im, "extent", c.image_extent, "image");
  }
  if (j.contains("domain")) {
    const auto& d = j.at("domain");
    detail::check_keys(d, {"lower", "upper"}, "domain");
    Domain dom;
    read(d, "lower", dom.lower, "domain");
    read(d, "upper", dom.upper, "domain");
    c.domain = dom;
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"train", "test", "validation_fraction", "threads"}, "data");
    read(d, "train", c.data.train, "data");
    read(d, "test", c.data.test, "data");
    read(d, "validation_fraction", c.data.validation_fraction, "data");
    read(d, "threads", c.data.threads, "data");
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    detail::check_keys(e, {"depth", "width", "channels"}, "encoder");
    read(e, "depth", c.encoder.depth, "encoder");
    read(e, "width", c.encoder.width, "encoder");
    read(e, "channels", c.encoder.channels, "encoder");
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::check_keys(o, {"lr", "beta1", "beta2", "epochs", "batch"}, "optimizer");
    read(o, "lr", c.optimizer.lr, "optimizer");
    read(o, "beta1", c.optimizer.beta1, "optimizer");
    read(o, "beta2", c.optimizer.beta2, "optimizer");
    read(o, "epochs", c.optimizer.epochs, "optimizer");
    read(o, "batch", c.optimizer.batch, "optimizer");
  }
  if (j.contains("models")) {
    const auto& ms = j.at("models");
    if (!ms.is_array()) throw ConfigError("config: 'models' must be an array");
    for (std::size_t i = 0; i < ms.size(); ++i) c.models.push_back(detail::read_model(ms[i], i));
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"grid_points", "box", "mass_points", "threads"}, "eval");
    read(e, "grid_points", c.eval.grid_points, "eval");
    read(e, "box", c.eval.box, "eval");
    read(e, "mass_points", c.eval.mass_points, "eval");
    read(e, "threads", c.eval.threads, "eval");
  }
  if (j.contains("report")) {
    const auto& r = j.at("report");
    detail::check_keys(r, {"heatmap_conditions", "heatmap_points"}, "report");
    read(r, "heatmap_conditions", c.report.heatmap_conditions, "report");
    read(r, "heatmap_points", c.report.heatmap_points, "report");
  }
  read(j, "record_wall_clock", c.record_wall_clock, top);
  read(j, "out", c.out, top);
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Everything that determines a model's parameter layout and data
/// semantics; its hash is stored in checkpoints.
inline Json architecture_json(const ExperimentConfig& c, const ModelSpec& m) {
  Json j;
  j["kind"] = to_string(c.kind);
  j["K"] = c.K;
  j["image_size"] = c.image_size;
  j["encoder"] = {{"depth", c.encoder.depth}, {"width", c.encoder.width}, {"channels", c.encoder.channels}};
  if (c.domain) j["domain"] = {{"lower", c.domain->lower}, {"upper", c.domain->upper}};
  j["model"] = {{"name", m.name},
                {"family", to_string(m.family)},
                {"modes", m.modes},
                {"background", m.background},
                {"bins", m.bins},
                {"decoder_channels", m.decoder_channels},
                {"decoder_stages", m.decoder_stages},
                {"depth", m.depth},
                {"hidden", m.hidden},
                {"spline_bins", m.spline_bins},
                {"tail_bound", m.tail_bound},
                {"scale_bound", m.scale_bound}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& c, const ModelSpec& m) {
  return io::fnv1a(architecture_json(c, m).dump());
}

}  // namespace dpdf
