#pragma once

// Dataset generation for the three conditioning kinds and the DDS1 file
// format.
//
// DDS1 layout (all little-endian):
//   "DDS1"                      4 bytes
//   kind tag                    u32 (0 scalar, 1 parameter, 2 image)
//   K                           u32
//   condition rank r            u32, then r dims as u32
//   record count                u64
//   records                     count x (condition f64..., residual f64 x K)
// Records have fixed size, so record i starts at header_size + i * record_size.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dpdf/binary_io.hpp"
#include "dpdf/distlab.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/random.hpp"
#include "dpdf/tensor.hpp"

namespace dpdf {

enum class ConditionKind : std::uint32_t { Scalar = 0, Parameter = 1, Image = 2 };

inline std::string to_string(ConditionKind k) {
  switch (k) {
    case ConditionKind::Scalar: return "scalar";
    case ConditionKind::Parameter: return "parameter";
    case ConditionKind::Image: return "image";
  }
  return "unknown";
}

inline ConditionKind parse_condition_kind(const std::string& s) {
  if (s == "scalar") return ConditionKind::Scalar;
  if (s == "parameter") return ConditionKind::Parameter;
  if (s == "image") return ConditionKind::Image;
  throw ContractViolation("unknown experiment kind '" + s + "'");
}

/// Axis-aligned box (lower, upper] per dimension.
struct Domain {
  std::vector<double> lower, upper;

  bool contains(std::span<const double> eps) const {
    for (std::size_t k = 0; k < eps.size(); ++k)
      if (!(eps[k] > lower[k] && eps[k] <= upper[k])) return false;
    return true;
  }
  double volume() const {
    double v = 1.0;
    for (std::size_t k = 0; k < lower.size(); ++k) v *= upper[k] - lower[k];
    return v;
  }
};

struct Dataset {
  ConditionKind kind = ConditionKind::Scalar;
  std::size_t K = 1;
  Shape condition_shape;  // per record, without the batch dimension
  std::vector<double> conditions;
  std::vector<double> residuals;

  std::size_t size() const { return K == 0 ? 0 : residuals.size() / K; }
  std::size_t condition_size() const { return numel_of(condition_shape); }
  std::span<const double> condition(std::size_t i) const {
    return {conditions.data() + i * condition_size(), condition_size()};
  }
  std::span<const double> residual(std::size_t i) const { return {residuals.data() + i * K, K}; }

  /// Conditions of records [begin, end) as a batch tensor.
  Tensor condition_batch(std::span<const std::size_t> rows) const {
    Shape s{rows.size()};
    s.insert(s.end(), condition_shape.begin(), condition_shape.end());
    std::vector<double> v;
    v.reserve(rows.size() * condition_size());
    for (auto r : rows) v.insert(v.end(), condition(r).begin(), condition(r).end());
    return Tensor(std::move(s), std::move(v));
  }
  Tensor residual_batch(std::span<const std::size_t> rows) const {
    std::vector<double> v;
    v.reserve(rows.size() * K);
    for (auto r : rows) v.insert(v.end(), residual(r).begin(), residual(r).end());
    return Tensor({rows.size(), K}, std::move(v));
  }
};

// ---------------------------------------------------------------------------
// Parameter-vector and image conditions

/// [s (K), λ (K), p, rotation (K*K row-major), offset (K)].
inline std::vector<double> encode_parameter_condition(const MvSgedParams& m) {
  std::vector<double> v(m.s);
  v.insert(v.end(), m.lambda.begin(), m.lambda.end());
  v.push_back(m.p);
  v.insert(v.end(), m.rotation.begin(), m.rotation.end());
  v.insert(v.end(), m.offset.begin(), m.offset.end());
  return v;
}

inline std::size_t parameter_condition_size(std::size_t K) { return 3 * K + 1 + K * K; }

inline MvSgedParams decode_parameter_condition(std::size_t K, std::span<const double> v) {
  if (v.size() != parameter_condition_size(K)) throw ContractViolation("parameter condition: wrong length");
  MvSgedParams m;
  m.K = K;
  auto it = v.begin();
  m.s.assign(it, it + static_cast<std::ptrdiff_t>(K));
  it += static_cast<std::ptrdiff_t>(K);
  m.lambda.assign(it, it + static_cast<std::ptrdiff_t>(K));
  it += static_cast<std::ptrdiff_t>(K);
  m.p = *it++;
  m.rotation.assign(it, it + static_cast<std::ptrdiff_t>(K * K));
  it += static_cast<std::ptrdiff_t>(K * K);
  m.offset.assign(it, it + static_cast<std::ptrdiff_t>(K));
  return m;
}

/// Density on a size x size grid of cell centres over [-extent, extent]²,
/// scaled so the maximum pixel is 1. Row index follows ε₁, column ε₂.
inline std::vector<double> render_density_image(const MmSgedParams& prm, std::size_t size, double extent) {
  if (prm.K() != 2) throw ContractViolation("render_density_image: K must be 2");
  std::vector<double> img(size * size);
  const double cell = 2.0 * extent / static_cast<double>(size);
  double peak = 0.0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double eps[2] = {-extent + (static_cast<double>(i) + 0.5) * cell,
                             -extent + (static_cast<double>(j) + 0.5) * cell};
      img[i * size + j] = std::exp(mmsged_logpdf(eps, prm));
      peak = std::max(peak, img[i * size + j]);
    }
  if (peak > 0.0)
    for (auto& v : img) v /= peak;
  return img;
}

// ---------------------------------------------------------------------------
// Simulator

struct SimulatorConfig {
  ConditionKind kind = ConditionKind::Scalar;
  std::size_t K = 1;
  ConditionedFamily family;  // scalar kind only
  ParamRanges ranges{0.3, 1.5, -0.6, 0.6, 0.8, 3.0, -1.0, 1.0};  // parameter/image kinds
  std::size_t image_size = 32;
  double image_extent = 4.0;
  std::optional<Domain> domain;  // when set, residuals outside are redrawn
};

/// Draws (condition, residual) records and reproduces the true density of
/// any record. Record i of stream s uses make_stream(seed, s, i) only.
class Simulator {
 public:
  explicit Simulator(SimulatorConfig config) : cfg_(std::move(config)) {
    if (cfg_.K == 0) throw ContractViolation("simulator: K must be >= 1");
    if (cfg_.kind == ConditionKind::Scalar && cfg_.family.K() != cfg_.K)
      throw ContractViolation("simulator: scalar conditioning needs a family with matching K");
    if (cfg_.kind == ConditionKind::Image && cfg_.K != 2)
      throw ContractViolation("simulator: image conditioning is defined for K=2 only");
    if (cfg_.domain && (cfg_.domain->lower.size() != cfg_.K || cfg_.domain->upper.size() != cfg_.K))
      throw ContractViolation("simulator: domain dimension mismatch");
  }

  const SimulatorConfig& config() const { return cfg_; }

  Shape condition_shape() const {
    switch (cfg_.kind) {
      case ConditionKind::Scalar: return {1};
      case ConditionKind::Parameter: return {parameter_condition_size(cfg_.K)};
      case ConditionKind::Image: return {1, cfg_.image_size, cfg_.image_size};
    }
    return {};
  }

  struct Record {
    std::vector<double> condition;
    std::vector<double> residual;
    MmSgedParams truth;
  };

  Record draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) const {
    Rng rng = make_stream(seed, stream, index);
    Record r;
    switch (cfg_.kind) {
      case ConditionKind::Scalar: {
        double x = 0.0;
        do x = uniform(rng, -1.0, 1.0);
        while (x == -1.0);
        r.condition = {x};
        r.truth = cfg_.family.eval(x);
        break;
      }
      case ConditionKind::Parameter: {
        MvSgedParams m = random_mvsged(cfg_.K, cfg_.ranges, rng);
        r.condition = encode_parameter_condition(m);
        r.truth = {{1.0}, {std::move(m)}};
        break;
      }
      case ConditionKind::Image: {
        r.truth = {{1.0}, {random_mvsged(cfg_.K, cfg_.ranges, rng)}};
        r.condition = render_density_image(r.truth, cfg_.image_size, cfg_.image_extent);
        break;
      }
    }
    for (int attempt = 0;; ++attempt) {
      r.residual = mmsged_sample(r.truth, rng);
      if (!cfg_.domain || cfg_.domain->contains(r.residual)) break;
      if (attempt > 100000) throw DomainError("simulator: could not draw a residual inside the domain");
    }
    return r;
  }

  /// True density of record `index` with the given condition.
  MmSgedParams truth(std::span<const double> condition, std::uint64_t seed, std::uint64_t stream,
                     std::uint64_t index) const {
    switch (cfg_.kind) {
      case ConditionKind::Scalar: return cfg_.family.eval(condition[0]);
      case ConditionKind::Parameter: return {{1.0}, {decode_parameter_condition(cfg_.K, condition)}};
      case ConditionKind::Image: return draw(seed, stream, index).truth;
    }
    return {};
  }

  /// n records of one stream; `threads` workers fill disjoint index ranges.
  Dataset generate(std::size_t n, std::uint64_t seed, std::uint64_t stream, unsigned threads = 1) const {
    Dataset ds;
    ds.kind = cfg_.kind;
    ds.K = cfg_.K;
    ds.condition_shape = condition_shape();
    const std::size_t cs = ds.condition_size();
    ds.conditions.resize(n * cs);
    ds.residuals.resize(n * cfg_.K);
    auto work = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        Record r = draw(seed, stream, i);
        std::copy(r.condition.begin(), r.condition.end(), ds.conditions.begin() + static_cast<std::ptrdiff_t>(i * cs));
        std::copy(r.residual.begin(), r.residual.end(), ds.residuals.begin() + static_cast<std::ptrdiff_t>(i * cfg_.K));
      }
    };
    threads = std::max(1u, threads);
    if (threads == 1) {
      work(0, n);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, n * t / threads, n * (t + 1) / threads);
      for (auto& th : pool) th.join();
    }
    return ds;
  }

 private:
  SimulatorConfig cfg_;
};

// ---------------------------------------------------------------------------
// DDS1 files

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write("DDS1", 4);
  io::put_u32(os, static_cast<std::uint32_t>(ds.kind));
  io::put_u32(os, static_cast<std::uint32_t>(ds.K));
  io::put_u32(os, static_cast<std::uint32_t>(ds.condition_shape.size()));
  for (auto d : ds.condition_shape) io::put_u32(os, static_cast<std::uint32_t>(d));
  io::put_u64(os, ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.condition(i)) io::put_f64(os, v);
    for (double v : ds.residual(i)) io::put_f64(os, v);
  }
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

/// Random access to a DDS1 file.
class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path) : is_(path, std::ios::binary) {
    if (!is_) throw ParseError("cannot open dataset '" + path + "'");
    char magic[4];
    io::read_exact(is_, magic, 4, "DDS1 magic");
    if (std::string(magic, 4) != "DDS1") throw ParseError("'" + path + "' is not a DDS1 dataset");
    const std::uint32_t kind = io::get_u32(is_, "kind tag");
    if (kind > 2) throw ParseError("DDS1: unknown kind tag " + std::to_string(kind));
    header_.kind = static_cast<ConditionKind>(kind);
    header_.K = io::get_u32(is_, "K");
    const std::uint32_t rank = io::get_u32(is_, "condition rank");
    if (rank > 8) throw ParseError("DDS1: implausible condition rank");
    for (std::uint32_t i = 0; i < rank; ++i) header_.condition_shape.push_back(io::get_u32(is_, "condition dim"));
    count_ = io::get_u64(is_, "record count");
    data_offset_ = static_cast<std::uint64_t>(is_.tellg());
    record_doubles_ = header_.condition_size() + header_.K;
    is_.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(is_.tellg());
    if (file_size < data_offset_ + count_ * record_doubles_ * 8)
      throw ParseError("DDS1: file holds fewer records than its header declares");
  }

  ConditionKind kind() const { return header_.kind; }
  std::size_t K() const { return header_.K; }
  const Shape& condition_shape() const { return header_.condition_shape; }
  std::size_t size() const { return count_; }

  /// Condition then residual of record i.
  std::vector<double> record(std::size_t i) {
    if (i >= count_) throw ContractViolation("DDS1: record index out of range");
    is_.clear();
    is_.seekg(static_cast<std::streamoff>(data_offset_ + i * record_doubles_ * 8));
    std::vector<double> v(record_doubles_);
    for (auto& x : v) x = io::get_f64(is_, "record");
    return v;
  }

  Dataset read_all() {
    Dataset ds = header_;
    ds.conditions.reserve(count_ * ds.condition_size());
    ds.residuals.reserve(count_ * ds.K);
    is_.clear();
    is_.seekg(static_cast<std::streamoff>(data_offset_));
    for (std::size_t i = 0; i < count_; ++i) {
      for (std::size_t j = 0; j < ds.condition_size(); ++j) ds.conditions.push_back(io::get_f64(is_, "record"));
      for (std::size_t j = 0; j < ds.K; ++j) ds.residuals.push_back(io::get_f64(is_, "record"));
    }
    return ds;
  }

 private:
  std::ifstream is_;
  Dataset header_;
  std::uint64_t count_ = 0, data_offset_ = 0;
  std::size_t record_doubles_ = 0;
};

inline Dataset read_dataset(const std::string& path) { return DatasetReader(path).read_all(); }

}  // namespace dpdf
