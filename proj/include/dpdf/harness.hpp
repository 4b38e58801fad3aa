#pragma once

// Benchmark pipeline behind the CLI: generate datasets, train each model of
// an experiment, evaluate against the perfect reference and write the
// comparison table with density heatmaps.
//
// Files under the experiment's output directory:
//   train.dds, test.dds, validation.dds    datasets (DDS1)
//   <model>.dpdf                           checkpoint (DPDF1)
//   <model>.log.csv                        per-epoch training log
//   <model>.time                           training seconds (only when wall-clock is recorded)
//   results.csv                            one row per model plus the reference
//   report.md, report.csv                  comparison tables
//   heatmaps/<model>_c<i>.pgm (+ .bounds.txt)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dpdf/checkpoint.hpp"
#include "dpdf/config.hpp"
#include "dpdf/dataset.hpp"
#include "dpdf/disc.hpp"
#include "dpdf/evalkit.hpp"
#include "dpdf/flow.hpp"
#include "dpdf/gmm.hpp"

namespace dpdf {

inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kTestStream = 2;
inline constexpr std::uint64_t kValidationStream = 3;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  std::filesystem::path dir;

  std::string train() const { return (dir / "train.dds").string(); }
  std::string test() const { return (dir / "test.dds").string(); }
  std::string validation() const { return (dir / "validation.dds").string(); }
  std::string checkpoint(const std::string& m) const { return (dir / (m + ".dpdf")).string(); }
  std::string log(const std::string& m) const { return (dir / (m + ".log.csv")).string(); }
  std::string timing(const std::string& m) const { return (dir / (m + ".time")).string(); }
  std::string results() const { return (dir / "results.csv").string(); }
  std::filesystem::path heatmaps() const { return dir / "heatmaps"; }
};

inline RunPaths run_paths(const ExperimentConfig& c) { return {std::filesystem::path(c.out)}; }

// ---------------------------------------------------------------------------
// Construction

inline Simulator make_simulator(const ExperimentConfig& c) {
  SimulatorConfig s;
  s.kind = c.kind;
  s.K = c.K;
  if (c.kind == ConditionKind::Scalar)
    s.family = ConditionedFamily::random(c.K, c.family.modes, c.family.anchors, c.family.ranges, c.family.seed);
  s.ranges = c.ranges;
  s.image_size = c.image_size;
  s.image_extent = c.image_extent;
  s.domain = c.domain;
  return Simulator(std::move(s));
}

inline EncoderConfig encoder_config(const ExperimentConfig& c) {
  EncoderConfig e;
  e.width = c.encoder.width;
  e.depth = c.encoder.depth;
  e.channels = c.encoder.channels;
  switch (c.kind) {
    case ConditionKind::Scalar: e.input_dim = 1; break;
    case ConditionKind::Parameter: e.input_dim = parameter_condition_size(c.K); break;
    case ConditionKind::Image:
      e.kind = EncoderConfig::Kind::Conv;
      e.image_size = c.image_size;
      break;
  }
  return e;
}

inline std::uint64_t model_seed(const ExperimentConfig& c, const ModelSpec& m) {
  return c.seed * 0x9e3779b97f4a7c15ULL + io::fnv1a(m.name);
}

inline std::unique_ptr<DensityModel> build_model(const ExperimentConfig& c, const ModelSpec& m) {
  const std::uint64_t seed = model_seed(c, m);
  switch (m.family) {
    case ModelFamily::Gmm: {
      GmmConfig g;
      g.K = c.K;
      g.modes = m.modes;
      if (m.background) g.background = c.domain;
      g.encoder = encoder_config(c);
      return std::make_unique<GmmModel>(g, seed);
    }
    case ModelFamily::Disc: {
      DiscConfig d;
      d.binning = {c.domain->lower, c.domain->upper, m.bins};
      d.encoder = encoder_config(c);
      d.decoder_channels = m.decoder_channels;
      d.decoder_stages = m.decoder_stages;
      return std::make_unique<DiscModel>(d, seed);
    }
    case ModelFamily::Flow: {
      FlowConfig f;
      f.K = c.K;
      f.depth = m.depth;
      f.hidden = m.hidden;
      f.spline_bins = m.spline_bins;
      f.tail_bound = m.tail_bound;
      f.scale_bound = m.scale_bound;
      f.encoder = encoder_config(c);
      return std::make_unique<FlowModel>(f, seed);
    }
  }
  throw ContractViolation("unknown model family");
}

inline void check_dataset(const ExperimentConfig& c, const Dataset& ds, const std::string& what) {
  if (ds.kind != c.kind || ds.K != c.K)
    throw ContractViolation(what + ": dataset is " + to_string(ds.kind) + " K=" + std::to_string(ds.K) +
                            ", config expects " + to_string(c.kind) + " K=" + std::to_string(c.K));
}

// ---------------------------------------------------------------------------
// generate

struct GenerateSummary {
  std::size_t train = 0, test = 0, validation = 0;
};

inline GenerateSummary cmd_generate(const ExperimentConfig& c) {
  const RunPaths paths = run_paths(c);
  std::filesystem::create_directories(paths.dir);
  const Simulator sim = make_simulator(c);
  GenerateSummary s;
  s.train = c.data.train;
  s.test = c.data.test;
  s.validation = static_cast<std::size_t>(std::floor(c.data.validation_fraction * static_cast<double>(c.data.train)));
  write_dataset(paths.train(), sim.generate(s.train, c.seed, kTrainStream, c.data.threads));
  write_dataset(paths.test(), sim.generate(s.test, c.seed, kTestStream, c.data.threads));
  if (s.validation > 0) write_dataset(paths.validation(), sim.generate(s.validation, c.seed, kValidationStream, c.data.threads));
  else std::filesystem::remove(paths.validation());
  return s;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999;
  std::size_t epochs = 1, batch = 256;
  std::uint64_t seed = 1;
};

struct TrainSummary {
  std::vector<double> epoch_loss;        // mean training loss per epoch
  std::vector<double> validation_nll;    // per epoch, when a validation set is given
  double seconds = 0.0;
};

/// Minibatch Adam on the model's NLL. `save()` runs after each completed
/// epoch. A non-finite loss restores the parameters of the last completed
/// epoch (or the initial ones), calls `save()` and throws TrainingError.
inline TrainSummary train_model(DensityModel& model, const Dataset& train, const Dataset* validation,
                                const TrainOptions& opt, std::ostream* log,
                                const std::function<void()>& save = {}) {
  if (train.size() < 2) throw ContractViolation("train: need at least two records");
  const auto start = std::chrono::steady_clock::now();
  AdamState adam;
  adam.config.lr = opt.lr;
  adam.config.beta1 = opt.beta1;
  adam.config.beta2 = opt.beta2;
  TrainSummary summary;
  auto good = snapshot(model.parameters());
  std::vector<std::size_t> order(train.size());
  if (log) *log << "epoch,train_loss,validation_nll\n" << std::setprecision(10);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_stream(opt.seed, 0x7472616e, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t s = 0; s < order.size(); s += opt.batch, ++batch_index) {
      const std::size_t n = std::min(opt.batch, order.size() - s);
      if (n < 2) break;  // batch norm needs two samples
      std::span<const std::size_t> rows(order.data() + s, n);
      double value = 0.0;
      try {
        const Tensor loss = model.loss(train.condition_batch(rows), train.residual_batch(rows), true);
        value = loss.item();
        if (std::isfinite(value)) adam_step(model.parameters(), backward(loss, model.parameters().trainable()), adam);
      } catch (const NumericError&) {
        value = NAN;
      }
      if (!std::isfinite(value)) {
        restore(model.parameters(), good);
        if (save) save();
        throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batch_index + 1) + "; parameters restored to the end of epoch " +
                            std::to_string(epoch));
      }
      total += value * static_cast<double>(n);
      seen += n;
    }
    summary.epoch_loss.push_back(total / static_cast<double>(seen));
    double vnll = NAN;
    if (validation && validation->size() > 0) {
      vnll = nll_eval(model, *validation);
      summary.validation_nll.push_back(vnll);
    }
    if (log) {
      *log << epoch + 1 << ',' << summary.epoch_loss.back() << ',';
      if (std::isfinite(vnll)) *log << vnll;
      *log << '\n';
      log->flush();
    }
    good = snapshot(model.parameters());
    if (save) save();
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

inline TrainOptions train_options(const ExperimentConfig& c, const ModelSpec& m) {
  TrainOptions o;
  o.lr = m.lr.value_or(c.optimizer.lr);
  o.beta1 = c.optimizer.beta1;
  o.beta2 = c.optimizer.beta2;
  o.epochs = m.epochs.value_or(c.optimizer.epochs);
  o.batch = c.optimizer.batch;
  o.seed = model_seed(c, m) ^ 0x5eedULL;
  return o;
}

/// Models named in `only` (all when empty), in declared order.
inline std::vector<const ModelSpec*> select_models(const ExperimentConfig& c, const std::vector<std::string>& only) {
  std::vector<const ModelSpec*> out;
  for (const auto& name : only) (void)c.model(name);
  for (const auto& m : c.models)
    if (only.empty() || std::find(only.begin(), only.end(), m.name) != only.end()) out.push_back(&m);
  return out;
}

inline std::map<std::string, TrainSummary> cmd_train(const ExperimentConfig& c, const std::vector<std::string>& only = {},
                                                     std::ostream* progress = nullptr) {
  const RunPaths paths = run_paths(c);
  const Dataset train = read_dataset(paths.train());
  check_dataset(c, train, "train");
  std::optional<Dataset> validation;
  if (std::filesystem::exists(paths.validation())) {
    validation = read_dataset(paths.validation());
    check_dataset(c, *validation, "train");
  }
  std::map<std::string, TrainSummary> out;
  for (const ModelSpec* m : select_models(c, only)) {
    auto model = build_model(c, *m);
    const std::uint64_t hash = config_hash(c, *m);
    const std::string ckpt = paths.checkpoint(m->name);
    std::ofstream log(paths.log(m->name), std::ios::trunc);
    auto save = [&] { save_checkpoint(ckpt, model->parameters(), m->family, hash); };
    if (progress) *progress << "training " << m->name << " (" << model->parameters().parameter_count() << " parameters)\n";
    const TrainSummary s = train_model(*model, train, validation ? &*validation : nullptr, train_options(c, *m), &log, save);
    if (progress && !s.epoch_loss.empty())
      *progress << "  final train loss " << s.epoch_loss.back() << " after " << s.epoch_loss.size() << " epochs\n";
    if (c.record_wall_clock) {
      std::ofstream t(paths.timing(m->name), std::ios::trunc);
      t << std::setprecision(6) << s.seconds << '\n';
    } else {
      std::filesystem::remove(paths.timing(m->name));
    }
    out[m->name] = s;
  }
  return out;
}

inline std::unique_ptr<DensityModel> load_model(const ExperimentConfig& c, const ModelSpec& m) {
  auto model = build_model(c, m);
  load_checkpoint(run_paths(c).checkpoint(m.name), model->parameters(), m.family, config_hash(c, m));
  return model;
}

// ---------------------------------------------------------------------------
// eval

inline EvalGrid eval_grid(const ExperimentConfig& c, std::size_t points) {
  return c.domain ? EvalGrid::over(*c.domain, points) : EvalGrid::box(c.K, -c.eval.box, c.eval.box, points);
}

/// Rows for the selected models (declared order) followed by the reference.
inline std::vector<EvalReport> cmd_eval(const ExperimentConfig& c, const std::vector<std::string>& only = {},
                                        std::ostream* progress = nullptr) {
  const RunPaths paths = run_paths(c);
  const Dataset test = read_dataset(paths.test());
  check_dataset(c, test, "eval");
  const Simulator sim = make_simulator(c);
  const TruthOracle truth(sim, c.seed, kTestStream, c.eval.mass_points);
  const bool with_h = c.K <= 2;
  const EvalGrid grid = eval_grid(c, c.eval.grid_points);
  std::vector<std::size_t> rows(test.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});

  std::vector<EvalReport> out;
  for (const ModelSpec* m : select_models(c, only)) {
    const auto start = std::chrono::steady_clock::now();
    const auto model = load_model(c, *m);
    EvalReport r{m->name, c.name, c.K, nll_eval(*model, test), std::nullopt, c.seed, 0.0};
    if (with_h) r.hellinger = avg_hellinger(*model, truth, test, rows, grid, c.eval.threads).mean;
    if (c.record_wall_clock) {
      double train_s = 0.0;
      std::ifstream t(paths.timing(m->name));
      if (t) t >> train_s;
      r.wall_clock = train_s + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    if (progress) *progress << "  " << to_csv_row(r) << '\n';
    out.push_back(r);
  }
  EvalReport ref{"reference", c.name, c.K, nll_eval(truth, test), std::nullopt, c.seed, 0.0};
  if (with_h) ref.hellinger = avg_hellinger(truth, test, rows, grid, c.eval.threads).mean;
  out.push_back(ref);

  std::ofstream os(paths.results(), std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + paths.results() + "'");
  os << csv_header() << '\n';
  for (const auto& r : out) os << to_csv_row(r) << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// report

inline std::vector<EvalReport> read_results(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open results table '" + path + "'");
  std::vector<EvalReport> out;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line != csv_header()) throw ParseError("results: unexpected header in '" + path + "'");
      continue;
    }
    out.push_back(parse_csv_row(line));
  }
  return out;
}

inline std::string display_name(const std::string& model) {
  static const std::map<std::string, std::string> names{{"gaussian", "Parametric Gaussian"},
                                                        {"gmm", "Parametric GMM"},
                                                        {"disc", "Discretized"},
                                                        {"nf", "Generative NF"},
                                                        {"reference", "Perfect Reference"}};
  auto it = names.find(model);
  return it == names.end() ? model : it->second;
}

struct ReportTable {
  std::vector<std::string> models, experiments;  // row and column order
  std::map<std::pair<std::string, std::string>, EvalReport> cells;
};

/// Rows follow `model_order`, then any other models by first appearance,
/// with the reference last; columns follow first appearance.
inline ReportTable build_table(const std::vector<EvalReport>& rows, const std::vector<std::string>& model_order) {
  if (rows.empty()) throw ContractViolation("report: the results table is empty");
  ReportTable t;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& m : model_order)
    for (const auto& r : rows)
      if (r.model == m) add(t.models, m);
  for (const auto& r : rows)
    if (r.model != "reference") add(t.models, r.model);
  for (const auto& r : rows)
    if (r.model == "reference") add(t.models, r.model);
  for (const auto& r : rows) {
    add(t.experiments, r.experiment);
    t.cells[{r.model, r.experiment}] = r;
  }
  return t;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

inline std::string table_markdown(const ReportTable& t) {
  std::ostringstream os;
  os << "| Uncertainty Model |";
  for (const auto& e : t.experiments) os << ' ' << e << " NLL | " << e << " H̄ |";
  os << "\n|---|";
  for (std::size_t i = 0; i < t.experiments.size(); ++i) os << "---:|---:|";
  os << '\n';
  for (const auto& m : t.models) {
    os << "| " << display_name(m) << " |";
    for (const auto& e : t.experiments) {
      auto it = t.cells.find({m, e});
      if (it == t.cells.end()) {
        os << " n/a | n/a |";
        continue;
      }
      os << ' ' << format_number(it->second.nll) << " | "
         << (it->second.hellinger ? format_number(*it->second.hellinger) : std::string("n/a")) << " |";
    }
    os << '\n';
  }
  return os.str();
}

inline std::string table_csv(const ReportTable& t) {
  std::ostringstream os;
  os << std::setprecision(17) << "model";
  for (const auto& e : t.experiments) os << ',' << e << "_NLL," << e << "_H";
  os << '\n';
  for (const auto& m : t.models) {
    os << m;
    for (const auto& e : t.experiments) {
      auto it = t.cells.find({m, e});
      if (it == t.cells.end()) {
        os << ",n/a,n/a";
        continue;
      }
      os << ',' << it->second.nll << ',';
      if (it->second.hellinger) os << *it->second.hellinger;
      else os << "n/a";
    }
    os << '\n';
  }
  return os.str();
}

/// Predicted and true densities of the first test conditions as P5 images
/// over the evaluation box (K <= 2), each with an axes sidecar. Returns the
/// image paths.
inline std::vector<std::string> write_heatmaps(const ExperimentConfig& c, std::ostream* progress = nullptr) {
  std::vector<std::string> written;
  if (c.K > 2 || c.report.heatmap_conditions == 0) return written;
  const RunPaths paths = run_paths(c);
  const Dataset test = read_dataset(paths.test());
  check_dataset(c, test, "report");
  const Simulator sim = make_simulator(c);
  const TruthOracle truth(sim, c.seed, kTestStream, c.eval.mass_points);
  const EvalGrid grid = eval_grid(c, c.report.heatmap_points);
  const auto pts = grid.points();
  const BinningSpec axes{grid.lower, grid.upper, grid.counts};
  const std::size_t rows = grid.counts[0], cols = c.K == 2 ? grid.counts[1] : 1;
  std::filesystem::create_directories(paths.heatmaps());
  const std::size_t n = std::min(c.report.heatmap_conditions, test.size());

  auto emit = [&](const std::string& stem, const std::vector<double>& values) {
    const std::string base = (paths.heatmaps() / stem).string();
    write_pgm(base + ".pgm", values, rows, cols);
    write_bounds_sidecar(base + ".bounds.txt", axes, *std::max_element(values.begin(), values.end()));
    written.push_back(base + ".pgm");
  };
  for (std::size_t i = 0; i < n; ++i) emit("reference_c" + std::to_string(i), truth.grid_density(test, i, grid, pts));
  for (const auto& m : c.models) {
    if (!std::filesystem::exists(paths.checkpoint(m.name))) {
      if (progress) *progress << "  no checkpoint for " << m.name << ", skipping its heatmaps\n";
      continue;
    }
    const auto model = load_model(c, m);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor cond = test.condition_batch(std::span<const std::size_t>(&i, 1));
      auto v = model->log_density_points(cond, pts);
      for (auto& x : v) x = std::exp(x);
      emit(m.name + "_c" + std::to_string(i), v);
    }
  }
  return written;
}

struct ReportSummary {
  std::string markdown_path, csv_path;
  std::size_t rows = 0;
  std::vector<std::string> heatmaps;
};

/// Comparison table from one or more results files; heatmaps for the
/// configured experiment when its test set is present.
inline ReportSummary cmd_report(const ExperimentConfig& c, const std::vector<std::string>& results,
                                std::ostream* progress = nullptr) {
  const RunPaths paths = run_paths(c);
  std::vector<EvalReport> rows;
  for (const auto& p : results.empty() ? std::vector<std::string>{paths.results()} : results) {
    auto r = read_results(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::vector<std::string> order;
  for (const auto& m : c.models) order.push_back(m.name);
  const ReportTable table = build_table(rows, order);
  std::filesystem::create_directories(paths.dir);
  ReportSummary s;
  s.rows = table.models.size();
  s.markdown_path = (paths.dir / "report.md").string();
  s.csv_path = (paths.dir / "report.csv").string();
  {
    std::ofstream md(s.markdown_path, std::ios::trunc);
    md << "# Evaluation results\n\n" << table_markdown(table);
  }
  {
    std::ofstream csv(s.csv_path, std::ios::trunc);
    csv << table_csv(table);
  }
  if (std::filesystem::exists(paths.test())) s.heatmaps = write_heatmaps(c, progress);
  return s;
}

}  // namespace dpdf
