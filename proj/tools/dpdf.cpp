// Command-line front end: dpdf generate|train|eval|report --config PATH.

#include <CLI11.hpp>

#include <iostream>

#include "dpdf/harness.hpp"

namespace {

dpdf::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed,
                            const std::optional<std::string>& out) {
  auto c = dpdf::load_config(path);
  if (seed) c.seed = *seed;
  if (out) c.out = *out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional density benchmark: generate data, train models, evaluate and report."};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> models, results;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "override the output directory");
  };
  auto* gen = app.add_subcommand("generate", "write train/test (and validation) datasets");
  auto* train = app.add_subcommand("train", "train the configured models");
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints and the perfect reference into results.csv");
  auto* report = app.add_subcommand("report", "comparison tables and density heatmaps");
  for (auto* s : {gen, train, eval, report}) common(s);
  for (auto* s : {train, eval}) s->add_option("--model", models, "restrict to these model names");
  report->add_option("--results", results, "results tables to combine (default: <out>/results.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto c = load(config_path, seed, out);
    if (*gen) {
      const auto s = dpdf::cmd_generate(c);
      std::cout << "wrote " << s.train << " train, " << s.test << " test, " << s.validation
                << " validation records to " << c.out << '\n';
    } else if (*train) {
      dpdf::cmd_train(c, models, &std::cout);
    } else if (*eval) {
      std::cout << dpdf::csv_header() << '\n';
      for (const auto& r : dpdf::cmd_eval(c, models)) std::cout << dpdf::to_csv_row(r) << '\n';
    } else if (*report) {
      const auto s = dpdf::cmd_report(c, results, &std::cout);
      std::cout << "wrote " << s.markdown_path << " (" << s.rows << " rows), " << s.csv_path << ", "
                << s.heatmaps.size() << " heatmaps\n";
    }
  } catch (const dpdf::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const dpdf::TrainingError& e) {
    std::cerr << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
