// Command-line front end. Every subcommand exits nonzero on any failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smear/experiment.hpp"
#include "smear/io.hpp"

namespace fs = std::filesystem;
using namespace smear;

namespace {

constexpr double kGradTolerance = 1e-5;

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? parse_config("{}") : load_config(path);
}

fs::path out_dir(const std::string& flag, const ExperimentConfig& config) {
  return flag.empty() ? fs::path(config.output_dir) : fs::path(flag);
}

int cmd_generate(const ExperimentConfig& config, const fs::path& out, bool force) {
  const auto path = out / "dataset.txt";
  if (fs::exists(path) && !force) {
    throw RunExistsError(path.string() + " exists; pass --force to overwrite");
  }
  const DatasetSplits data = generate(config.dataset);
  save_dataset(data, path);
  std::printf("wrote %s (%zu train, %zu validation, %zu test)\n", path.string().c_str(),
              data.train.size(), data.validation.size(), data.test.size());
  return 0;
}

int cmd_train(const ExperimentConfig& config, const fs::path& out, bool force) {
  const DatasetSplits data = obtain_dataset(config);
  for (const auto& run : train_all(config, data, out, force)) {
    std::printf("%s seed %llu: test accuracy %.4f -> %s\n", run.strategy.c_str(),
                static_cast<unsigned long long>(run.seed), run.test_accuracy, run.directory.string().c_str());
  }
  return 0;
}

int cmd_eval(const ExperimentConfig& config, const std::string& checkpoint, const fs::path& out) {
  const DatasetSplits data = obtain_dataset(config);
  const ModelConfig mc = model_config(config);
  const ModelParams params = load_checkpoint(checkpoint, mc);
  const EvalResult val = evaluate(data.validation, mc, params);
  const EvalResult test = evaluate(data.test, mc, params);
  auto records = eval_metrics(val, 0, "validation");
  for (const auto& r : eval_metrics(test, 0, "test")) records.push_back(r);
  write_file(out / "eval_metrics.csv", metrics_csv(records));
  write_file(out / "eval_routing.csv", routing_csv(test));
  std::printf("validation accuracy %.4f, test accuracy %.4f\n", val.accuracy, test.accuracy);
  return 0;
}

int cmd_flops(const ExperimentConfig& config, const fs::path& out) {
  const auto reports = cost_reports(config, 20);
  const std::string csv = cost_csv(reports);
  write_file(out / "cost.csv", csv);
  std::fputs(csv.c_str(), stdout);
  for (const auto& r : reports) {
    if (r.analytic_flops != r.measured_flops) {
      std::fprintf(stderr, "%s: measured FLOPs differ from the analytic count\n", r.strategy.c_str());
      return 1;
    }
  }
  return 0;
}

int cmd_gradcheck() {
  int status = 0;
  for (const auto& c : model_grad_checks()) {
    const bool ok = c.max_rel_error <= kGradTolerance;
    std::printf("%-14s max rel err %.3e  (%.2fs)  %s\n", c.name.c_str(), c.max_rel_error, c.seconds,
                ok ? "ok" : "FAILED");
    if (!ok) status = 1;
  }
  return status;
}

int cmd_compare(const ExperimentConfig& config, const std::string& list, const fs::path& out, bool force) {
  std::vector<std::string> names;
  for (const auto& n : split(list, ',')) {
    if (!n.empty()) names.push_back(n);
  }
  const auto rows = compare(config, names, out, force);
  std::fputs(summary_csv(rows).c_str(), stdout);
  return 0;
}

int cmd_export(const std::string& routing, const fs::path& out) {
  for (const auto& p : export_routing_matrices(routing, out)) std::printf("wrote %s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expert routing experiments: training, evaluation, FLOP accounting and gradient checks"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_flag;
  bool force = false;
  app.add_option("--out", out_flag, "Output directory (overrides output_dir in the config)");
  app.add_flag("--force", force, "Overwrite existing run directories and files");

  std::string config_path, checkpoint, strategies, routing;
  auto* gen = app.add_subcommand("generate-data", "Write the synthetic dataset file");
  gen->add_option("--config", config_path, "Experiment config (JSON)");
  auto* train = app.add_subcommand("train", "Train the configured strategy for every seed");
  train->add_option("--config", config_path, "Experiment config (JSON)")->required();
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--config", config_path, "Experiment config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  auto* flops = app.add_subcommand("flops", "Write the per-strategy FLOP report");
  flops->add_option("--config", config_path, "Experiment config (JSON)");
  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  auto* cmp = app.add_subcommand("compare", "Train several strategies and summarize test accuracy");
  cmp->add_option("--config", config_path, "Experiment config (JSON)")->required();
  cmp->add_option("--strategies", strategies, "Comma-separated strategy names")->required();
  auto* exp = app.add_subcommand("export-routing", "Write per-block domain x expert routing matrices");
  exp->add_option("--routing", routing, "routing.csv from a run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*grad) return cmd_gradcheck();
    if (*exp) return cmd_export(routing, out_flag.empty() ? fs::path(".") : fs::path(out_flag));
    const ExperimentConfig config = config_or_default(config_path);
    const fs::path out = out_dir(out_flag, config);
    if (*gen) return cmd_generate(config, out, force);
    if (*train) return cmd_train(config, out, force);
    if (*eval) return cmd_eval(config, checkpoint, out);
    if (*flops) return cmd_flops(config, out);
    if (*cmp) return cmd_compare(config, strategies, out, force);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
