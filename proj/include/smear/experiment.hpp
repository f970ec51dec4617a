#pragma once

// Experiment orchestration shared by the CLI and the acceptance suite:
// configuration, run directories, metrics/routing/cost/summary files.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "smear/cost_model.hpp"
#include "smear/training.hpp"

namespace smear {

/// A run directory exists and overwriting was not requested.
class RunExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DatasetMissingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  SyntheticConfig dataset;
  /// Load the dataset from this file instead of generating it (empty: generate).
  std::string dataset_path;
  std::size_t m = 8;
  std::size_t N = 6;
  std::size_t num_blocks = 2;
  std::uint64_t trunk_seed = 0;
  StrategyConfig strategy = SmearConfig{};
  TrainOptions optimizer;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  /// Per-strategy field overrides used when `compare` instantiates a strategy
  /// other than the configured one, e.g. {"tag": {"map": "modulo"}}.
  std::map<std::string, nlohmann::json> strategy_options;

  bool operator==(const ExperimentConfig& o) const;
};

/// Strict parse: unknown keys, wrong types and invalid values raise ConfigError.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

/// Strategy `name` with `strategy_options[name]` applied, validated for the config.
StrategyConfig resolve_strategy(const ExperimentConfig& config, std::string_view name);
nlohmann::json strategy_to_json(const StrategyConfig& strategy);

ModelConfig model_config(const ExperimentConfig& config);
/// Loads dataset_path when set, otherwise generates from the dataset section.
DatasetSplits obtain_dataset(const ExperimentConfig& config);

/// FNV-1a 64 of the serialized config.
std::uint64_t config_hash(const ExperimentConfig& config);
/// "<strategy>-seed<k>-<8 hex digits of the config hash>".
std::string run_directory_name(const ExperimentConfig& config, std::uint64_t seed);

struct RunArtifacts {
  std::string strategy;
  std::uint64_t seed = 0;
  std::filesystem::path directory;
  double test_accuracy = 0.0;
};

/// Trains every seed of the configured strategy. Each run directory receives
/// config.json, metrics.csv, routing.csv and checkpoint.txt.
std::vector<RunArtifacts> train_all(const ExperimentConfig& config, const DatasetSplits& data,
                                    const std::filesystem::path& out, bool force);

struct SummaryRow {
  std::string strategy;
  std::size_t seeds = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample standard deviation, 0 for one seed
};

/// Mean and sample standard deviation.
SummaryRow summarize(const std::string& strategy, const std::vector<double>& accuracies);

/// Trains each strategy over all seeds and writes <out>/summary.csv.
std::vector<SummaryRow> compare(const ExperimentConfig& config, const std::vector<std::string>& strategies,
                                const std::filesystem::path& out, bool force);

// ---- file formats ------------------------------------------------------------

/// step,split,domain,metric,value
std::string metrics_csv(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text, const std::string& source);

struct RoutingRow {
  std::size_t block = 0;
  int domain = 0;
  std::size_t expert = 0;
  double mean_prob = 0.0;
};

/// block,domain,expert,mean_prob
std::string routing_csv(const EvalResult& result);
std::vector<RoutingRow> parse_routing_csv(const std::string& text, const std::string& source);

/// Writes routing_block<b>.csv (domain,e0,...,e{N-1}) per block; returns the paths.
std::vector<std::filesystem::path> export_routing_matrices(const std::filesystem::path& routing_csv_path,
                                                           const std::filesystem::path& out);

/// strategy,num_seeds,mean_test_accuracy,std_test_accuracy
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_summary_csv(const std::string& text, const std::string& source);

/// One row per strategy valid for the config's dims.
std::vector<CostReport> cost_reports(const ExperimentConfig& config, int timing_repeats = 0);
/// strategy,L,N,d,m,analytic,measured,wall_clock_us
std::string cost_csv(const std::vector<CostReport>& reports);

// ---- gradient checks ---------------------------------------------------------

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double seconds = 0.0;
};

/// Full-model checks (d=8, m=4, N=3, L=2, B=2, two blocks) for SMEAR, Ensemble
/// and Latent Skills with its noise frozen, over every trainable tensor.
std::vector<GradCheckCase> model_grad_checks(std::uint64_t seed = 0);

}  // namespace smear
