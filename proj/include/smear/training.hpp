#pragma once

// Frozen random trunk -> stacked routing blocks -> mean pool -> linear head,
// trained with Adam on the synthetic benchmark.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "smear/strategies.hpp"
#include "smear/synthetic.hpp"

namespace smear {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t d = 32;
  std::size_t m = 8;
  std::size_t L = 4;
  std::size_t N = 6;
  std::size_t num_blocks = 2;
  std::size_t num_classes = 16;
  StrategyConfig strategy = SmearConfig{};
  std::uint64_t trunk_seed = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  Tensor trunk;  // d×d, frozen
  std::vector<BlockParams> blocks;
  Tensor head_w;  // d×C
  Tensor head_b;  // C

  std::vector<NamedTensor> trainable() const;
  /// Trainable tensors plus the trunk.
  std::vector<NamedTensor> all() const;
};

void validate_model_config(const ModelConfig& config);
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
/// Deep copy with identical values and requires_grad flags.
ModelParams clone_params(const ModelParams& params);

/// Independent generator for (seed, stream).
Rng make_rng(std::uint64_t seed, std::uint64_t stream);

struct Batch {
  Tensor x;  // B×L×d
  std::vector<std::int64_t> ids;
  std::vector<int> tags;
  std::vector<int> task_ids;
  std::vector<std::size_t> labels;
  std::size_t size() const { return labels.size(); }
};

Batch make_batch(const std::vector<Example>& examples, std::span<const std::size_t> indices,
                 std::size_t L, std::size_t d);

struct ForwardOptions {
  bool training = false;
  std::size_t step = 0;
  Rng* rng = nullptr;
  bool freeze_noise = false;
  Activation activation = Activation::swish;
};

struct ForwardResult {
  Tensor logits;                             // B×C
  std::map<std::string, Tensor> aux_losses;  // summed over blocks
  std::vector<Tensor> routing;               // per block, B×N
  std::vector<ReinforceTrace> reinforce;
};

ForwardResult model_forward(const Batch& batch, const ModelConfig& config,
                            const ModelParams& params, const ForwardOptions& options);

struct LossBreakdown {
  Tensor total;
  double task_loss = 0.0;
  std::map<std::string, double> aux;
};

/// Mean cross-entropy plus every auxiliary loss of the configured strategy.
LossBreakdown training_loss(const Batch& batch, const ModelConfig& config, const ModelParams& params,
                            const ForwardOptions& options);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::vector<double>> first, second;
};

OptimState make_optimizer(const std::vector<NamedTensor>& params, AdamOptions options = {});
/// Bias-corrected Adam step on every tensor using its accumulated gradient.
void adam_update(OptimState& state, const std::vector<NamedTensor>& params);

struct MetricsRecord {
  std::size_t step = 0;
  std::string split;
  std::string domain;  // domain tag or "all"
  std::string metric;  // loss | accuracy
  double value = 0.0;
  bool operator==(const MetricsRecord&) const = default;
};

/// One optimizer step; returns the pre-update training loss record.
MetricsRecord train_step(const Batch& batch, ModelParams& params, OptimState& optim,
                         const ModelConfig& config, Rng& rng);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::map<int, double> domain_accuracy;
  std::map<int, double> domain_loss;
  /// routing_mean[block][domain] = mean routing row over that domain.
  std::vector<std::map<int, std::vector<double>>> routing_mean;
};

/// Inference-mode evaluation: no dropout, sampling or noise.
EvalResult evaluate(const std::vector<Example>& examples, const ModelConfig& config,
                    const ModelParams& params);

struct TrainOptions {
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t steps = 3000;
  std::size_t log_every = 100;
};

struct RunResult {
  ModelParams params;
  std::vector<MetricsRecord> metrics;
  EvalResult validation, test;
};

RunResult train_run(const DatasetSplits& data, const ModelConfig& config,
                    const TrainOptions& options, std::uint64_t seed);

std::vector<MetricsRecord> eval_metrics(const EvalResult& r, std::size_t step, const std::string& split);

// ---- checkpoints -------------------------------------------------------------

/// Text layout, one tensor per record:
///   smear-checkpoint 1
///   tensor <block> <expert> <field> <rank> <dims...>
///   <row-major values as %a floats on one line>
/// Model-level tensors use block -1; block-level tensors that belong to no
/// expert use expert -1.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
/// Rebuilds parameters for `config` and fills them from the file. Any missing
/// tensor or shape disagreement raises ShapeError.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace smear
