#pragma once

// The eleven routing strategies behind one block contract:
// activations + routing context -> activations + auxiliary losses.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "smear/experts.hpp"

namespace smear {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RoutingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EntropySign { literal, exploration };

struct SmearConfig {
  double expert_dropout_p = 0.1;
  bool operator==(const SmearConfig&) const = default;
};
struct EnsembleConfig {
  bool operator==(const EnsembleConfig&) const = default;
};
struct Top1Config {
  double expert_dropout_p = 0.1;
  bool operator==(const Top1Config&) const = default;
};
struct STGumbelConfig {
  double tau0 = 10.0;
  double anneal_rate = 1e-4;
  double tau_min = 0.5;
  bool operator==(const STGumbelConfig&) const = default;
};
struct ReinforceConfig {
  double alpha = 1e-2;
  double beta = 5e-4;
  double gamma = 1e-2;
  std::size_t baseline_hidden = 16;
  EntropySign entropy_sign = EntropySign::exploration;
  bool operator==(const ReinforceConfig&) const = default;
};
struct DSelect1Config {
  double step_gamma = 1.0;
  double entropy_weight = 0.1;
  bool operator==(const DSelect1Config&) const = default;
};
struct HashConfig {
  std::uint64_t seed = 0;
  bool operator==(const HashConfig&) const = default;
};
struct TagConfig {
  std::map<int, std::size_t> map;
  bool operator==(const TagConfig&) const = default;
};
struct SingleExpertConfig {
  std::size_t width_multiplier = 1;
  bool operator==(const SingleExpertConfig&) const = default;
};
struct AdamixConfig {
  double consistency_weight = 0.1;
  bool operator==(const AdamixConfig&) const = default;
};
struct LatentSkillsConfig {
  std::size_t num_tasks = 1;
  double gate_temperature = 1.0;
  bool operator==(const LatentSkillsConfig&) const = default;
};

using StrategyConfig =
    std::variant<SmearConfig, EnsembleConfig, Top1Config, STGumbelConfig, ReinforceConfig,
                 DSelect1Config, HashConfig, TagConfig, SingleExpertConfig, AdamixConfig,
                 LatentSkillsConfig>;

/// Canonical lower-case strategy names, in variant order.
inline constexpr const char* kStrategyNames[] = {
    "smear", "ensemble", "top1", "st_gumbel", "reinforce", "dselect1",
    "hash",  "tag",      "single_expert", "adamix", "latent_skills"};

std::string strategy_name(const StrategyConfig& cfg);
/// Default-initialized config for a strategy name; throws ConfigError if unknown.
StrategyConfig default_strategy(std::string_view name);
/// Checks the strategy against the expert count; throws ConfigError.
void validate_strategy(const StrategyConfig& cfg, std::size_t num_experts);
/// Experts per block the strategy instantiates (1 for single_expert).
std::size_t experts_per_block(const StrategyConfig& cfg, std::size_t num_experts);
/// Hidden width of each expert.
std::size_t expert_width(const StrategyConfig& cfg, std::size_t m, std::size_t num_experts);
/// True for strategies whose total loss is the task loss alone.
bool has_aux_losses(const StrategyConfig& cfg);

// ---- strategy-specific parameters --------------------------------------------

/// REINFORCE value baseline: d -> hidden (swish) -> 1.
struct BaselineParams {
  Tensor w1, b1, w2, b2;
  std::vector<Tensor> tensors() const { return {w1, b1, w2, b2}; }
};

/// DSelect-1 selector weights, d×log2(N).
struct DSelectParams {
  Tensor w_sel;
};

/// Latent Skills task×expert gate logits.
struct SkillMatrix {
  Tensor logits;  // T×N
  double gate_temperature = 1.0;
};

/// Every trainable tensor of one routing block.
struct BlockParams {
  std::vector<ExpertParams> experts;
  std::optional<RouterParams> router;
  std::optional<BaselineParams> baseline;
  std::optional<DSelectParams> dselect;
  std::optional<SkillMatrix> skills;

  std::size_t num_experts() const { return experts.size(); }
};

BlockParams init_block(const StrategyConfig& cfg, std::size_t d, std::size_t m,
                       std::size_t num_experts, Rng& rng);

// ---- routing context and outputs ---------------------------------------------

struct RoutingContext {
  bool training = false;
  std::size_t step = 0;
  std::size_t block_index = 0;
  std::span<const std::int64_t> example_ids;
  std::span<const int> tags;
  std::span<const int> task_ids;
  Rng* rng = nullptr;
  FlopCounter* flops = nullptr;
  /// Zero Gumbel / logistic noise (used by gradient checks).
  bool freeze_noise = false;
  Activation activation = Activation::swish;
};

/// Ingredients of the REINFORCE loss that need the per-example reward, which
/// only exists after the full model has run.
struct ReinforceTrace {
  Tensor log_prob;  // B, log R(v)_i of the sampled expert
  Tensor entropy;   // B, H(R(v))
  Tensor baseline;  // B, b(v)
  ReinforceConfig config;
};

struct BlockOutput {
  Tensor activations;                        // B×L×d
  std::map<std::string, Tensor> aux_losses;  // scalars
  Tensor routing_record;                     // B×N probabilities actually used, constant
  std::optional<ReinforceTrace> reinforce;
};

// ---- primitive routing operations --------------------------------------------

/// Zeroes each expert with probability p and renormalizes the survivors. A row
/// whose experts are all dropped is returned unchanged. Identity at inference.
Tensor expert_dropout(const Tensor& dist, double p, Rng* rng, bool training);

/// Deterministic expert choice for an example id.
std::size_t hash_route(std::int64_t example_id, std::size_t num_experts, std::uint64_t seed);
std::size_t tag_route(int tag, const std::map<int, std::size_t>& map);

/// Lowest index among the maxima of each row.
std::vector<std::size_t> argmax_rows(const Tensor& probs);

/// Exponentially annealed temperature, floored at tau_min.
double gumbel_temperature(const STGumbelConfig& cfg, std::size_t step);

/// DSelect selector r(z): B×m_bits -> B×2^m_bits. Entry i multiplies z_j for
/// the set bits j of i (bit 0 pairs with z_1) and (1 - z_j) for the others.
Tensor dselect_selector(const Tensor& z);

/// Scalar REINFORCE losses for sampled-expert traces given per-example rewards.
/// Keys: "policy", "entropy", "value".
std::map<std::string, Tensor> reinforce_losses(const ReinforceTrace& trace,
                                               std::span<const double> rewards);

Tensor baseline_forward(const Tensor& v, const BaselineParams& bp);

// ---- strategy forwards -------------------------------------------------------

BlockOutput smear_forward(const Tensor& u, const RoutingDistribution& dist,
                          const std::vector<ExpertParams>& experts, const RoutingContext& ctx);
BlockOutput ensemble_forward(const Tensor& u, const RoutingDistribution& dist,
                             const std::vector<ExpertParams>& experts, const RoutingContext& ctx);
BlockOutput top1_forward(const Tensor& u, const RoutingDistribution& dist,
                         const std::vector<ExpertParams>& experts, const RoutingContext& ctx);
BlockOutput st_gumbel_forward(const Tensor& u, const RoutingDistribution& dist,
                              const std::vector<ExpertParams>& experts,
                              const STGumbelConfig& cfg, const RoutingContext& ctx);
BlockOutput reinforce_forward(const Tensor& u, const Tensor& v, const RoutingDistribution& dist,
                              const std::vector<ExpertParams>& experts, const BaselineParams& bp,
                              const ReinforceConfig& cfg, const RoutingContext& ctx);
BlockOutput dselect1_forward(const Tensor& u, const Tensor& v,
                             const std::vector<ExpertParams>& experts, const DSelectParams& params,
                             const DSelect1Config& cfg, const RoutingContext& ctx);
BlockOutput hash_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                         const HashConfig& cfg, const RoutingContext& ctx);
BlockOutput tag_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                        const TagConfig& cfg, const RoutingContext& ctx);
BlockOutput single_expert_forward(const Tensor& u, const ExpertParams& expert,
                                  const RoutingContext& ctx);
BlockOutput adamix_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                           const RoutingContext& ctx);
BlockOutput latent_skills_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                                  const SkillMatrix& skills, const RoutingContext& ctx);

/// Full routing block: computes the router input and distribution where the
/// strategy needs one, then dispatches.
BlockOutput route_block(const StrategyConfig& cfg, const BlockParams& params, const Tensor& u,
                        const RoutingContext& ctx);

}  // namespace smear
