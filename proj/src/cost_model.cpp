#include "smear/cost_model.hpp"

#include <chrono>

namespace smear {

namespace {

void check_dims(const CostDims& c) {
  if (c.L == 0 || c.N == 0 || c.d == 0 || c.m == 0) {
    throw ConfigError("cost model dimensions must be positive");
  }
}

}  // namespace

std::uint64_t analytic_flops(const StrategyConfig& strategy, const CostDims& c, CostPhase phase) {
  check_dims(c);
  const std::uint64_t discrete = c.L * 4 * c.d * c.m;
  const std::uint64_t merged = (c.L * 4 + c.N * 2) * c.d * c.m;
  const std::uint64_t ensemble = c.N * c.L * 4 * c.d * c.m;
  const bool training = phase == CostPhase::training;
  if (std::holds_alternative<SmearConfig>(strategy)) return merged;
  if (std::holds_alternative<EnsembleConfig>(strategy)) return ensemble;
  // DSelect-1 evaluates every expert while training.
  if (std::holds_alternative<DSelect1Config>(strategy)) return training ? ensemble : discrete;
  if (const auto* s = std::get_if<SingleExpertConfig>(&strategy)) return discrete * s->width_multiplier;
  // Adamix routes randomly while training and merges uniformly at inference.
  if (std::holds_alternative<AdamixConfig>(strategy)) return training ? discrete : merged;
  if (std::holds_alternative<LatentSkillsConfig>(strategy)) return merged;
  return discrete;  // top1, st_gumbel, reinforce, hash, tag
}

std::uint64_t analytic_flops(std::string_view strategy, const CostDims& dims, CostPhase phase) {
  return analytic_flops(default_strategy(strategy), dims, phase);
}

std::uint64_t measured_flops(const FlopCounter& counter) { return counter.measured(); }

CostReport measure_block_cost(const StrategyConfig& strategy, const CostDims& c, CostPhase phase,
                              std::uint64_t seed, int timing_repeats) {
  check_dims(c);
  StrategyConfig cfg = strategy;
  if (auto* tag = std::get_if<TagConfig>(&cfg); tag && tag->map.empty()) tag->map[0] = 0;
  if (auto* ls = std::get_if<LatentSkillsConfig>(&cfg)) ls->num_tasks = std::max<std::size_t>(ls->num_tasks, 1);

  Rng rng(seed);
  BlockParams params = init_block(cfg, c.d, c.m, c.N, rng);
  Tensor u = normal_tensor({1, c.L, c.d}, 1.0, rng, false);
  const std::int64_t id = 0;
  const int tag = std::holds_alternative<TagConfig>(cfg) ? std::get<TagConfig>(cfg).map.begin()->first : 0;
  const int task = 0;

  FlopCounter counter;
  RoutingContext ctx;
  ctx.training = phase == CostPhase::training;
  ctx.rng = &rng;
  ctx.example_ids = {&id, 1};
  ctx.tags = {&tag, 1};
  ctx.task_ids = {&task, 1};
  ctx.flops = &counter;
  route_block(cfg, params, u, ctx);

  CostReport report;
  report.strategy = strategy_name(cfg);
  report.dims = c;
  report.analytic_flops = analytic_flops(cfg, c, phase);
  report.measured_flops = counter.measured();
  report.bias_flops = counter.bias;

  if (timing_repeats > 0) {
    ctx.flops = nullptr;
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < timing_repeats; ++i) route_block(cfg, params, u, ctx);
    const auto stop = std::chrono::steady_clock::now();
    report.wall_clock_us_per_example =
        std::chrono::duration<double, std::micro>(stop - start).count() / timing_repeats;
  }
  return report;
}

SpeedupRatio speedup_ratio(std::uint64_t L, std::uint64_t N) {
  if (L == 0 || N == 0) throw ConfigError("speedup_ratio: L and N must be positive");
  const double l = static_cast<double>(L), n = static_cast<double>(N);
  return {4.0 * n * l / (4.0 * l + 2.0 * n), n * l / (n + l)};
}

}  // namespace smear
