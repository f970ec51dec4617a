#include "smear/strategies.hpp"

#include <bit>
#include <cmath>

namespace smear {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform on the open interval (0, 1).
double open_uniform(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

Rng& need_rng(const RoutingContext& ctx, const char* who) {
  if (!ctx.rng) throw ContractError(std::string(who) + ": training mode needs an rng");
  return *ctx.rng;
}

Tensor one_hot(std::span<const std::size_t> index, std::size_t n) {
  std::vector<double> v(index.size() * n, 0.0);
  for (std::size_t b = 0; b < index.size(); ++b) v[b * n + index[b]] = 1.0;
  return Tensor::from({index.size(), n}, std::move(v));
}

Tensor per_example_scale(const Tensor& s) { return reshape(s, {s.numel(), 1, 1}); }

Tensor discrete_output(const Tensor& u, std::span<const std::size_t> choice,
                       const std::vector<ExpertParams>& experts, const RoutingContext& ctx) {
  return expert_forward(u, select_params(choice, experts), ctx.flops, ctx.activation);
}

// Σ_i weights[:, i] · f_i(u), computing every expert.
Tensor weighted_expert_sum(const Tensor& u, const Tensor& weights,
                           const std::vector<ExpertParams>& experts, const RoutingContext& ctx) {
  Tensor acc;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    Tensor term = per_example_scale(select_last(weights, i)) *
                  expert_forward(u, experts[i], ctx.flops, ctx.activation);
    acc = acc.defined() ? acc + term : term;
  }
  return acc;
}

void check_batch(std::size_t got, std::size_t B, const char* what) {
  if (got != B) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(B) + " entries, got " +
                      std::to_string(got));
  }
}

}  // namespace

// ---- config helpers ----------------------------------------------------------

std::string strategy_name(const StrategyConfig& cfg) { return kStrategyNames[cfg.index()]; }

StrategyConfig default_strategy(std::string_view name) {
  if (name == "smear") return SmearConfig{};
  if (name == "ensemble") return EnsembleConfig{};
  if (name == "top1") return Top1Config{};
  if (name == "st_gumbel") return STGumbelConfig{};
  if (name == "reinforce") return ReinforceConfig{};
  if (name == "dselect1") return DSelect1Config{};
  if (name == "hash") return HashConfig{};
  if (name == "tag") return TagConfig{};
  if (name == "single_expert") return SingleExpertConfig{};
  if (name == "adamix") return AdamixConfig{};
  if (name == "latent_skills") return LatentSkillsConfig{};
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

void validate_strategy(const StrategyConfig& cfg, std::size_t num_experts) {
  if (num_experts < 1) throw ConfigError("number of experts must be at least 1");
  auto check_prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p < 1.0)) {
      throw ConfigError(std::string(name) + " must lie in [0, 1), got " + std::to_string(p));
    }
  };
  std::visit(Overloaded{
                 [&](const SmearConfig& c) { check_prob(c.expert_dropout_p, "expert_dropout_p"); },
                 [&](const Top1Config& c) { check_prob(c.expert_dropout_p, "expert_dropout_p"); },
                 [](const EnsembleConfig&) {},
                 [](const STGumbelConfig& c) {
                   if (!(c.tau0 > 0.0) || !(c.tau_min > 0.0)) {
                     throw ConfigError("st_gumbel: temperatures must be positive");
                   }
                   if (c.anneal_rate < 0.0) throw ConfigError("st_gumbel: anneal_rate must be >= 0");
                 },
                 [](const ReinforceConfig& c) {
                   if (c.alpha < 0.0 || c.beta < 0.0 || c.gamma < 0.0) {
                     throw ConfigError("reinforce: alpha, beta and gamma must be non-negative");
                   }
                   if (c.baseline_hidden < 1) throw ConfigError("reinforce: baseline_hidden must be >= 1");
                 },
                 [&](const DSelect1Config& c) {
                   if (num_experts < 2 || !std::has_single_bit(num_experts)) {
                     throw ConfigError("dselect1 requires the number of experts to be a power of two "
                                       "(>= 2), got N=" +
                                       std::to_string(num_experts));
                   }
                   if (!(c.step_gamma > 0.0)) throw ConfigError("dselect1: step_gamma must be positive");
                   if (c.entropy_weight < 0.0) throw ConfigError("dselect1: entropy_weight must be >= 0");
                 },
                 [](const HashConfig&) {},
                 [&](const TagConfig& c) {
                   if (c.map.empty()) throw ConfigError("tag: routing requires a non-empty tag map");
                   for (const auto& [tag, e] : c.map) {
                     if (e >= num_experts) {
                       throw ConfigError("tag: tag " + std::to_string(tag) + " maps to expert " +
                                         std::to_string(e) + " but N=" + std::to_string(num_experts));
                     }
                   }
                 },
                 [&](const SingleExpertConfig& c) {
                   if (c.width_multiplier != 1 && c.width_multiplier != num_experts) {
                     throw ConfigError("single_expert: width_multiplier must be 1 or N=" +
                                       std::to_string(num_experts));
                   }
                 },
                 [](const AdamixConfig& c) {
                   if (c.consistency_weight < 0.0) throw ConfigError("adamix: consistency_weight must be >= 0");
                 },
                 [](const LatentSkillsConfig& c) {
                   if (c.num_tasks < 1) throw ConfigError("latent_skills: num_tasks must be >= 1");
                   if (!(c.gate_temperature > 0.0)) {
                     throw ConfigError("latent_skills: gate_temperature must be positive");
                   }
                 },
             },
             cfg);
}

std::size_t experts_per_block(const StrategyConfig& cfg, std::size_t num_experts) {
  return std::holds_alternative<SingleExpertConfig>(cfg) ? 1 : num_experts;
}

std::size_t expert_width(const StrategyConfig& cfg, std::size_t m, std::size_t) {
  if (const auto* s = std::get_if<SingleExpertConfig>(&cfg)) return m * s->width_multiplier;
  return m;
}

bool has_aux_losses(const StrategyConfig& cfg) {
  return std::holds_alternative<ReinforceConfig>(cfg) ||
         std::holds_alternative<DSelect1Config>(cfg) || std::holds_alternative<AdamixConfig>(cfg);
}

BlockParams init_block(const StrategyConfig& cfg, std::size_t d, std::size_t m,
                       std::size_t num_experts, Rng& rng) {
  validate_strategy(cfg, num_experts);
  BlockParams bp;
  const std::size_t n = experts_per_block(cfg, num_experts);
  const std::size_t width = expert_width(cfg, m, num_experts);
  for (std::size_t i = 0; i < n; ++i) bp.experts.push_back(init_expert(d, width, rng));
  const bool learned_router =
      std::holds_alternative<SmearConfig>(cfg) || std::holds_alternative<EnsembleConfig>(cfg) ||
      std::holds_alternative<Top1Config>(cfg) || std::holds_alternative<STGumbelConfig>(cfg) ||
      std::holds_alternative<ReinforceConfig>(cfg);
  if (learned_router) bp.router = init_router(d, num_experts, rng);
  if (const auto* r = std::get_if<ReinforceConfig>(&cfg)) {
    const std::size_t h = r->baseline_hidden;
    bp.baseline = BaselineParams{normal_tensor({d, h}, 1.0 / static_cast<double>(d), rng, true),
                                 Tensor::zeros({h}, true),
                                 normal_tensor({h, 1}, 1.0 / static_cast<double>(h), rng, true),
                                 Tensor::zeros({1}, true)};
  }
  if (std::holds_alternative<DSelect1Config>(cfg)) {
    const auto bits = static_cast<std::size_t>(std::countr_zero(num_experts));
    bp.dselect = DSelectParams{normal_tensor({d, bits}, 1.0 / static_cast<double>(d), rng, true)};
  }
  if (const auto* s = std::get_if<LatentSkillsConfig>(&cfg)) {
    bp.skills = SkillMatrix{normal_tensor({s->num_tasks, num_experts}, 1e-2, rng, true),
                            s->gate_temperature};
  }
  return bp;
}

// ---- primitives --------------------------------------------------------------

Tensor expert_dropout(const Tensor& dist, double p, Rng* rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("expert dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return dist;
  if (!rng) throw ContractError("expert_dropout: training mode needs an rng");
  const std::size_t B = dist.dim(0), N = dist.dim(1);
  std::vector<double> mask(B * N), renorm(B, 1.0), keep_as_is(B, 0.0);
  const auto probs = dist.data();
  for (std::size_t b = 0; b < B; ++b) {
    double kept_mass = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      mask[b * N + i] = open_uniform(*rng) < p ? 0.0 : 1.0;
      kept_mass += mask[b * N + i] * probs[b * N + i];
    }
    if (kept_mass <= 0.0) {
      // Nothing survived: the row passes through untouched (divisor exactly 1).
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * N), N, 1.0);
      renorm[b] = 0.0;
      keep_as_is[b] = 1.0;
    }
  }
  Tensor masked = dist * Tensor::from({B, N}, std::move(mask));
  const Tensor divisor = sum_axis(masked, 1, true) * Tensor::from({B, 1}, std::move(renorm)) +
                         Tensor::from({B, 1}, std::move(keep_as_is));
  return masked / divisor;
}

std::size_t hash_route(std::int64_t example_id, std::size_t num_experts, std::uint64_t seed) {
  if (num_experts == 0) throw ConfigError("hash_route: no experts");
  const std::uint64_t h = splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(example_id));
  return static_cast<std::size_t>(h % num_experts);
}

std::size_t tag_route(int tag, const std::map<int, std::size_t>& map) {
  auto it = map.find(tag);
  if (it == map.end()) throw RoutingError("tag routing: no expert assigned to tag " + std::to_string(tag));
  return it->second;
}

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  const std::size_t B = probs.dim(0), N = probs.dim(1);
  const auto p = probs.data();
  std::vector<std::size_t> out(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 1; i < N; ++i) {
      if (p[b * N + i] > p[b * N + out[b]]) out[b] = i;
    }
  }
  return out;
}

double gumbel_temperature(const STGumbelConfig& cfg, std::size_t step) {
  if (!(cfg.tau0 > 0.0) || !(cfg.tau_min > 0.0)) {
    throw ConfigError("st_gumbel: temperature must be positive");
  }
  return std::max(cfg.tau_min, cfg.tau0 * std::exp(-cfg.anneal_rate * static_cast<double>(step)));
}

Tensor dselect_selector(const Tensor& z) {
  if (z.rank() != 2) throw ShapeError("dselect_selector: expected B×m, got " + shape_str(z.shape()));
  const std::size_t B = z.dim(0), bits = z.dim(1);
  std::vector<Tensor> on, off;
  for (std::size_t j = 0; j < bits; ++j) {
    on.push_back(select_last(z, j));
    off.push_back(1.0 - on.back());
  }
  std::vector<Tensor> cols;
  const std::size_t n = std::size_t{1} << bits;
  for (std::size_t e = 0; e < n; ++e) {
    Tensor prod = (e & 1U) ? on[0] : off[0];
    for (std::size_t j = 1; j < bits; ++j) prod = prod * (((e >> j) & 1U) ? on[j] : off[j]);
    cols.push_back(reshape(prod, {B, 1}));
  }
  return concat(cols, 1);
}

Tensor baseline_forward(const Tensor& v, const BaselineParams& bp) {
  Tensor h = swish(matmul(v, bp.w1) + reshape(bp.b1, {1, bp.b1.numel()}));
  Tensor out = matmul(h, bp.w2) + reshape(bp.b2, {1, 1});
  return reshape(out, {v.dim(0)});
}

std::map<std::string, Tensor> reinforce_losses(const ReinforceTrace& trace,
                                               std::span<const double> rewards) {
  const auto& c = trace.config;
  if (c.alpha < 0.0 || c.beta < 0.0 || c.gamma < 0.0) {
    throw ConfigError("reinforce: alpha, beta and gamma must be non-negative");
  }
  const std::size_t B = trace.log_prob.numel();
  check_batch(rewards.size(), B, "reinforce rewards");
  Tensor r = Tensor::from({B}, std::vector<double>(rewards.begin(), rewards.end()));
  Tensor advantage = r - stop_gradient(trace.baseline);  // constant
  std::map<std::string, Tensor> out;
  out["policy"] = c.alpha * mean(-(trace.log_prob * advantage));
  // H = -R·log R. The printed loss carries -β R·log R = +βH; exploration mode flips it.
  const double sign = c.entropy_sign == EntropySign::literal ? 1.0 : -1.0;
  out["entropy"] = (sign * c.beta) * mean(trace.entropy);
  out["value"] = c.gamma * mean(huber(trace.baseline, r));
  return out;
}

// ---- strategies --------------------------------------------------------------

BlockOutput smear_forward(const Tensor& u, const RoutingDistribution& dist,
                          const std::vector<ExpertParams>& experts, const RoutingContext& ctx) {
  StackedExpert merged = merge_params_batched(dist.probs, experts, ctx.flops);
  return {expert_forward(u, merged, ctx.flops, ctx.activation), {}, dist.probs.detach(), {}};
}

BlockOutput ensemble_forward(const Tensor& u, const RoutingDistribution& dist,
                             const std::vector<ExpertParams>& experts, const RoutingContext& ctx) {
  return {weighted_expert_sum(u, dist.probs, experts, ctx), {}, dist.probs.detach(), {}};
}

BlockOutput top1_forward(const Tensor& u, const RoutingDistribution& dist,
                         const std::vector<ExpertParams>& experts, const RoutingContext& ctx) {
  const auto choice = argmax_rows(dist.probs);
  Tensor scale = per_example_scale(pick_per_row(dist.probs, choice));
  return {discrete_output(u, choice, experts, ctx) * scale, {}, dist.probs.detach(), {}};
}

BlockOutput st_gumbel_forward(const Tensor& u, const RoutingDistribution& dist,
                              const std::vector<ExpertParams>& experts,
                              const STGumbelConfig& cfg, const RoutingContext& ctx) {
  const double tau = gumbel_temperature(cfg, ctx.step);
  if (!ctx.training) {
    const auto choice = argmax_rows(dist.probs);
    return {discrete_output(u, choice, experts, ctx), {}, dist.probs.detach(), {}};
  }
  const std::size_t B = dist.probs.dim(0), N = dist.probs.dim(1);
  std::vector<double> g(B * N, 0.0);
  if (!ctx.freeze_noise) {
    Rng& rng = need_rng(ctx, "st_gumbel_forward");
    for (auto& x : g) x = -std::log(-std::log(open_uniform(rng)));
  }
  Tensor perturbed =
      softmax_last_axis((log(dist.probs) + Tensor::from({B, N}, std::move(g))) * (1.0 / tau));
  const auto choice = argmax_rows(perturbed);
  Tensor picked = pick_per_row(perturbed, choice);
  // (p - sg[p]) + 1 is exactly 1 in value and carries dp in the backward pass.
  Tensor multiplier = (picked - stop_gradient(picked)) + 1.0;
  return {discrete_output(u, choice, experts, ctx) * per_example_scale(multiplier), {},
          dist.probs.detach(), {}};
}

BlockOutput reinforce_forward(const Tensor& u, const Tensor& v, const RoutingDistribution& dist,
                              const std::vector<ExpertParams>& experts, const BaselineParams& bp,
                              const ReinforceConfig& cfg, const RoutingContext& ctx) {
  if (cfg.alpha < 0.0 || cfg.beta < 0.0 || cfg.gamma < 0.0) {
    throw ConfigError("reinforce: alpha, beta and gamma must be non-negative");
  }
  if (!ctx.training) {
    const auto choice = argmax_rows(dist.probs);
    return {discrete_output(u, choice, experts, ctx), {}, dist.probs.detach(), {}};
  }
  Rng& rng = need_rng(ctx, "reinforce_forward");
  const std::size_t B = dist.probs.dim(0), N = dist.probs.dim(1);
  const auto p = dist.probs.data();
  std::vector<std::size_t> choice(B, N - 1);
  for (std::size_t b = 0; b < B; ++b) {
    const double x = open_uniform(rng);
    double cum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      cum += p[b * N + i];
      if (x < cum) {
        choice[b] = i;
        break;
      }
    }
  }
  ReinforceTrace trace{log(pick_per_row(dist.probs, choice)), entropy_last_axis(dist.probs),
                       baseline_forward(stop_gradient(v), bp), cfg};
  return {discrete_output(u, choice, experts, ctx), {}, dist.probs.detach(), std::move(trace)};
}

BlockOutput dselect1_forward(const Tensor& u, const Tensor& v,
                             const std::vector<ExpertParams>& experts, const DSelectParams& params,
                             const DSelect1Config& cfg, const RoutingContext& ctx) {
  validate_strategy(cfg, experts.size());
  Tensor z = smooth_step(matmul(v, params.w_sel), cfg.step_gamma);
  Tensor r = dselect_selector(z);
  if (r.dim(1) != experts.size()) {
    throw ShapeError("dselect1: selector covers " + std::to_string(r.dim(1)) + " experts, block has " +
                     std::to_string(experts.size()));
  }
  if (!ctx.training) {
    const auto choice = argmax_rows(r);
    return {discrete_output(u, choice, experts, ctx), {}, r.detach(), {}};
  }
  BlockOutput out{weighted_expert_sum(u, r, experts, ctx), {}, r.detach(), {}};
  out.aux_losses["selector_entropy"] = cfg.entropy_weight * mean(entropy_last_axis(r));
  return out;
}

BlockOutput hash_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                         const HashConfig& cfg, const RoutingContext& ctx) {
  const std::size_t B = u.dim(0), N = experts.size();
  check_batch(ctx.example_ids.size(), B, "hash routing example ids");
  // Each block draws its own assignment.
  const std::uint64_t seed = cfg.seed + 0x9e3779b97f4a7c15ULL * ctx.block_index;
  std::vector<std::size_t> choice(B);
  for (std::size_t b = 0; b < B; ++b) choice[b] = hash_route(ctx.example_ids[b], N, seed);
  return {discrete_output(u, choice, experts, ctx), {}, one_hot(choice, N), {}};
}

BlockOutput tag_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                        const TagConfig& cfg, const RoutingContext& ctx) {
  const std::size_t B = u.dim(0);
  if (ctx.tags.empty()) throw ConfigError("tag routing needs per-example tags");
  check_batch(ctx.tags.size(), B, "tag routing tags");
  std::vector<std::size_t> choice(B);
  for (std::size_t b = 0; b < B; ++b) choice[b] = tag_route(ctx.tags[b], cfg.map);
  return {discrete_output(u, choice, experts, ctx), {}, one_hot(choice, experts.size()), {}};
}

BlockOutput single_expert_forward(const Tensor& u, const ExpertParams& expert,
                                  const RoutingContext& ctx) {
  return {expert_forward(u, expert, ctx.flops, ctx.activation), {}, Tensor::full({u.dim(0), 1}, 1.0),
          {}};
}

BlockOutput adamix_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                           const RoutingContext& ctx) {
  const std::size_t B = u.dim(0), N = experts.size();
  if (ctx.training) {
    Rng& rng = need_rng(ctx, "adamix_forward");
    std::uniform_int_distribution<std::size_t> pick(0, N - 1);
    std::vector<std::size_t> choice(B);
    for (auto& c : choice) c = pick(rng);
    return {discrete_output(u, choice, experts, ctx), {}, one_hot(choice, N), {}};
  }
  const Tensor uniform = Tensor::full({N}, 1.0 / static_cast<double>(N));
  ExpertParams merged = merge_params(uniform, experts);
  if (ctx.flops) {
    const std::uint64_t d = experts[0].d(), m = experts[0].m();
    ctx.flops->merge += N * 2 * d * m;
    ctx.flops->bias += N * 2 * (m + d);
  }
  return {expert_forward(u, merged, ctx.flops, ctx.activation), {},
          Tensor::full({B, N}, 1.0 / static_cast<double>(N)), {}};
}

BlockOutput latent_skills_forward(const Tensor& u, const std::vector<ExpertParams>& experts,
                                  const SkillMatrix& skills, const RoutingContext& ctx) {
  const std::size_t B = u.dim(0), N = experts.size();
  const std::size_t T = skills.logits.dim(0);
  if (skills.logits.dim(1) != N) {
    throw ShapeError("latent_skills: skill matrix " + shape_str(skills.logits.shape()) + " for " +
                     std::to_string(N) + " experts");
  }
  if (ctx.task_ids.empty()) throw ConfigError("latent_skills routing needs per-example task ids");
  check_batch(ctx.task_ids.size(), B, "latent_skills task ids");
  std::vector<std::size_t> rows(B);
  for (std::size_t b = 0; b < B; ++b) {
    const int t = ctx.task_ids[b];
    if (t < 0 || static_cast<std::size_t>(t) >= T) {
      throw RoutingError("latent_skills: task id " + std::to_string(t) + " outside [0, " +
                         std::to_string(T) + ")");
    }
    rows[b] = static_cast<std::size_t>(t);
  }
  Tensor logits = gather_rows(skills.logits, rows);
  Tensor weights;
  if (ctx.training) {
    std::vector<double> noise(B * N, 0.0);
    if (!ctx.freeze_noise) {
      // Difference of two Gumbels is logistic.
      Rng& rng = need_rng(ctx, "latent_skills_forward");
      for (auto& x : noise) {
        const double q = open_uniform(rng);
        x = std::log(q) - std::log1p(-q);
      }
    }
    Tensor gates = sigmoid((logits + Tensor::from({B, N}, std::move(noise))) *
                           (1.0 / skills.gate_temperature));
    weights = gates / (sum_axis(gates, 1, true) + 1e-12);
  } else {
    std::vector<double> w(B * N, 0.0);
    const auto lg = logits.data();
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < N; ++i) on += lg[b * N + i] > 0.0 ? 1 : 0;
      for (std::size_t i = 0; i < N; ++i) {
        // No active skill falls back to the uniform average.
        w[b * N + i] = on == 0 ? 1.0 / static_cast<double>(N)
                               : (lg[b * N + i] > 0.0 ? 1.0 / static_cast<double>(on) : 0.0);
      }
    }
    weights = Tensor::from({B, N}, std::move(w));
  }
  StackedExpert merged = merge_params_batched(weights, experts, ctx.flops);
  return {expert_forward(u, merged, ctx.flops, ctx.activation), {}, weights.detach(), {}};
}

BlockOutput route_block(const StrategyConfig& cfg, const BlockParams& params, const Tensor& u,
                        const RoutingContext& ctx) {
  const auto& experts = params.experts;
  auto router_dist = [&](const Tensor& v) {
    if (!params.router) throw ContractError(strategy_name(cfg) + " block has no router");
    return router_forward(v, *params.router);
  };
  return std::visit(
      Overloaded{
          [&](const SmearConfig& c) {
            RoutingDistribution dist = router_dist(pool_router_input(u));
            dist.probs = expert_dropout(dist.probs, c.expert_dropout_p, ctx.rng, ctx.training);
            return smear_forward(u, dist, experts, ctx);
          },
          [&](const EnsembleConfig&) {
            return ensemble_forward(u, router_dist(pool_router_input(u)), experts, ctx);
          },
          [&](const Top1Config& c) {
            RoutingDistribution dist = router_dist(pool_router_input(u));
            dist.probs = expert_dropout(dist.probs, c.expert_dropout_p, ctx.rng, ctx.training);
            return top1_forward(u, dist, experts, ctx);
          },
          [&](const STGumbelConfig& c) {
            return st_gumbel_forward(u, router_dist(pool_router_input(u)), experts, c, ctx);
          },
          [&](const ReinforceConfig& c) {
            if (!params.baseline) throw ContractError("reinforce block has no baseline network");
            Tensor v = pool_router_input(u);
            return reinforce_forward(u, v, router_dist(v), experts, *params.baseline, c, ctx);
          },
          [&](const DSelect1Config& c) {
            if (!params.dselect) throw ContractError("dselect1 block has no selector weights");
            return dselect1_forward(u, pool_router_input(u), experts, *params.dselect, c, ctx);
          },
          [&](const HashConfig& c) { return hash_forward(u, experts, c, ctx); },
          [&](const TagConfig& c) { return tag_forward(u, experts, c, ctx); },
          [&](const SingleExpertConfig&) { return single_expert_forward(u, experts.at(0), ctx); },
          [&](const AdamixConfig&) { return adamix_forward(u, experts, ctx); },
          [&](const LatentSkillsConfig&) {
            if (!params.skills) throw ContractError("latent_skills block has no skill matrix");
            return latent_skills_forward(u, experts, *params.skills, ctx);
          },
      },
      cfg);
}

}  // namespace smear
