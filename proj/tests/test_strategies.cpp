#include <gtest/gtest.h>

#include <cmath>

#include "smear/strategies.hpp"
#include "test_util.hpp"

using namespace smear;
using namespace smear::testing;

namespace {

constexpr double kGradTol = 1e-5;

struct Fixture {
  std::size_t B = 3, L = 2, d = 4, m = 3, N = 4;
  Rng rng{42};
  Tensor u;
  std::vector<ExpertParams> experts;
  std::vector<std::int64_t> ids{0, 1, 2};
  std::vector<int> tags{0, 1, 0};

  Fixture() {
    u = uniform_tensor({B, L, d}, rng, -2, 2, false);
    experts = random_experts(N, d, m, rng);
  }

  RoutingContext ctx(bool training = false) {
    RoutingContext c;
    c.training = training;
    c.example_ids = ids;
    c.tags = tags;
    c.task_ids = tags;
    c.rng = &rng;
    return c;
  }

  // Output of expert e applied to example b alone.
  Tensor expert_row(std::size_t e, std::size_t b) const {
    const std::vector<std::size_t> row{b};
    const Tensor ub = reshape(gather_rows(reshape(u, {B, L * d}), row), {1, L, d});
    return expert_forward(ub, experts[e]);
  }

  Tensor row_of(const Tensor& out, std::size_t b) const {
    const std::vector<std::size_t> row{b};
    return reshape(gather_rows(reshape(out, {B, L * d}), row), {1, L, d});
  }
};

RoutingDistribution dist_from(std::size_t B, std::size_t N, std::vector<double> v, bool grad = false) {
  return {Tensor::from({B, N}, std::move(v), grad)};
}

// Single-affine experts: m = d, W_down = I, no nonlinearity, so f_i(u) = u + u·W_up,i + b_up,i.
std::vector<ExpertParams> affine_experts(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<ExpertParams> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> eye(d * d, 0.0);
    for (std::size_t k = 0; k < d; ++k) eye[k * d + k] = 1.0;
    out.push_back({Tensor::from({d, d}, eye), Tensor::zeros({d}), uniform_tensor({d, d}, rng, -1, 1, false),
                   uniform_tensor({d}, rng, -1, 1, false)});
  }
  return out;
}

}  // namespace

// ---- SMEAR and Ensemble --------------------------------------------------------

TEST(Smear, OneHotRowEqualsSelectedExpertUnscaled) {
  Fixture f;
  const auto dist = dist_from(3, 4, {0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0});
  const auto out = smear_forward(f.u, dist, f.experts, f.ctx());
  const std::size_t pick[] = {1, 3, 0};
  for (std::size_t b = 0; b < 3; ++b) EXPECT_LE(max_abs_diff(f.row_of(out.activations, b), f.expert_row(pick[b], b)), 1e-12);
  EXPECT_TRUE(out.aux_losses.empty());
}

TEST(Smear, LinearExpertsMatchEnsemble) {
  Rng rng(1);
  const std::size_t B = 5, L = 3, d = 4, N = 3;
  const auto experts = affine_experts(N, d, rng);
  const Tensor u = uniform_tensor({B, L, d}, rng, -2, 2, false);
  RoutingContext ctx;
  ctx.activation = Activation::identity;
  for (int trial = 0; trial < 20; ++trial) {
    RoutingDistribution dist{random_simplex(B, N, rng)};
    const auto s = smear_forward(u, dist, experts, ctx);
    const auto e = ensemble_forward(u, dist, experts, ctx);
    EXPECT_LE(max_abs_diff(s.activations, e.activations), 1e-10);
  }
}

TEST(Smear, EndToEndGradientReachesRouterWeights) {
  Fixture f;
  BlockParams bp = init_block(SmearConfig{0.0}, f.d, f.m, f.N, f.rng);
  bp.experts = f.experts;
  const Tensor w = uniform_tensor({f.B, f.L, f.d}, f.rng, -1, 1, false);
  auto loss = [&] { return sum(route_block(SmearConfig{0.0}, bp, f.u, f.ctx()).activations * w); };
  const auto r = grad_check_params(loss, {bp.router->w_route});
  EXPECT_LE(r.max_rel_error, kGradTol);
  EXPECT_TRUE(std::any_of(r.analytic.begin(), r.analytic.end(), [](double g) { return std::abs(g) > 1e-8; }));
}

TEST(Ensemble, OneHotAndWeightedSum) {
  Fixture f;
  const auto one_hot = dist_from(3, 4, {0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1});
  const auto out = ensemble_forward(f.u, one_hot, f.experts, f.ctx());
  const std::size_t pick[] = {2, 0, 3};
  for (std::size_t b = 0; b < 3; ++b) EXPECT_LE(max_abs_diff(f.row_of(out.activations, b), f.expert_row(pick[b], b)), 1e-15);

  const auto mix = dist_from(3, 4, {0.25, 0.75, 0, 0, 0.25, 0.75, 0, 0, 0.25, 0.75, 0, 0});
  const auto mixed = ensemble_forward(f.u, mix, f.experts, f.ctx());
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor want = 0.25 * f.expert_row(0, b) + 0.75 * f.expert_row(1, b);
    EXPECT_LE(max_abs_diff(f.row_of(mixed.activations, b), want), 1e-14);
  }
}

// ---- Top-1 ---------------------------------------------------------------------

TEST(Top1, ScalesSelectedExpertByItsProbability) {
  Fixture f;
  f.experts.resize(2);
  const auto dist = dist_from(3, 2, {0.7, 0.3, 0.5, 0.5, 0.2, 0.8});
  const auto out = top1_forward(f.u, dist, f.experts, f.ctx());
  EXPECT_LE(max_abs_diff(f.row_of(out.activations, 0), 0.7 * f.expert_row(0, 0)), 1e-15);
  EXPECT_LE(max_abs_diff(f.row_of(out.activations, 1), 0.5 * f.expert_row(0, 1)), 1e-15);  // tie -> 0
  EXPECT_LE(max_abs_diff(f.row_of(out.activations, 2), 0.8 * f.expert_row(1, 2)), 1e-15);
}

TEST(Top1, OneHotEqualsSmearOutput) {
  Fixture f;
  const auto dist = dist_from(3, 4, {0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0});
  const auto t = top1_forward(f.u, dist, f.experts, f.ctx());
  const auto s = smear_forward(f.u, dist, f.experts, f.ctx());
  EXPECT_LE(max_abs_diff(t.activations, s.activations), 1e-12);
}

TEST(Top1, RouterGradientFlowsOnlyThroughScale) {
  Fixture f;
  const Tensor logits = uniform_tensor({3, 4}, f.rng);
  const Tensor w = uniform_tensor({3, 2, 4}, f.rng, -1, 1, false);
  auto loss = [&](const Tensor& z) {
    return sum(top1_forward(f.u, {softmax_last_axis(z)}, f.experts, f.ctx()).activations * w);
  };
  EXPECT_LE(grad_check(loss, logits).max_rel_error, kGradTol);
}

// ---- ST-Gumbel -----------------------------------------------------------------

TEST(STGumbel, TemperatureSchedule) {
  const STGumbelConfig cfg{10.0, 1e-6, 0.5};
  EXPECT_DOUBLE_EQ(gumbel_temperature(cfg, 0), 10.0);
  EXPECT_NEAR(gumbel_temperature(cfg, 1000000), 10.0 * std::exp(-1.0), 1e-12);
  EXPECT_NEAR(gumbel_temperature(cfg, 1000000), 3.679, 1e-3);
  EXPECT_DOUBLE_EQ(gumbel_temperature(STGumbelConfig{10.0, 1.0, 0.5}, 100), 0.5);
  EXPECT_THROW(gumbel_temperature(STGumbelConfig{0.0, 1e-4, 0.5}, 0), ConfigError);
  EXPECT_THROW(gumbel_temperature(STGumbelConfig{10.0, 1e-4, -1.0}, 0), ConfigError);
}

TEST(STGumbel, ZeroNoiseUnitTemperatureSelectsArgmaxAndOutputIsUnscaled) {
  Fixture f;
  const auto dist = dist_from(3, 4, {0.1, 0.6, 0.2, 0.1, 0.4, 0.1, 0.1, 0.4, 0.05, 0.05, 0.8, 0.1});
  RoutingContext ctx = f.ctx(true);
  ctx.freeze_noise = true;
  const auto out = st_gumbel_forward(f.u, dist, f.experts, STGumbelConfig{1.0, 0.0, 0.5}, ctx);
  const std::size_t pick[] = {1, 0, 2};  // row 1 ties 0 and 3 -> lowest index
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(max_abs_diff(f.row_of(out.activations, b), f.expert_row(pick[b], b)), 0.0);
}

TEST(STGumbel, NoisyForwardAlwaysEqualsRawChosenExpert) {
  Fixture f;
  RoutingDistribution dist{random_simplex(3, 4, f.rng)};
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = st_gumbel_forward(f.u, dist, f.experts, STGumbelConfig{}, f.ctx(true));
    for (std::size_t b = 0; b < 3; ++b) {
      double best = 1e300;
      for (std::size_t e = 0; e < 4; ++e) best = std::min(best, max_abs_diff(f.row_of(out.activations, b), f.expert_row(e, b)));
      EXPECT_EQ(best, 0.0);
    }
  }
}

TEST(STGumbel, StraightThroughGradientReachesRouter) {
  Fixture f;
  const Tensor logits = uniform_tensor({3, 4}, f.rng);
  const Tensor w = uniform_tensor({3, 2, 4}, f.rng, -1, 1, false);
  RoutingContext ctx = f.ctx(true);
  ctx.freeze_noise = true;
  Tensor z = logits.clone_leaf(true);
  sum(st_gumbel_forward(f.u, {softmax_last_axis(z)}, f.experts, STGumbelConfig{1.0, 0.0, 0.5}, ctx).activations * w)
      .backward();
  const auto g = z.grad();
  EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double x) { return std::abs(x) > 1e-8; }));
}

TEST(STGumbel, InferenceUsesArgmaxWithoutNoise) {
  Fixture f;
  const auto dist = dist_from(3, 4, {0.1, 0.6, 0.2, 0.1, 0.1, 0.1, 0.1, 0.7, 0.3, 0.3, 0.3, 0.1});
  const auto a = st_gumbel_forward(f.u, dist, f.experts, STGumbelConfig{}, f.ctx(false));
  const std::size_t pick[] = {1, 3, 0};
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(max_abs_diff(f.row_of(a.activations, b), f.expert_row(pick[b], b)), 0.0);
}

// ---- REINFORCE -----------------------------------------------------------------

namespace {

ReinforceTrace hand_trace(double log_prob, double entropy, double baseline, ReinforceConfig cfg) {
  return {Tensor::from({1}, {log_prob}), Tensor::from({1}, {entropy}), Tensor::from({1}, {baseline}), cfg};
}

}  // namespace

TEST(Reinforce, PolicyTermHandValue) {
  ReinforceConfig cfg{1.0, 0.0, 0.0, 4, EntropySign::exploration};
  const std::vector<double> reward{2.0};
  const auto l = reinforce_losses(hand_trace(std::log(std::exp(-1.0)), 0.0, 0.0, cfg), reward);
  EXPECT_NEAR(l.at("policy").item(), 2.0, 1e-12);
  EXPECT_EQ(l.at("entropy").item(), 0.0);
  EXPECT_EQ(l.at("value").item(), 0.0);
}

TEST(Reinforce, EntropyTermSignModes) {
  const double beta = 5e-4;
  const Tensor uniform = Tensor::from({1, 2}, {0.5, 0.5});
  const double h = entropy_last_axis(uniform).item();
  EXPECT_NEAR(h, std::log(2.0), 1e-15);
  const std::vector<double> reward{0.0};
  auto cfg = ReinforceConfig{0.0, beta, 0.0, 4, EntropySign::exploration};
  EXPECT_NEAR(reinforce_losses(hand_trace(0, h, 0, cfg), reward).at("entropy").item(), -beta * std::log(2.0), 1e-12);
  cfg.entropy_sign = EntropySign::literal;
  EXPECT_NEAR(reinforce_losses(hand_trace(0, h, 0, cfg), reward).at("entropy").item(), beta * std::log(2.0), 1e-12);
}

TEST(Reinforce, ValueTermHuberQuadraticRegion) {
  const std::vector<double> reward{1.0};
  const auto l = reinforce_losses(hand_trace(0, 0, 0.0, ReinforceConfig{0.0, 0.0, 1.0, 4}), reward);
  EXPECT_NEAR(l.at("value").item(), 0.5, 1e-12);
}

TEST(Reinforce, NegativeWeightsRejected) {
  const std::vector<double> reward{1.0};
  EXPECT_THROW(reinforce_losses(hand_trace(0, 0, 0, ReinforceConfig{-1.0, 0, 0, 4}), reward), ConfigError);
  EXPECT_THROW(validate_strategy(ReinforceConfig{0, -1.0, 0, 4}, 4), ConfigError);
}

TEST(Reinforce, BaselineGradientOnlyFromValueTerm) {
  Fixture f;
  const ReinforceConfig cfg{1e-2, 5e-4, 1e-2, 5};
  BlockParams bp = init_block(cfg, f.d, f.m, f.N, f.rng);
  const auto out = route_block(cfg, bp, f.u, f.ctx(true));
  ASSERT_TRUE(out.reinforce.has_value());
  const std::vector<double> rewards{-1.2, -0.4, -2.0};
  const auto losses = reinforce_losses(*out.reinforce, rewards);
  auto grads_of = [&](const char* term) {
    for (auto t : bp.baseline->tensors()) t.zero_grad();
    bp.router->w_route.zero_grad();
    losses.at(term).backward();
    std::vector<double> all;
    for (const auto& t : bp.baseline->tensors()) {
      const auto g = t.grad();
      all.insert(all.end(), g.begin(), g.end());
    }
    return all;
  };
  for (double g : grads_of("policy")) EXPECT_EQ(g, 0.0);
  for (double g : grads_of("entropy")) EXPECT_EQ(g, 0.0);
  const auto value = grads_of("value");
  EXPECT_TRUE(std::any_of(value.begin(), value.end(), [](double g) { return g != 0.0; }));
}

TEST(Reinforce, PolicyGradientVanishesWhenAdvantageIsZero) {
  Fixture f;
  const ReinforceConfig cfg{1.0, 0.0, 0.0, 5};
  BlockParams bp = init_block(cfg, f.d, f.m, f.N, f.rng);
  const auto out = route_block(cfg, bp, f.u, f.ctx(true));
  const auto b = out.reinforce->baseline.data();
  const std::vector<double> rewards(b.begin(), b.end());  // r - b = 0
  reinforce_losses(*out.reinforce, rewards).at("policy").backward();
  for (double g : bp.router->w_route.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Reinforce, SampledIndicesFollowDistribution) {
  Fixture f;
  const std::size_t B = 4000;
  std::vector<double> probs;
  for (std::size_t b = 0; b < B; ++b) probs.insert(probs.end(), {0.1, 0.2, 0.3, 0.4});
  const RoutingDistribution dist{Tensor::from({B, 4}, probs)};
  const Tensor u = Tensor::zeros({B, 1, f.d});
  const BaselineParams bp{Tensor::zeros({f.d, 2}), Tensor::zeros({2}), Tensor::zeros({2, 1}), Tensor::zeros({1})};
  RoutingContext ctx = f.ctx(true);
  std::vector<std::int64_t> ids(B);
  ctx.example_ids = ids;
  const auto out = reinforce_forward(u, pool_router_input(u), dist, f.experts, bp, ReinforceConfig{}, ctx);
  std::vector<double> count(4, 0.0);
  for (double lp : out.reinforce->log_prob.data()) {
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(lp - std::log(0.1 * static_cast<double>(i + 1))) < 1e-12) count[i] += 1.0;
    }
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(count[i] / B, 0.1 * static_cast<double>(i + 1), 0.03);
}

// ---- DSelect-1 -----------------------------------------------------------------

TEST(DSelect, CornerCodesMapToOneHot) {
  const Tensor r = dselect_selector(Tensor::from({2, 3}, {1, 1, 1, 0, 0, 0}));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(r.at({0, i}), i == 7 ? 1.0 : 0.0);
    EXPECT_EQ(r.at({1, i}), i == 0 ? 1.0 : 0.0);
  }
  // Bit j of the expert index pairs with z_{j+1}: z = (1, 0, 1) selects index 0b101 = 5.
  const Tensor s = dselect_selector(Tensor::from({1, 3}, {1, 0, 1}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(s.at({0, i}), i == 5 ? 1.0 : 0.0);
}

TEST(DSelect, SelectorSumsToOne) {
  Rng rng(3);
  const Tensor z = uniform_tensor({1000, 3}, rng, 0.0, 1.0, false);
  const Tensor r = dselect_selector(z);
  for (std::size_t b = 0; b < 1000; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) s += r.at({b, i});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(DSelect, InvalidExpertCountRejected) {
  EXPECT_THROW(validate_strategy(DSelect1Config{}, 6), ConfigError);
  EXPECT_THROW(validate_strategy(DSelect1Config{}, 1), ConfigError);
  EXPECT_NO_THROW(validate_strategy(DSelect1Config{}, 8));
}

TEST(DSelect, TrainingMixesAndInferencePicksOne) {
  Fixture f;
  const DSelect1Config cfg{1.0, 0.1};
  BlockParams bp = init_block(cfg, f.d, f.m, f.N, f.rng);
  bp.experts = f.experts;
  const auto train = route_block(cfg, bp, f.u, f.ctx(true));
  ASSERT_EQ(train.aux_losses.count("selector_entropy"), 1u);
  EXPECT_GE(train.aux_losses.at("selector_entropy").item(), 0.0);
  const auto infer = route_block(cfg, bp, f.u, f.ctx(false));
  EXPECT_TRUE(infer.aux_losses.empty());
  for (std::size_t b = 0; b < f.B; ++b) {
    double best = 1e300;
    for (std::size_t e = 0; e < f.N; ++e) best = std::min(best, max_abs_diff(f.row_of(infer.activations, b), f.expert_row(e, b)));
    EXPECT_EQ(best, 0.0);
  }
  const Tensor w = uniform_tensor({f.B, f.L, f.d}, f.rng, -1, 1, false);
  auto loss = [&] {
    const auto o = route_block(cfg, bp, f.u, f.ctx(true));
    return sum(o.activations * w) + o.aux_losses.at("selector_entropy");
  };
  // Scale the selector so that smooth-step inputs sit inside the cubic region.
  for (double& x : bp.dselect->w_sel.mutable_data()) x *= 0.2;
  EXPECT_LE(grad_check_params(loss, {bp.dselect->w_sel}).max_rel_error, kGradTol);
}

// ---- heuristics ----------------------------------------------------------------

TEST(Hash, DeterministicAndSingleExpert) {
  EXPECT_EQ(hash_route(12345, 6, 7), hash_route(12345, 6, 7));
  for (std::int64_t id = 0; id < 100; ++id) EXPECT_EQ(hash_route(id, 1, 3), 0u);
}

TEST(Hash, BalancedOverSequentialIds) {
  const std::size_t N = 6, n = 100000;
  std::vector<double> count(N, 0.0);
  for (std::size_t id = 0; id < n; ++id) count[hash_route(static_cast<std::int64_t>(id), N, 0)] += 1.0;
  for (double c : count) EXPECT_NEAR(c / n, 1.0 / N, 0.02);
}

TEST(Tag, MappingSharedExpertAndUnknownTag) {
  const std::map<int, std::size_t> map{{0, 0}, {1, 1}};
  EXPECT_EQ(tag_route(1, map), 1u);
  const std::map<int, std::size_t> shared{{0, 2}, {1, 2}};
  EXPECT_EQ(tag_route(0, shared), 2u);
  EXPECT_EQ(tag_route(1, shared), 2u);
  try {
    tag_route(9, map);
    FAIL() << "expected RoutingError";
  } catch (const RoutingError& e) {
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
}

TEST(Tag, MissingTagsIsConfigError) {
  Fixture f;
  RoutingContext ctx = f.ctx();
  ctx.tags = {};
  EXPECT_THROW(tag_forward(f.u, f.experts, TagConfig{{{0, 0}}}, ctx), ConfigError);
  EXPECT_THROW(validate_strategy(TagConfig{}, 4), ConfigError);
}

TEST(ExpertDropout, ZeroProbabilityAndInferenceAreIdentity) {
  Rng rng(4);
  const Tensor dist = random_simplex(5, 4, rng);
  EXPECT_EQ(max_abs_diff(expert_dropout(dist, 0.0, &rng, true), dist), 0.0);
  EXPECT_EQ(max_abs_diff(expert_dropout(dist, 0.9, &rng, false), dist), 0.0);
  EXPECT_THROW(expert_dropout(dist, 1.0, &rng, true), ConfigError);
}

TEST(ExpertDropout, RenormalizesSurvivors) {
  const Tensor dist = Tensor::from({1, 2}, {0.5, 0.5});
  bool seen = false;
  for (std::uint64_t seed = 0; seed < 200 && !seen; ++seed) {
    Rng rng(seed);
    const Tensor out = expert_dropout(dist, 0.5, &rng, true);
    if (out.at({0, 0}) == 0.0 && out.at({0, 1}) != 0.5) {
      EXPECT_EQ(out.at({0, 1}), 1.0);
      seen = true;
    }
  }
  EXPECT_TRUE(seen);
}

TEST(ExpertDropout, PreservesSimplexAndPassesAllDroppedRowsThrough) {
  Rng rng(5);
  const Tensor dist = random_simplex(2000, 3, rng);
  const Tensor out = expert_dropout(dist, 0.6, &rng, true);
  std::size_t untouched = 0;
  for (std::size_t b = 0; b < 2000; ++b) {
    double s = 0.0;
    bool same = true;
    for (std::size_t i = 0; i < 3; ++i) {
      s += out.at({b, i});
      same = same && out.at({b, i}) == dist.at({b, i});
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    untouched += same ? 1 : 0;
  }
  // P(all three dropped) = 0.216; those rows come back bit-identical.
  EXPECT_GT(untouched, 300u);
}

// ---- Adamix, Latent Skills, single expert ----------------------------------------

TEST(Adamix, InferenceUsesParameterMidpoint) {
  Fixture f;
  f.experts.resize(2);
  const auto out = adamix_forward(f.u, f.experts, f.ctx(false));
  const ExpertParams mid = merge_params(Tensor::from({2}, {0.5, 0.5}), f.experts);
  EXPECT_LE(max_abs_diff(out.activations, expert_forward(f.u, mid)), 1e-15);
}

TEST(Adamix, TrainingRoutesUniformlyAtRandom) {
  Fixture f;
  const std::size_t B = 10000;
  const Tensor u = Tensor::zeros({B, 1, f.d});
  const auto out = adamix_forward(u, f.experts, f.ctx(true));
  std::vector<double> count(f.N, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.N; ++i) {
      const double p = out.routing_record.at({b, i});
      EXPECT_TRUE(p == 0.0 || p == 1.0);
      s += p;
      count[i] += p;
    }
    EXPECT_EQ(s, 1.0);
  }
  for (double c : count) EXPECT_NEAR(c / B, 1.0 / f.N, 0.05 / f.N);
}

TEST(LatentSkills, SaturatedGatesPickOneExpert) {
  Fixture f;
  f.experts.resize(2);
  SkillMatrix skills{Tensor::from({1, 2}, {40, -40}), 1.0};
  RoutingContext ctx = f.ctx(false);
  const std::vector<int> tasks{0, 0, 0};
  ctx.task_ids = tasks;
  const auto out = latent_skills_forward(f.u, f.experts, skills, ctx);
  for (std::size_t b = 0; b < 3; ++b) {
    EXPECT_EQ(out.routing_record.at({b, 0}), 1.0);
    EXPECT_EQ(out.routing_record.at({b, 1}), 0.0);
    EXPECT_LE(max_abs_diff(f.row_of(out.activations, b), f.expert_row(0, b)), 1e-15);
  }
}

TEST(LatentSkills, UniformLogitsGiveUniformWeightsAndFallback) {
  Fixture f;
  RoutingContext ctx = f.ctx(false);
  const std::vector<int> tasks{0, 1, 0};
  ctx.task_ids = tasks;
  SkillMatrix skills{Tensor::from({2, 4}, {1, 1, 1, 1, -1, -2, -3, -4}), 1.0};
  const auto out = latent_skills_forward(f.u, f.experts, skills, ctx);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.routing_record.at({b, i}), 0.25);
  }
}

TEST(LatentSkills, GradientReachesSkillLogitsWithFrozenNoise) {
  Fixture f;
  SkillMatrix skills{uniform_tensor({2, 4}, f.rng), 1.0};
  RoutingContext ctx = f.ctx(true);
  ctx.freeze_noise = true;
  const Tensor w = uniform_tensor({f.B, f.L, f.d}, f.rng, -1, 1, false);
  auto loss = [&] { return sum(latent_skills_forward(f.u, f.experts, skills, ctx).activations * w); };
  EXPECT_LE(grad_check_params(loss, {skills.logits}).max_rel_error, kGradTol);
}

TEST(LatentSkills, TaskOutOfRangeRejected) {
  Fixture f;
  SkillMatrix skills{Tensor::zeros({1, 4}), 1.0};
  EXPECT_THROW(latent_skills_forward(f.u, f.experts, skills, f.ctx()), RoutingError);
}

TEST(SingleExpert, WidthFollowsMultiplier) {
  Rng rng(6);
  EXPECT_EQ(init_block(SingleExpertConfig{1}, 32, 16, 8, rng).experts.at(0).m(), 16u);
  const BlockParams wide = init_block(SingleExpertConfig{8}, 32, 16, 8, rng);
  ASSERT_EQ(wide.num_experts(), 1u);
  EXPECT_EQ(wide.experts[0].m(), 128u);
}

// ---- contract ------------------------------------------------------------------

TEST(Strategies, EveryStrategyHonorsTheBlockContract) {
  for (const char* name : kStrategyNames) {
    Fixture f;
    StrategyConfig cfg = default_strategy(name);
    if (auto* t = std::get_if<TagConfig>(&cfg)) t->map = {{0, 0}, {1, 3}};
    if (auto* l = std::get_if<LatentSkillsConfig>(&cfg)) l->num_tasks = 2;
    const BlockParams bp = init_block(cfg, f.d, f.m, f.N, f.rng);
    for (bool training : {true, false}) {
      const auto out = route_block(cfg, bp, f.u, f.ctx(training));
      EXPECT_EQ(out.activations.shape(), f.u.shape()) << name;
      for (double x : out.activations.data()) EXPECT_TRUE(std::isfinite(x)) << name;
      for (const auto& [k, v] : out.aux_losses) EXPECT_TRUE(std::isfinite(v.item())) << name << " " << k;
      const Tensor& rec = out.routing_record;
      for (std::size_t b = 0; b < f.B; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < rec.dim(1); ++i) s += rec.at({b, i});
        EXPECT_NEAR(s, 1.0, 1e-9) << name;
      }
    }
  }
}

TEST(Strategies, NamesRoundTripAndUnknownRejected) {
  for (const char* name : kStrategyNames) EXPECT_EQ(strategy_name(default_strategy(name)), name);
  EXPECT_THROW(default_strategy("moe"), ConfigError);
}
