#include "smear/experts.hpp"

#include <cmath>

namespace smear {

namespace {

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::swish ? swish(x) : x;
}

std::vector<Tensor> field(const std::vector<ExpertParams>& experts, int which) {
  std::vector<Tensor> out;
  out.reserve(experts.size());
  for (const auto& e : experts) out.push_back(e.tensors()[static_cast<std::size_t>(which)]);
  return out;
}

}  // namespace

Tensor normal_tensor(Shape shape, double variance, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

ExpertParams init_expert(std::size_t d, std::size_t m, Rng& rng, bool requires_grad) {
  ExpertParams e;
  e.w_down = normal_tensor({d, m}, 1.0 / static_cast<double>(d), rng, requires_grad);
  e.b_down = Tensor::zeros({m}, requires_grad);
  e.w_up = normal_tensor({m, d}, 1e-4 / static_cast<double>(m), rng, requires_grad);
  e.b_up = Tensor::zeros({d}, requires_grad);
  return e;
}

ExpertParams zero_expert(std::size_t d, std::size_t m, bool requires_grad) {
  return {Tensor::zeros({d, m}, requires_grad), Tensor::zeros({m}, requires_grad),
          Tensor::zeros({m, d}, requires_grad), Tensor::zeros({d}, requires_grad)};
}

RouterParams init_router(std::size_t d, std::size_t n, Rng& rng, bool requires_grad) {
  return {normal_tensor({d, n}, 1.0 / static_cast<double>(d), rng, requires_grad)};
}

void check_same_architecture(const std::vector<ExpertParams>& experts) {
  if (experts.empty()) throw ArchitectureMismatch("no experts given");
  const auto ref = experts[0].tensors();
  for (std::size_t i = 1; i < experts.size(); ++i) {
    const auto t = experts[i].tensors();
    for (std::size_t f = 0; f < t.size(); ++f) {
      if (t[f].shape() != ref[f].shape()) {
        throw ArchitectureMismatch("expert " + std::to_string(i) + " field " +
                                   ExpertParams::kFieldNames[f] + " has shape " +
                                   shape_str(t[f].shape()) + ", expert 0 has " +
                                   shape_str(ref[f].shape()));
      }
    }
  }
}

Tensor expert_forward(const Tensor& u, const ExpertParams& theta, FlopCounter* flops,
                      Activation act) {
  if (u.rank() != 3 || u.dim(2) != theta.d()) {
    throw ShapeError("expert_forward: activations " + shape_str(u.shape()) +
                     " do not match expert input width " + std::to_string(theta.d()));
  }
  const std::size_t B = u.dim(0), L = u.dim(1), d = theta.d(), m = theta.m();
  Tensor h = activate(matmul(u, theta.w_down) + reshape(theta.b_down, {1, 1, m}), act);
  Tensor out = u + matmul(h, theta.w_up) + reshape(theta.b_up, {1, 1, d});
  if (flops) {
    flops->expert_matmul += 4ULL * B * L * d * m;
    flops->bias += static_cast<std::uint64_t>(B) * L * (m + d);
  }
  return out;
}

Tensor expert_forward(const Tensor& u, const StackedExpert& theta, FlopCounter* flops,
                      Activation act) {
  const std::size_t B = theta.w_down.dim(0), d = theta.w_down.dim(1), m = theta.w_down.dim(2);
  if (u.rank() != 3 || u.dim(0) != B || u.dim(2) != d) {
    throw ShapeError("expert_forward: activations " + shape_str(u.shape()) +
                     " do not match stacked expert " + shape_str(theta.w_down.shape()));
  }
  const std::size_t L = u.dim(1);
  Tensor h = activate(bmm(u, theta.w_down) + reshape(theta.b_down, {B, 1, m}), act);
  Tensor out = u + bmm(h, theta.w_up) + reshape(theta.b_up, {B, 1, d});
  if (flops) {
    flops->expert_matmul += 4ULL * B * L * d * m;
    flops->bias += static_cast<std::uint64_t>(B) * L * (m + d);
  }
  return out;
}

Tensor pool_router_input(const Tensor& u) {
  if (u.rank() != 3) throw ShapeError("pool_router_input: expected B×L×d, got " + shape_str(u.shape()));
  return mean_axis(u, 1);
}

Tensor router_logits(const Tensor& v, const RouterParams& rp) {
  if (v.rank() != 2 || v.dim(1) != rp.w_route.dim(0)) {
    throw ShapeError("router_forward: input " + shape_str(v.shape()) + " vs W_route " +
                     shape_str(rp.w_route.shape()));
  }
  Tensor rows = layer_norm(transpose(rp.w_route));  // N×d, one row per expert
  return matmul(layer_norm(v), transpose(rows));
}

RoutingDistribution router_forward(const Tensor& v, const RouterParams& rp) {
  return {softmax_last_axis(router_logits(v, rp))};
}

ExpertParams merge_params(const Tensor& weights, const std::vector<ExpertParams>& experts) {
  check_same_architecture(experts);
  if (weights.numel() != experts.size()) {
    throw ShapeError("merge_params: " + std::to_string(weights.numel()) + " weights for " +
                     std::to_string(experts.size()) + " experts");
  }
  const Tensor w = reshape(weights, {1, experts.size()});
  ExpertParams out;
  Tensor* dst[4] = {&out.w_down, &out.b_down, &out.w_up, &out.b_up};
  for (int f = 0; f < 4; ++f) {
    const auto parts = field(experts, f);
    *dst[f] = reshape(weighted_stack(w, parts), parts[0].shape());
  }
  return out;
}

StackedExpert merge_params_batched(const Tensor& weights, const std::vector<ExpertParams>& experts,
                                   FlopCounter* flops) {
  check_same_architecture(experts);
  if (weights.rank() != 2 || weights.dim(1) != experts.size()) {
    throw ShapeError("merge_params: weights " + shape_str(weights.shape()) + " for " +
                     std::to_string(experts.size()) + " experts");
  }
  StackedExpert out{weighted_stack(weights, field(experts, 0)), weighted_stack(weights, field(experts, 1)),
                    weighted_stack(weights, field(experts, 2)), weighted_stack(weights, field(experts, 3))};
  if (flops) {
    const std::uint64_t B = weights.dim(0), N = experts.size();
    const std::uint64_t d = experts[0].d(), m = experts[0].m();
    flops->merge += B * N * 2 * d * m;
    flops->bias += B * N * 2 * (m + d);
  }
  return out;
}

StackedExpert select_params(std::span<const std::size_t> index,
                            const std::vector<ExpertParams>& experts) {
  check_same_architecture(experts);
  return {select_stack(index, field(experts, 0)), select_stack(index, field(experts, 1)),
          select_stack(index, field(experts, 2)), select_stack(index, field(experts, 3))};
}

}  // namespace smear
