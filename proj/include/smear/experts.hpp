#pragma once

// Adapter experts, the linear router, and parameter merging.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "smear/flop_counter.hpp"
#include "smear/tensor.hpp"

namespace smear {

using Rng = std::mt19937_64;

class ArchitectureMismatch : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

/// One residual adapter: u + act(u·w_down + b_down)·w_up + b_up.
struct ExpertParams {
  Tensor w_down;  // d×m
  Tensor b_down;  // m
  Tensor w_up;    // m×d
  Tensor b_up;    // d

  std::size_t d() const { return w_down.dim(0); }
  std::size_t m() const { return w_down.dim(1); }
  std::vector<Tensor> tensors() const { return {w_down, b_down, w_up, b_up}; }
  static constexpr const char* kFieldNames[4] = {"w_down", "b_down", "w_up", "b_up"};
};

/// Per-example expert parameters, leading axis B.
struct StackedExpert {
  Tensor w_down;  // B×d×m
  Tensor b_down;  // B×m
  Tensor w_up;    // B×m×d
  Tensor b_up;    // B×d
};

enum class Activation { swish, identity };

/// W_route, d×N.
struct RouterParams {
  Tensor w_route;
  std::size_t num_experts() const { return w_route.dim(1); }
};

struct BlockInput {
  Tensor activations;  // B×L×d
  std::vector<std::int64_t> example_ids;
  std::vector<std::optional<int>> tags;
};

struct RoutingDistribution {
  Tensor probs;  // B×N
};

// Random draws follow the documented initialization: w_down ~ N(0, 1/d),
// w_up ~ N(0, 1e-4/m), biases zero.
ExpertParams init_expert(std::size_t d, std::size_t m, Rng& rng, bool requires_grad = true);
ExpertParams zero_expert(std::size_t d, std::size_t m, bool requires_grad = false);
RouterParams init_router(std::size_t d, std::size_t n, Rng& rng, bool requires_grad = true);
/// Normal(0, variance) matrix; shared by every initializer.
Tensor normal_tensor(Shape shape, double variance, Rng& rng, bool requires_grad);

/// Applies one shared expert to B×L×d activations.
Tensor expert_forward(const Tensor& u, const ExpertParams& theta, FlopCounter* flops = nullptr,
                      Activation act = Activation::swish);
/// Applies example b's parameters to example b's positions.
Tensor expert_forward(const Tensor& u, const StackedExpert& theta, FlopCounter* flops = nullptr,
                      Activation act = Activation::swish);

/// Mean over the sequence axis: B×L×d -> B×d.
Tensor pool_router_input(const Tensor& u);

/// Router logits: layer_norm(v) · layer_norm(per-expert rows of W_route)ᵀ.
Tensor router_logits(const Tensor& v, const RouterParams& rp);
RoutingDistribution router_forward(const Tensor& v, const RouterParams& rp);

/// Fieldwise Σ_i weights_i θ_i for an N-vector of weights.
ExpertParams merge_params(const Tensor& weights, const std::vector<ExpertParams>& experts);
/// Row b of `weights` (B×N) produces the merged expert of example b.
StackedExpert merge_params_batched(const Tensor& weights, const std::vector<ExpertParams>& experts,
                                   FlopCounter* flops = nullptr);
/// Example b uses expert index[b] unchanged.
StackedExpert select_params(std::span<const std::size_t> index,
                            const std::vector<ExpertParams>& experts);

void check_same_architecture(const std::vector<ExpertParams>& experts);

}  // namespace smear
