#pragma once

// Analytic forward-pass FLOP model for one routing block and an instrumented
// counterpart that runs the real implementation.
//
// Accounting: each expert matmul contributes 2 FLOPs per multiply-add, so an
// expert applied to L positions costs L·4·d·m. Merging N experts costs
// N·2·d·m. Router, nonlinearity and bias FLOPs are excluded from both sides;
// bias work is still tallied separately in FlopCounter::bias.

#include <cstdint>
#include <string>
#include <string_view>

#include "smear/flop_counter.hpp"
#include "smear/strategies.hpp"

namespace smear {

enum class CostPhase { inference, training };

struct CostDims {
  std::uint64_t L = 0, N = 0, d = 0, m = 0;
};

struct CostReport {
  std::string strategy;
  CostDims dims;
  std::uint64_t analytic_flops = 0;
  std::uint64_t measured_flops = 0;
  std::uint64_t bias_flops = 0;
  double wall_clock_us_per_example = 0.0;  // report-only
};

std::uint64_t analytic_flops(const StrategyConfig& strategy, const CostDims& dims,
                             CostPhase phase = CostPhase::inference);
/// Name-based lookup; unknown names raise ConfigError.
std::uint64_t analytic_flops(std::string_view strategy, const CostDims& dims,
                             CostPhase phase = CostPhase::inference);

/// Expert and merge FLOPs recorded by an enabled counter.
std::uint64_t measured_flops(const FlopCounter& counter);

/// Runs one example through one freshly initialized block of the given strategy
/// with instrumentation enabled. `timing_repeats` > 0 also times the forward.
CostReport measure_block_cost(const StrategyConfig& strategy, const CostDims& dims,
                              CostPhase phase = CostPhase::inference, std::uint64_t seed = 0,
                              int timing_repeats = 0);

struct SpeedupRatio {
  double exact = 0.0;   // 4NL / (4L + 2N)
  double approx = 0.0;  // NL / (N + L)
};

SpeedupRatio speedup_ratio(std::uint64_t L, std::uint64_t N);

}  // namespace smear
