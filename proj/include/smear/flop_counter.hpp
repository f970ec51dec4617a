#pragma once

#include <cstdint>
#include <stdexcept>

namespace smear {

class CounterStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Forward-pass FLOP tally for one routing block. Expert matmuls count two
/// FLOPs per multiply-add. Merging counts 2·d·m per expert (the two weight
/// matrices, one FLOP per merged entry). Bias work is tallied separately and
/// is excluded from `measured()`, as are router and nonlinearity FLOPs.
struct FlopCounter {
  bool enabled = true;
  std::uint64_t expert_matmul = 0;
  std::uint64_t merge = 0;
  std::uint64_t bias = 0;

  std::uint64_t measured() const {
    if (!enabled) throw CounterStateError("FLOP instrumentation is disabled");
    return expert_matmul + merge;
  }
  void reset() { expert_matmul = merge = bias = 0; }
};

}  // namespace smear
