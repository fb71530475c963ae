// optim.hpp — adaptive-moment optimizer with decoupled weight decay and a
// polynomial learning-rate decay over a fixed iteration budget.
#pragma once

#include <iosfwd>
#include <vector>

#include "regseg/tensor.hpp"

namespace regseg::nn {

struct OptimConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  int t_total = 1;  // iteration budget the decay is stretched over
};

class AdamW {
 public:
  AdamW(std::vector<NodePtr> params, OptimConfig cfg);

  /// Applies one update from current gradients; advances the step counter.
  void step();

  long iteration() const { return t_; }
  /// Learning rate the NEXT step will use.
  double current_lr() const;

  /// Moment state round trip for checkpoints (binary, little-endian).
  void save_state(std::ostream& out) const;
  void load_state(std::istream& in);

 private:
  std::vector<NodePtr> params_;
  OptimConfig cfg_;
  std::vector<Arr> m_, v_;
  long t_ = 0;  // completed steps
};

}  // namespace regseg::nn
