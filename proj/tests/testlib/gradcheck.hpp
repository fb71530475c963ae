// gradcheck.hpp — central-difference verification of autodiff gradients.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "regseg/prng.hpp"
#include "regseg/tensor.hpp"

namespace regseg::testlib {

struct GradReport {
  double max_rel_err = 0.0;
  int checked = 0;
  std::string worst_leaf;
  long worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// `build` constructs a fresh scalar graph from the leaves' CURRENT values;
/// it is re-invoked after each perturbation. Up to `samples_per_leaf`
/// coordinates per leaf are probed (all of them when the leaf is small).
/// Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
GradReport check_gradients(
    const std::function<nn::NodePtr()>& build,
    const std::vector<std::pair<std::string, nn::NodePtr>>& leaves,
    regseg::Rng& rng, int samples_per_leaf = 24, double h = 1e-5);

}  // namespace regseg::testlib
