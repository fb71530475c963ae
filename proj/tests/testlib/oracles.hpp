// oracles.hpp — independent reference implementations for tests.
//
// Everything here is written the dumb way on purpose: plain loops over raw
// arrays, no shared code with the library under test. Expected values in
// the suites either come from these functions or are frozen literals.
#pragma once

#include <cstdint>
#include <vector>

#include "regseg/volume.hpp"

namespace regseg::oracle {

/// Plain-loop RMSE.
double rmse_ref(const Array3<double>& a, const Array3<double>& b);

/// Dice score of one class between two masks, set arithmetic only.
/// Both empty -> 1.0, exactly one empty -> 0.0.
double dsc_ref(const Array3<std::int32_t>& a, const Array3<std::int32_t>& b,
               int cls);

/// 2D per-slice 95th-percentile symmetric boundary distance, averaged over
/// slices where both masks have the class; nullopt when no slice qualifies.
/// Boundary pixels are mask pixels with a 4-neighbour outside the mask or on
/// the image edge; distances are Euclidean with (sy, sx) weighting;
/// percentile uses linear interpolation on the pooled sorted distances.
struct Hd95Ref {
  double value = 0.0;
  bool defined = false;
};
Hd95Ref hd95_ref(const Array3<std::int32_t>& a, const Array3<std::int32_t>& b,
                 int cls, double sy, double sx);

/// Percentile with linear interpolation on a copy of the data.
double percentile_ref(std::vector<double> v, double q);

/// Reference softmax cross-entropy: mean over pixels of -log(max(p_y,1e-12))
/// given probabilities p laid out [class][pixel].
double ce_ref(const std::vector<std::vector<double>>& probs,
              const std::vector<int>& labels);

/// Reference soft dice loss on probabilities [class][pixel] vs integer
/// labels: 1 - mean_c (2*sum(p_c*y_c)+eps)/(sum p_c + sum y_c + eps).
double dice_loss_ref(const std::vector<std::vector<double>>& probs,
                     const std::vector<int>& labels, double eps);

}  // namespace regseg::oracle
