// similarity.hpp — image similarity metrics for registration and scoring.
#pragma once

#include "regseg/volume.hpp"

namespace regseg {

/// Normalized mutual information from a joint histogram over paired voxels:
/// MI / max(H(a), H(b)), in [0, 1]. Intensities are binned over each image's
/// own [min, max] range. A constant image has zero entropy; by convention
/// the result is then 0. Symmetric in its arguments, bit-exactly.
double mutual_information(const Array3<double>& a, const Array3<double>& b,
                          int bins = 32);

/// Root-mean-square intensity difference; symmetric, bit-exactly.
double rmse(const Array3<double>& a, const Array3<double>& b);

}  // namespace regseg
