// resample.hpp — pull data from one grid onto another through a transform.
//
// Transforms are stored in the forward direction (source physical coords to
// target physical coords), so resampling onto the target grid evaluates the
// inverse at each target voxel: exactly for affines, by fixed-point
// iteration for displacement fields. Outside the source grid the fill value
// is 0 (background).
#pragma once

#include "regseg/geometry.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct GridSpec {
  Dims dims{0, 0, 0};
  Spacing spacing{1.0, 1.0, 1.0};

  static GridSpec like(const Volume& v) { return {v.dims(), v.spacing}; }
  static GridSpec like(const LabelMap& m) { return {m.dims(), m.spacing}; }
};

/// Trilinear sample at voxel-space position; fill outside [0, dim-1].
double sample_trilinear(const Array3<double>& a, double vz, double vy,
                        double vx, double fill = 0.0);

/// Nearest-neighbour sample at voxel-space position; fill outside bounds.
std::int32_t sample_nearest(const Array3<std::int32_t>& a, double vz,
                            double vy, double vx, std::int32_t fill = 0);

/// Solve fwd(p) = x for p. Exact for affines; fixed-point for fields.
Vec3 invert_point(const Transform& fwd, const Vec3& x, int max_iter = 25,
                  double tol = 1e-9);

/// Intensity resample (trilinear).
Volume resample(const Volume& src, const Transform& fwd, const GridSpec& grid);

/// Label resample (nearest-neighbour; never invents classes).
LabelMap resample(const LabelMap& src, const Transform& fwd,
                  const GridSpec& grid);

}  // namespace regseg
