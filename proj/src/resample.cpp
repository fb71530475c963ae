// resample.cpp — see resample.hpp.
#include "regseg/resample.hpp"

#include <cmath>

namespace regseg {

double sample_trilinear(const Array3<double>& a, double vz, double vy,
                        double vx, double fill) {
  const Dims d = a.dims();
  if (vz < 0 || vy < 0 || vx < 0 || vz > d[0] - 1 || vy > d[1] - 1 ||
      vx > d[2] - 1)
    return fill;
  int k0 = static_cast<int>(vz), j0 = static_cast<int>(vy),
      i0 = static_cast<int>(vx);
  k0 = std::min(k0, d[0] - 2 >= 0 ? d[0] - 2 : 0);
  j0 = std::min(j0, d[1] - 2 >= 0 ? d[1] - 2 : 0);
  i0 = std::min(i0, d[2] - 2 >= 0 ? d[2] - 2 : 0);
  const double fz = vz - k0, fy = vy - j0, fx = vx - i0;
  auto v = [&](int dk, int dj, int di) {
    return a.at(std::min(k0 + dk, d[0] - 1), std::min(j0 + dj, d[1] - 1),
                std::min(i0 + di, d[2] - 1));
  };
  const double c00 = v(0, 0, 0) * (1 - fx) + v(0, 0, 1) * fx;
  const double c01 = v(0, 1, 0) * (1 - fx) + v(0, 1, 1) * fx;
  const double c10 = v(1, 0, 0) * (1 - fx) + v(1, 0, 1) * fx;
  const double c11 = v(1, 1, 0) * (1 - fx) + v(1, 1, 1) * fx;
  const double c0 = c00 * (1 - fy) + c01 * fy;
  const double c1 = c10 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

std::int32_t sample_nearest(const Array3<std::int32_t>& a, double vz,
                            double vy, double vx, std::int32_t fill) {
  const int k = static_cast<int>(std::lround(vz));
  const int j = static_cast<int>(std::lround(vy));
  const int i = static_cast<int>(std::lround(vx));
  if (!a.in_bounds(k, j, i)) return fill;
  return a.at(k, j, i);
}

Vec3 invert_point(const Transform& fwd, const Vec3& x, int max_iter,
                  double tol) {
  if (fwd.kind == Transform::Kind::affine)
    return invert(fwd.affine).apply(x);
  // fwd(p) = A p + f(A p). With u = A p, solve u = x - f(u); the field is a
  // small perturbation so plain fixed-point iteration contracts.
  const DisplacementField& df = fwd.field;
  Vec3 u = x;
  for (int it = 0; it < max_iter; ++it) {
    const Vec3 next = x - df.offset_at(u);
    const double step = (next - u).norm();
    u = next;
    if (step < tol) break;
  }
  return invert(df.base).apply(u);
}

namespace {

template <class VoxelT, class SampleFn>
void resample_grid(const Transform& fwd, const GridSpec& grid,
                   const Spacing& src_spacing, Array3<VoxelT>& out,
                   SampleFn&& sample) {
  // Affine case: map target voxels through the inverse matrix directly.
  // Field case: per-voxel fixed-point inversion.
  const bool is_affine = fwd.kind == Transform::Kind::affine;
  AffineTransform inv_a;
  if (is_affine) inv_a = invert(fwd.affine);
  for (int k = 0; k < grid.dims[0]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[2]; ++i) {
        const Vec3 x(k * grid.spacing[0], j * grid.spacing[1],
                     i * grid.spacing[2]);
        const Vec3 p = is_affine ? inv_a.apply(x) : invert_point(fwd, x);
        out.at(k, j, i) = sample(p[0] / src_spacing[0], p[1] / src_spacing[1],
                                 p[2] / src_spacing[2]);
      }
}

}  // namespace

Volume resample(const Volume& src, const Transform& fwd,
                const GridSpec& grid) {
  Volume out;
  out.id = src.id;
  out.spacing = grid.spacing;
  out.voxels = Array3<double>(grid.dims);
  resample_grid(fwd, grid, src.spacing, out.voxels,
                [&](double vz, double vy, double vx) {
                  return sample_trilinear(src.voxels, vz, vy, vx, 0.0);
                });
  return out;
}

LabelMap resample(const LabelMap& src, const Transform& fwd,
                  const GridSpec& grid) {
  LabelMap out;
  out.id = src.id;
  out.spacing = grid.spacing;
  out.num_classes = src.num_classes;
  out.voxels = Array3<std::int32_t>(grid.dims);
  resample_grid(fwd, grid, src.spacing, out.voxels,
                [&](double vz, double vy, double vx) {
                  return sample_nearest(src.voxels, vz, vy, vx, 0);
                });
  return out;
}

}  // namespace regseg
