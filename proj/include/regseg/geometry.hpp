// geometry.hpp — spatial transforms between volumes.
//
// Points are physical (z, y, x) columns; an affine transform is a 4x4
// homogeneous matrix acting on (z, y, x, 1). A displacement field adds a
// per-voxel offset on top of a base affine: T(p) = A p + f(A p), with f
// sampled trilinearly on the target grid and zero outside it.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "regseg/volume.hpp"

namespace regseg {

using Vec3 = Eigen::Vector3d;   // (z, y, x), physical units
using Mat4 = Eigen::Matrix4d;

struct AffineTransform {
  Mat4 m = Mat4::Identity();

  static AffineTransform identity() { return {}; }
  Vec3 apply(const Vec3& p) const {
    return m.topLeftCorner<3, 3>() * p + m.topRightCorner<3, 1>();
  }
};

/// Twelve pose parameters: translation (physical units), rotation about the
/// z/y/x axes (radians), per-axis log scale, and shear. All applied about a
/// fixed centre point so small parameter steps move the far corners little.
struct AffineParams {
  std::array<double, 3> translation{0, 0, 0};
  std::array<double, 3> rotation{0, 0, 0};
  std::array<double, 3> log_scale{0, 0, 0};
  std::array<double, 3> shear{0, 0, 0};

  double& at(int i) { return (&translation[0])[i]; }
  double at(int i) const { return (&translation[0])[i]; }
  static constexpr int count() { return 12; }
};

/// Build the matrix  T(p) = t + c + R * Sh * S * (p - c)
/// with R = Rz Ry Rx, S = diag(exp(log_scale)), Sh unit lower-triangular.
AffineTransform make_affine(const AffineParams& p, const Vec3& center);

/// Physical centre of a grid: half-extent along each axis.
Vec3 grid_center(const Dims& dims, const Spacing& spacing);

/// Exact matrix product; (a ∘ b)(p) = a(b(p)).
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);

/// Matrix inverse; throws when the linear part is singular.
AffineTransform invert(const AffineTransform& a);

/// Base affine plus a dense offset field on the target grid.
/// offsets[c] holds the c-th component (z, y, x order) of f in physical
/// units at each target voxel.
struct DisplacementField {
  AffineTransform base;
  Dims dims{0, 0, 0};
  Spacing spacing{1.0, 1.0, 1.0};
  std::array<Array3<float>, 3> offsets;

  /// f(q), trilinear in voxel space of the target grid; zero outside.
  Vec3 offset_at(const Vec3& q) const;
  Vec3 apply(const Vec3& p) const {
    const Vec3 q = base.apply(p);
    return q + offset_at(q);
  }
};

/// Either flavour, tagged. Field composition is not supported: the training
/// pipeline only ever chains affines, and ingested fields are applied as-is.
struct Transform {
  enum class Kind { affine, field } kind = Kind::affine;
  AffineTransform affine;
  DisplacementField field;

  static Transform from_affine(const AffineTransform& a) {
    Transform t;
    t.kind = Kind::affine;
    t.affine = a;
    return t;
  }
  static Transform from_field(DisplacementField f) {
    Transform t;
    t.kind = Kind::field;
    t.field = std::move(f);
    return t;
  }
  Vec3 apply(const Vec3& p) const {
    return kind == Kind::affine ? affine.apply(p) : field.apply(p);
  }
};

Vec3 apply_point(const Transform& t, const Vec3& p);

/// Compose two transforms. Affine∘affine is exact; any combination with a
/// field throws std::invalid_argument.
Transform compose(const Transform& a, const Transform& b);

/// Invert. Affines invert exactly; fields throw.
Transform invert(const Transform& t);

/// Mean over grid voxels of |T1(p) - T2(p)| in voxel units (per-axis
/// physical difference divided by spacing). The registration-quality number
/// used by the oracle tests.
double mean_displacement_voxels(const Transform& t1, const Transform& t2,
                                const Dims& dims, const Spacing& spacing);

// ---- pairwise table ------------------------------------------------------

/// Directed transform i -> j for ordered pairs of cohort volumes. Cells may
/// be empty (a table can cover only the pairs a run needs).
class TransformTable {
 public:
  TransformTable() = default;
  explicit TransformTable(int n_volumes)
      : n_(n_volumes),
        cells_(static_cast<std::size_t>(n_volumes) * n_volumes) {}

  int size() const { return n_; }
  void set(int i, int j, Transform t) { cells_[slot(i, j)] = std::move(t); }
  bool has(int i, int j) const { return cells_[slot(i, j)].has_value(); }
  const Transform& get(int i, int j) const;
  int entries() const;

  /// Binary container, magic "RTBL"; reload is bit-exact.
  void save(const std::string& path, const std::string& config_json) const;
  static TransformTable load(const std::string& path,
                             std::string* config_json = nullptr);

 private:
  int n_ = 0;
  std::vector<std::optional<Transform>> cells_;
  std::size_t slot(int i, int j) const {
    return static_cast<std::size_t>(i) * n_ + j;
  }
};

}  // namespace regseg
