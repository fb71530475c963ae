// test_spatreg.cpp — transform algebra, resampling, similarity metrics,
// and the pairwise table container.
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "regseg/geometry.hpp"
#include "regseg/prng.hpp"
#include "regseg/resample.hpp"
#include "regseg/similarity.hpp"
#include "testlib/oracles.hpp"

using namespace regseg;
namespace fs = std::filesystem;

namespace {

AffineParams random_params(Rng& rng, double scale = 1.0) {
  AffineParams p;
  for (int a = 0; a < 3; ++a) {
    p.translation[a] = rng.uniform(-3.0, 3.0) * scale;
    p.rotation[a] = rng.uniform(-0.4, 0.4) * scale;
    p.log_scale[a] = rng.uniform(-0.2, 0.2) * scale;
    p.shear[a] = rng.uniform(-0.15, 0.15) * scale;
  }
  return p;
}

Volume blob_volume(Dims d, Vec3 c_vox, double radius) {
  Volume v;
  v.voxels = Array3<double>(d);
  for (int k = 0; k < d[0]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[2]; ++i) {
        const double r2 = (k - c_vox[0]) * (k - c_vox[0]) +
                          (j - c_vox[1]) * (j - c_vox[1]) +
                          (i - c_vox[2]) * (i - c_vox[2]);
        v.voxels.at(k, j, i) = std::exp(-r2 / (2.0 * radius * radius));
      }
  return v;
}

}  // namespace

TEST_CASE("identity transform is a fixed point of apply") {
  const Transform t = Transform::from_affine(AffineTransform::identity());
  Rng rng(1);
  for (int n = 0; n < 20; ++n) {
    const Vec3 p(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-9, 9));
    CHECK((apply_point(t, p) - p).norm() == 0.0);
  }
}

TEST_CASE("composition matches the matrix product") {
  Rng rng(2);
  for (int n = 0; n < 30; ++n) {
    const AffineTransform a = make_affine(random_params(rng), Vec3(4, 5, 6));
    const AffineTransform b = make_affine(random_params(rng), Vec3(1, 2, 3));
    const AffineTransform ab = compose(a, b);
    const Vec3 p(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-9, 9));
    const Vec3 lhs = ab.apply(p);
    const Vec3 rhs = a.apply(b.apply(p));
    CHECK((lhs - rhs).norm() < 1e-12 * (1.0 + rhs.norm()));
  }
}

TEST_CASE("inverse composes to identity within 1e-9") {
  Rng rng(3);
  for (int n = 0; n < 30; ++n) {
    const AffineTransform a = make_affine(random_params(rng), Vec3(2, 2, 2));
    const AffineTransform id = compose(a, invert(a));
    CHECK((id.m - Mat4::Identity()).cwiseAbs().maxCoeff() < 1e-9);
  }
  CHECK_THROWS_AS(invert(AffineTransform{Mat4::Zero()}),
                  std::invalid_argument);
}

TEST_CASE("field composition and inversion are rejected") {
  DisplacementField f;
  f.dims = {2, 2, 2};
  f.spacing = {1, 1, 1};
  for (int c = 0; c < 3; ++c) f.offsets[c] = Array3<float>(f.dims);
  const Transform tf = Transform::from_field(f);
  const Transform ta = Transform::from_affine(AffineTransform::identity());
  CHECK_THROWS_AS(compose(tf, ta), std::invalid_argument);
  CHECK_THROWS_AS(compose(ta, tf), std::invalid_argument);
  CHECK_THROWS_AS(invert(tf), std::invalid_argument);
}

TEST_CASE("displacement fields perturb points and invert numerically") {
  DisplacementField f;
  f.dims = {8, 8, 8};
  f.spacing = {1, 1, 1};
  for (int c = 0; c < 3; ++c) {
    f.offsets[c] = Array3<float>(f.dims);
    for (int k = 0; k < 8; ++k)
      for (int j = 0; j < 8; ++j)
        for (int i = 0; i < 8; ++i)
          f.offsets[c].at(k, j, i) = static_cast<float>(
              0.5 * std::sin(0.7 * k + 0.3 * j + 0.9 * i + c));
  }
  const Transform t = Transform::from_field(f);
  Rng rng(4);
  for (int n = 0; n < 15; ++n) {
    const Vec3 p(rng.uniform(1, 6), rng.uniform(1, 6), rng.uniform(1, 6));
    const Vec3 x = apply_point(t, p);
    const Vec3 back = invert_point(t, x);
    CHECK((back - p).norm() < 1e-6);
  }
  // Outside the grid the field is zero: pure base affine.
  const Vec3 far(100, 100, 100);
  CHECK((apply_point(t, far) - far).norm() == 0.0);
}

TEST_CASE("mean displacement of a unit translation is one voxel") {
  AffineParams p;
  p.translation = {0.0, 0.0, 2.0};  // physical units; spacing x = 2 below
  const AffineTransform a = make_affine(p, Vec3::Zero());
  const double md = mean_displacement_voxels(
      Transform::from_affine(a),
      Transform::from_affine(AffineTransform::identity()), {4, 4, 4},
      {1.0, 1.0, 2.0});
  CHECK(md == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("resampling through identity reproduces the volume") {
  Rng rng(5);
  Volume v;
  v.voxels = Array3<double>({6, 5, 4});
  for (std::size_t n = 0; n < v.voxels.size(); ++n) v.voxels[n] = rng.uniform();
  const Volume r = resample(
      v, Transform::from_affine(AffineTransform::identity()), GridSpec::like(v));
  for (std::size_t n = 0; n < v.voxels.size(); ++n)
    CHECK(r.voxels[n] == doctest::Approx(v.voxels[n]).epsilon(1e-12));
}

TEST_CASE("integer translations shift voxels exactly") {
  Volume v = blob_volume({12, 12, 12}, Vec3(6, 6, 6), 2.5);
  AffineParams p;
  p.translation = {2.0, 0.0, -1.0};  // maps source z+2, x-1
  const Transform t = Transform::from_affine(make_affine(p, Vec3::Zero()));
  const Volume r = resample(v, t, GridSpec::like(v));
  for (int k = 3; k < 10; ++k)
    for (int j = 1; j < 11; ++j)
      for (int i = 1; i < 10; ++i)
        CHECK(r.voxels.at(k, j, i) ==
              doctest::Approx(v.voxels.at(k - 2, j, i + 1)).epsilon(1e-12));
}

TEST_CASE("label resampling never invents classes") {
  Rng rng(6);
  LabelMap m;
  m.num_classes = 4;
  m.voxels = Array3<std::int32_t>({10, 10, 10});
  for (std::size_t n = 0; n < m.voxels.size(); ++n)
    m.voxels[n] = static_cast<std::int32_t>(rng.uniform_int(3) == 0 ? 3 : 1);
  AffineParams p = random_params(rng, 0.4);
  const Transform t = Transform::from_affine(make_affine(p, Vec3(5, 5, 5)));
  const LabelMap r = resample(m, t, GridSpec::like(m));
  for (std::size_t n = 0; n < r.voxels.size(); ++n) {
    const std::int32_t c = r.voxels[n];
    CHECK(c >= 0);
    CHECK(c <= 3);
    CHECK(c != 2);  // absent from the source stays absent
  }
}

TEST_CASE("mutual information behaves as an information measure") {
  Rng rng(7);
  Volume a = blob_volume({16, 16, 16}, Vec3(8, 7, 9), 4.0);

  SUBCASE("self MI is 1 for a non-constant image") {
    CHECK(mutual_information(a.voxels, a.voxels) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("independent noise has near-zero MI") {
    Array3<double> n1({24, 24, 24}), n2({24, 24, 24});
    for (std::size_t n = 0; n < n1.size(); ++n) {
      n1[n] = rng.uniform();
      n2[n] = rng.uniform();
    }
    CHECK(mutual_information(n1, n2) < 0.05);
  }
  SUBCASE("symmetry is bit-exact") {
    Array3<double> b({16, 16, 16});
    for (std::size_t n = 0; n < b.size(); ++n)
      b[n] = a.voxels[n] * 0.5 + rng.uniform() * 0.3;
    CHECK(mutual_information(a.voxels, b) == mutual_information(b, a.voxels));
  }
  SUBCASE("constant images give zero by convention") {
    Array3<double> c({16, 16, 16}, 0.7);
    CHECK(mutual_information(c, a.voxels) == 0.0);
    CHECK(mutual_information(a.voxels, c) == 0.0);
    CHECK(mutual_information(c, c) == 0.0);
  }
  SUBCASE("size mismatch is an error") {
    Array3<double> small({2, 2, 2});
    CHECK_THROWS_AS(mutual_information(a.voxels, small),
                    std::invalid_argument);
  }
}

TEST_CASE("rmse matches the brute-force loop") {
  Rng rng(8);
  Array3<double> a({9, 8, 7}), b({9, 8, 7});
  for (std::size_t n = 0; n < a.size(); ++n) {
    a[n] = rng.uniform();
    b[n] = rng.uniform();
  }
  CHECK(rmse(a, b) == doctest::Approx(oracle::rmse_ref(a, b)).epsilon(1e-14));
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(a, b) == rmse(b, a));
}

TEST_CASE("transform table stores, reloads, and rejects missing pairs") {
  const fs::path dir = fs::temp_directory_path() / "regseg_spatreg";
  fs::create_directories(dir);
  Rng rng(9);

  TransformTable t(4);
  const AffineTransform a = make_affine(random_params(rng), Vec3(3, 3, 3));
  t.set(0, 1, Transform::from_affine(a));
  DisplacementField f;
  f.base = make_affine(random_params(rng, 0.3), Vec3(2, 2, 2));
  f.dims = {4, 4, 4};
  f.spacing = {1, 1, 2};
  for (int c = 0; c < 3; ++c) {
    f.offsets[c] = Array3<float>(f.dims);
    for (std::size_t n = 0; n < f.offsets[c].size(); ++n)
      f.offsets[c][n] = static_cast<float>(rng.uniform(-1, 1));
  }
  t.set(2, 3, Transform::from_field(f));
  REQUIRE(t.entries() == 2);

  const std::string path = (dir / "transforms.bin").string();
  t.save(path, "{\"metric\":\"mi\"}");
  std::string cfg;
  const TransformTable r = TransformTable::load(path, &cfg);
  CHECK(cfg == "{\"metric\":\"mi\"}");
  CHECK(r.size() == 4);
  CHECK(r.entries() == 2);
  REQUIRE(r.has(0, 1));
  REQUIRE(r.has(2, 3));
  CHECK_FALSE(r.has(1, 0));
  CHECK_THROWS_AS(r.get(1, 0), std::out_of_range);

  CHECK((r.get(0, 1).affine.m - a.m).cwiseAbs().maxCoeff() == 0.0);
  const Transform& rf = r.get(2, 3);
  REQUIRE(rf.kind == Transform::Kind::field);
  CHECK((rf.field.base.m - f.base.m).cwiseAbs().maxCoeff() == 0.0);
  for (int c = 0; c < 3; ++c)
    for (std::size_t n = 0; n < f.offsets[c].size(); ++n)
      CHECK(rf.field.offsets[c][n] == f.offsets[c][n]);

  // A field entry applies through the shared point interface.
  const Vec3 p(1.5, 2.0, 2.5);
  CHECK((apply_point(rf, p) - apply_point(Transform::from_field(f), p))
            .norm() == 0.0);
}
