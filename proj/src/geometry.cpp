// geometry.cpp — transform algebra and the pairwise table container.
#include "regseg/geometry.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "regseg/prng.hpp"

namespace regseg {

AffineTransform make_affine(const AffineParams& p, const Vec3& center) {
  // Rotations named by the axis they leave fixed, acting in (z,y,x) space.
  const double cz = std::cos(p.rotation[0]), sz = std::sin(p.rotation[0]);
  const double cy = std::cos(p.rotation[1]), sy = std::sin(p.rotation[1]);
  const double cx = std::cos(p.rotation[2]), sx = std::sin(p.rotation[2]);

  Eigen::Matrix3d rz, ry, rx;
  // about z: mixes (y, x)
  rz << 1, 0, 0,
        0, cz, -sz,
        0, sz, cz;
  // about y: mixes (z, x)
  ry << cy, 0, -sy,
        0, 1, 0,
        sy, 0, cy;
  // about x: mixes (z, y)
  rx << cx, -sx, 0,
        sx, cx, 0,
        0, 0, 1;
  const Eigen::Matrix3d rot = rz * ry * rx;

  Eigen::Matrix3d sh = Eigen::Matrix3d::Identity();
  sh(1, 0) = p.shear[0];  // y += shear_zy * z
  sh(2, 0) = p.shear[1];  // x += shear_zx * z
  sh(2, 1) = p.shear[2];  // x += shear_yx * y

  const Eigen::Vector3d scale(std::exp(p.log_scale[0]),
                              std::exp(p.log_scale[1]),
                              std::exp(p.log_scale[2]));
  const Eigen::Matrix3d lin = rot * sh * scale.asDiagonal();

  const Vec3 t(p.translation[0], p.translation[1], p.translation[2]);
  AffineTransform out;
  out.m.topLeftCorner<3, 3>() = lin;
  out.m.topRightCorner<3, 1>() = t + center - lin * center;
  return out;
}

Vec3 grid_center(const Dims& dims, const Spacing& spacing) {
  return Vec3(0.5 * (dims[0] - 1) * spacing[0],
              0.5 * (dims[1] - 1) * spacing[1],
              0.5 * (dims[2] - 1) * spacing[2]);
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  AffineTransform out;
  out.m = a.m * b.m;
  return out;
}

AffineTransform invert(const AffineTransform& a) {
  const Eigen::Matrix3d lin = a.m.topLeftCorner<3, 3>();
  if (std::abs(lin.determinant()) < 1e-12)
    throw std::invalid_argument("invert: singular linear part");
  const Eigen::Matrix3d inv = lin.inverse();
  AffineTransform out;
  out.m.topLeftCorner<3, 3>() = inv;
  out.m.topRightCorner<3, 1>() = -inv * a.m.topRightCorner<3, 1>();
  return out;
}

Vec3 DisplacementField::offset_at(const Vec3& q) const {
  // Voxel-space position on the target grid.
  const double vz = q[0] / spacing[0];
  const double vy = q[1] / spacing[1];
  const double vx = q[2] / spacing[2];
  if (vz < 0 || vy < 0 || vx < 0 || vz > dims[0] - 1 || vy > dims[1] - 1 ||
      vx > dims[2] - 1)
    return Vec3::Zero();
  const int k0 = std::min(static_cast<int>(vz), dims[0] - 2 >= 0 ? dims[0] - 2 : 0);
  const int j0 = std::min(static_cast<int>(vy), dims[1] - 2 >= 0 ? dims[1] - 2 : 0);
  const int i0 = std::min(static_cast<int>(vx), dims[2] - 2 >= 0 ? dims[2] - 2 : 0);
  const double fz = vz - k0, fy = vy - j0, fx = vx - i0;
  Vec3 out = Vec3::Zero();
  for (int c = 0; c < 3; ++c) {
    const Array3<float>& f = offsets[c];
    auto v = [&](int dk, int dj, int di) -> double {
      const int k = std::min(k0 + dk, dims[0] - 1);
      const int j = std::min(j0 + dj, dims[1] - 1);
      const int i = std::min(i0 + di, dims[2] - 1);
      return f.at(k, j, i);
    };
    const double c00 = v(0, 0, 0) * (1 - fx) + v(0, 0, 1) * fx;
    const double c01 = v(0, 1, 0) * (1 - fx) + v(0, 1, 1) * fx;
    const double c10 = v(1, 0, 0) * (1 - fx) + v(1, 0, 1) * fx;
    const double c11 = v(1, 1, 0) * (1 - fx) + v(1, 1, 1) * fx;
    const double c0 = c00 * (1 - fy) + c01 * fy;
    const double c1 = c10 * (1 - fy) + c11 * fy;
    out[c] = c0 * (1 - fz) + c1 * fz;
  }
  return out;
}

Vec3 apply_point(const Transform& t, const Vec3& p) { return t.apply(p); }

Transform compose(const Transform& a, const Transform& b) {
  if (a.kind != Transform::Kind::affine || b.kind != Transform::Kind::affine)
    throw std::invalid_argument(
        "compose: displacement-field composition is not supported");
  return Transform::from_affine(compose(a.affine, b.affine));
}

Transform invert(const Transform& t) {
  if (t.kind != Transform::Kind::affine)
    throw std::invalid_argument(
        "invert: displacement fields have no closed-form inverse");
  return Transform::from_affine(invert(t.affine));
}

double mean_displacement_voxels(const Transform& t1, const Transform& t2,
                                const Dims& dims, const Spacing& spacing) {
  double acc = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < dims[0]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[2]; ++i) {
        const Vec3 p(k * spacing[0], j * spacing[1], i * spacing[2]);
        const Vec3 d = t1.apply(p) - t2.apply(p);
        const double dz = d[0] / spacing[0];
        const double dy = d[1] / spacing[1];
        const double dx = d[2] / spacing[2];
        acc += std::sqrt(dz * dz + dy * dy + dx * dx);
        ++n;
      }
  return acc / static_cast<double>(n);
}

// ---- TransformTable ------------------------------------------------------

namespace {
constexpr char kTblMagic[4] = {'R', 'T', 'B', 'L'};
constexpr std::uint32_t kTblVersion = 1;

template <class T>
void put_raw(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void get_raw(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

const Transform& TransformTable::get(int i, int j) const {
  const auto& c = cells_[slot(i, j)];
  if (!c)
    throw std::out_of_range("TransformTable: no entry for requested pair");
  return *c;
}

int TransformTable::entries() const {
  int n = 0;
  for (const auto& c : cells_)
    if (c) ++n;
  return n;
}

void TransformTable::save(const std::string& path,
                          const std::string& config_json) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("TransformTable::save: cannot open " + path);
  os.write(kTblMagic, 4);
  put_raw(os, kTblVersion);
  put_raw(os, static_cast<std::uint32_t>(n_));
  put_raw(os, static_cast<std::uint32_t>(entries()));
  put_raw(os, static_cast<std::uint64_t>(hash_tag(config_json)));
  put_raw(os, static_cast<std::uint32_t>(config_json.size()));
  os.write(config_json.data(),
           static_cast<std::streamsize>(config_json.size()));
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) {
      const auto& c = cells_[slot(i, j)];
      if (!c) continue;
      put_raw(os, static_cast<std::uint32_t>(i));
      put_raw(os, static_cast<std::uint32_t>(j));
      const std::uint8_t kind = c->kind == Transform::Kind::affine ? 0 : 1;
      put_raw(os, kind);
      const AffineTransform& a =
          c->kind == Transform::Kind::affine ? c->affine : c->field.base;
      for (int r = 0; r < 4; ++r)
        for (int cc = 0; cc < 4; ++cc) put_raw(os, a.m(r, cc));
      if (c->kind == Transform::Kind::field) {
        const DisplacementField& f = c->field;
        for (int a3 = 0; a3 < 3; ++a3)
          put_raw(os, static_cast<std::uint32_t>(f.dims[a3]));
        for (int a3 = 0; a3 < 3; ++a3) put_raw(os, f.spacing[a3]);
        for (int comp = 0; comp < 3; ++comp)
          os.write(reinterpret_cast<const char*>(f.offsets[comp].data()),
                   static_cast<std::streamsize>(f.offsets[comp].size() *
                                                sizeof(float)));
      }
    }
  if (!os) throw std::runtime_error("TransformTable::save: write failed");
}

TransformTable TransformTable::load(const std::string& path,
                                    std::string* config_json) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("TransformTable::load: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTblMagic, 4) != 0)
    throw std::runtime_error(path + ": not an RTBL container");
  std::uint32_t ver = 0;
  get_raw(is, ver);
  if (ver != kTblVersion)
    throw std::runtime_error(path + ": unsupported table version");
  std::uint32_t n = 0, n_entries = 0;
  get_raw(is, n);
  get_raw(is, n_entries);
  std::uint64_t cfg_hash = 0;
  std::uint32_t cfg_len = 0;
  get_raw(is, cfg_hash);
  get_raw(is, cfg_len);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  if (hash_tag(cfg) != cfg_hash)
    throw std::runtime_error(path + ": config hash mismatch");
  if (config_json) *config_json = cfg;

  TransformTable t(static_cast<int>(n));
  for (std::uint32_t e = 0; e < n_entries; ++e) {
    std::uint32_t i = 0, j = 0;
    std::uint8_t kind = 0;
    get_raw(is, i);
    get_raw(is, j);
    get_raw(is, kind);
    AffineTransform a;
    for (int r = 0; r < 4; ++r)
      for (int cc = 0; cc < 4; ++cc) get_raw(is, a.m(r, cc));
    if (kind == 0) {
      t.set(static_cast<int>(i), static_cast<int>(j),
            Transform::from_affine(a));
    } else {
      DisplacementField f;
      f.base = a;
      for (int a3 = 0; a3 < 3; ++a3) {
        std::uint32_t d = 0;
        get_raw(is, d);
        f.dims[a3] = static_cast<int>(d);
      }
      for (int a3 = 0; a3 < 3; ++a3) get_raw(is, f.spacing[a3]);
      for (int comp = 0; comp < 3; ++comp) {
        f.offsets[comp] = Array3<float>(f.dims);
        is.read(reinterpret_cast<char*>(f.offsets[comp].data()),
                static_cast<std::streamsize>(f.offsets[comp].size() *
                                             sizeof(float)));
      }
      t.set(static_cast<int>(i), static_cast<int>(j),
            Transform::from_field(std::move(f)));
    }
  }
  if (!is) throw std::runtime_error(path + ": truncated table");
  return t;
}

}  // namespace regseg
