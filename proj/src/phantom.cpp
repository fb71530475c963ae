// phantom.cpp — see phantom.hpp.
#include "regseg/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "regseg/resample.hpp"

namespace regseg {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Tube centreline at parameter t in [0,1], normalized coords.
Vec3 tube_center(const PhantomSpec& s, double t) {
  return Vec3(s.tube_z0 + (s.tube_z1 - s.tube_z0) * t,
              s.tube_y + s.tube_bend_y * std::sin(M_PI * t),
              s.tube_x + s.tube_bend_x * std::sin(2.0 * M_PI * t));
}

bool in_outer_ellipsoid(const PhantomSpec& s, const Vec3& q, double scale) {
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (q[a] - s.ellipsoid_center[a]) / (s.ellipsoid_semi[a] * scale);
    acc += d * d;
  }
  return acc <= 1.0;
}

bool in_tube(const PhantomSpec& s, const Vec3& q) {
  if (q[0] < s.tube_z0 || q[0] > s.tube_z1) return false;
  const double t = (q[0] - s.tube_z0) / (s.tube_z1 - s.tube_z0);
  const Vec3 c = tube_center(s, t);
  const double dy = q[1] - c[1], dx = q[2] - c[2];
  return dy * dy + dx * dx <= s.tube_radius * s.tube_radius;
}

// One pass of 3^3 box smoothing with edge clamping.
Array3<double> box_smooth(const Array3<double>& a) {
  const Dims d = a.dims();
  Array3<double> out(d);
  for (int k = 0; k < d[0]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[2]; ++i) {
        double acc = 0.0;
        for (int dk = -1; dk <= 1; ++dk)
          for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
              const int kk = std::clamp(k + dk, 0, d[0] - 1);
              const int jj = std::clamp(j + dj, 0, d[1] - 1);
              const int ii = std::clamp(i + di, 0, d[2] - 1);
              acc += a.at(kk, jj, ii);
            }
        out.at(k, j, i) = acc / 27.0;
      }
  return out;
}

bool foreground_touches_border(const LabelMap& m) {
  const Dims d = m.dims();
  for (int k = 0; k < d[0]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[2]; ++i) {
        const bool border = k == 0 || j == 0 || i == 0 || k == d[0] - 1 ||
                            j == d[1] - 1 || i == d[2] - 1;
        if (border && m.voxels.at(k, j, i) != 0) return true;
      }
  return false;
}

std::vector<std::size_t> class_counts(const LabelMap& m, int num_classes) {
  std::vector<std::size_t> n(num_classes, 0);
  for (std::size_t q = 0; q < m.voxels.size(); ++q) ++n[m.voxels[q]];
  return n;
}

std::string case_id(int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "case_%03d", n);
  return buf;
}

}  // namespace

TemplatePhantom generate_template(const PhantomSpec& spec, Rng& rng) {
  if (spec.num_classes != 4)
    throw std::invalid_argument("generate_template: geometry defines 4 classes");
  if (spec.intensity_mean.size() != 4 || spec.intensity_std.size() != 4)
    throw std::invalid_argument("generate_template: need 4 intensity entries");

  const Dims d = spec.dims;
  TemplatePhantom t;
  t.lab.id = "template";
  t.lab.spacing = spec.spacing;
  t.lab.num_classes = 4;
  t.lab.voxels = Array3<std::int32_t>(d);

  std::size_t tube_n = 0, overlap_n = 0;
  for (int k = 0; k < d[0]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[2]; ++i) {
        const Vec3 q(static_cast<double>(k) / (d[0] - 1),
                     static_cast<double>(j) / (d[1] - 1),
                     static_cast<double>(i) / (d[2] - 1));
        const bool outer = in_outer_ellipsoid(spec, q, 1.0);
        const bool core = in_outer_ellipsoid(spec, q, spec.core_scale);
        const bool tube = in_tube(spec, q);
        if (tube) {
          ++tube_n;
          if (outer) ++overlap_n;
        }
        std::int32_t c = 0;
        if (core)
          c = 2;
        else if (outer)
          c = 1;
        else if (tube)
          c = 3;
        t.lab.voxels.at(k, j, i) = c;
      }

  if (tube_n > 0 &&
      static_cast<double>(overlap_n) / static_cast<double>(tube_n) >
          spec.overlap_tolerance)
    throw std::runtime_error(
        "generate_template: tube collides with ellipsoid beyond tolerance");
  if (foreground_touches_border(t.lab))
    throw std::runtime_error("generate_template: structure touches boundary");
  const auto counts = class_counts(t.lab, 4);
  for (int c = 0; c < 4; ++c)
    if (counts[c] == 0)
      throw std::runtime_error("generate_template: class with zero voxels");

  t.vol.id = "template";
  t.vol.spacing = spec.spacing;
  t.vol.voxels = Array3<double>(d);
  for (std::size_t q = 0; q < t.vol.voxels.size(); ++q) {
    const int c = t.lab.voxels[q];
    t.vol.voxels[q] = spec.intensity_mean[c] + spec.intensity_std[c] * rng.normal();
  }
  t.vol.voxels = box_smooth(box_smooth(t.vol.voxels));
  for (std::size_t q = 0; q < t.vol.voxels.size(); ++q)
    t.vol.voxels[q] = std::clamp(t.vol.voxels[q], 0.0, 1.0);
  return t;
}

CohortCase derive_case(const TemplatePhantom& tmpl, const PhantomSpec& spec,
                       double severity, Rng& rng, const std::string& id) {
  const Dims d = spec.dims;
  const GridSpec grid{d, spec.spacing};
  const Vec3 center = grid_center(d, spec.spacing);
  const WarpSpec& w = spec.warp;

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    AffineParams ap;
    for (int a = 0; a < 3; ++a) {
      ap.translation[a] =
          rng.uniform(-w.translation, w.translation) * severity * spec.spacing[a];
      ap.rotation[a] = rng.uniform(-w.rotation, w.rotation) * severity;
      ap.log_scale[a] = rng.uniform(-w.log_scale, w.log_scale) * severity;
      ap.shear[a] = rng.uniform(-w.shear, w.shear) * severity;
    }
    const AffineTransform aff = make_affine(ap, center);

    Transform gt;
    if (w.deform_amp > 0.0) {
      DisplacementField f;
      f.base = aff;
      f.dims = d;
      f.spacing = spec.spacing;
      double phase[3][3];
      for (int c = 0; c < 3; ++c)
        for (int a = 0; a < 3; ++a) phase[c][a] = rng.uniform(0.0, 2.0 * M_PI);
      for (int c = 0; c < 3; ++c) {
        f.offsets[c] = Array3<float>(d);
        const double amp = w.deform_amp * severity * spec.spacing[c];
        for (int k = 0; k < d[0]; ++k)
          for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[2]; ++i) {
              const double sz = std::sin(2.0 * M_PI * w.deform_periods * k /
                                             (d[0] - 1) + phase[c][0]);
              const double sy = std::sin(2.0 * M_PI * w.deform_periods * j /
                                             (d[1] - 1) + phase[c][1]);
              const double sx = std::sin(2.0 * M_PI * w.deform_periods * i /
                                             (d[2] - 1) + phase[c][2]);
              f.offsets[c].at(k, j, i) = static_cast<float>(amp * sz * sy * sx);
            }
      }
      gt = Transform::from_field(std::move(f));
    } else {
      gt = Transform::from_affine(aff);
    }

    LabelMap lab = resample(tmpl.lab, gt, grid);
    lab.id = id;
    if (foreground_touches_border(lab)) continue;  // redraw the warp
    const auto counts = class_counts(lab, 4);
    bool all_present = true;
    for (int c = 0; c < 4; ++c) all_present &= counts[c] > 0;
    if (!all_present) continue;

    Volume vol = resample(tmpl.vol, gt, grid);
    vol.id = id;
    // Fresh bias field and voxel noise per case.
    double bphase[3];
    for (int a = 0; a < 3; ++a) bphase[a] = rng.uniform(0.0, 2.0 * M_PI);
    for (int k = 0; k < d[0]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[2]; ++i) {
          const double bias =
              1.0 + spec.bias_amp / 3.0 *
                        (std::sin(2.0 * M_PI * k / (d[0] - 1) + bphase[0]) +
                         std::sin(2.0 * M_PI * j / (d[1] - 1) + bphase[1]) +
                         std::sin(2.0 * M_PI * i / (d[2] - 1) + bphase[2]));
          double v = vol.voxels.at(k, j, i) * bias +
                     rng.normal(0.0, spec.noise_std);
          vol.voxels.at(k, j, i) = std::clamp(v, 0.0, 1.0);
        }

    CohortCase out;
    out.vol = std::move(vol);
    out.lab = std::move(lab);
    out.gt = std::move(gt);
    out.severity = severity;
    return out;
  }
  throw std::runtime_error("derive_case: no in-bounds warp after retries (" +
                           id + ")");
}

Cohort build_cohort(const PhantomSpec& spec, int n_train, int n_labeled,
                    int n_test, std::uint64_t seed) {
  if (n_labeled < 1 || n_labeled > n_train)
    throw std::invalid_argument("build_cohort: n_labeled out of range");
  Cohort c;
  c.spec = spec;
  Rng root(seed);
  Rng trng = root.child("template");
  c.tmpl = generate_template(spec, trng);
  for (int n = 0; n < n_train + n_test; ++n) {
    Rng crng = root.child(case_id(n));
    const double sev =
        crng.uniform(spec.warp.severity_min, spec.warp.severity_max);
    CohortCase cc = derive_case(c.tmpl, spec, sev, crng, case_id(n));
    if (n < n_train)
      c.train.push_back(std::move(cc));
    else
      c.test.push_back(std::move(cc));
  }
  for (int n = 0; n < n_labeled; ++n) c.labeled.push_back(n);
  return c;
}

void save_cohort(const Cohort& c, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "train");
  fs::create_directories(fs::path(dir) / "test");
  fs::create_directories(fs::path(dir) / "oracle" / "labels");

  json manifest;
  manifest["dims"] = {c.spec.dims[0], c.spec.dims[1], c.spec.dims[2]};
  manifest["spacing"] = {c.spec.spacing[0], c.spec.spacing[1],
                         c.spec.spacing[2]};
  manifest["num_classes"] = c.spec.num_classes;
  json train_ids = json::array(), test_ids = json::array();
  json labeled_ids = json::array();

  json oracle;
  for (std::size_t n = 0; n < c.train.size(); ++n) {
    const CohortCase& cc = c.train[n];
    const std::string stem = (fs::path(dir) / "train" / cc.vol.id).string();
    save_volume(cc.vol, stem + ".vol.bin");
    const bool is_labeled =
        std::find(c.labeled.begin(), c.labeled.end(), static_cast<int>(n)) !=
        c.labeled.end();
    if (is_labeled) {
      save_labels(cc.lab, stem + ".lab.bin");
      labeled_ids.push_back(cc.vol.id);
    } else {
      save_labels(cc.lab, (fs::path(dir) / "oracle" / "labels" /
                           (cc.lab.id + ".lab.bin")).string());
    }
    train_ids.push_back(cc.vol.id);

    json oc;
    oc["severity"] = cc.severity;
    oc["deformed"] = cc.gt.kind == Transform::Kind::field;
    const AffineTransform& a = cc.gt.kind == Transform::Kind::affine
                                   ? cc.gt.affine
                                   : cc.gt.field.base;
    json mat = json::array();
    for (int r = 0; r < 4; ++r)
      for (int q = 0; q < 4; ++q) mat.push_back(a.m(r, q));
    oc["affine"] = mat;
    oracle[cc.vol.id] = oc;
  }
  for (const CohortCase& cc : c.test) {
    const std::string stem = (fs::path(dir) / "test" / cc.vol.id).string();
    save_volume(cc.vol, stem + ".vol.bin");
    save_labels(cc.lab, stem + ".lab.bin");
    test_ids.push_back(cc.vol.id);
    json oc;
    oc["severity"] = cc.severity;
    oc["deformed"] = cc.gt.kind == Transform::Kind::field;
    oracle[cc.vol.id] = oc;
  }
  manifest["train"] = train_ids;
  manifest["test"] = test_ids;
  manifest["labeled"] = labeled_ids;

  std::ofstream mf(fs::path(dir) / "cohort.json");
  mf << manifest.dump(2) << "\n";
  std::ofstream of(fs::path(dir) / "oracle" / "oracle.json");
  of << oracle.dump(2) << "\n";
}

CohortOnDisk load_cohort(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "cohort.json");
  if (!mf) throw std::runtime_error("load_cohort: no manifest in " + dir);
  json manifest;
  mf >> manifest;

  CohortOnDisk out;
  out.dims = {manifest["dims"][0], manifest["dims"][1], manifest["dims"][2]};
  out.spacing = {manifest["spacing"][0], manifest["spacing"][1],
                 manifest["spacing"][2]};
  const int num_classes = manifest["num_classes"];
  out.train.num_classes = num_classes;
  out.test.num_classes = num_classes;

  std::vector<std::string> labeled_ids =
      manifest["labeled"].get<std::vector<std::string>>();
  auto is_labeled = [&](const std::string& id) {
    return std::find(labeled_ids.begin(), labeled_ids.end(), id) !=
           labeled_ids.end();
  };

  json oracle;
  {
    std::ifstream of(fs::path(dir) / "oracle" / "oracle.json");
    if (of) of >> oracle;
  }

  for (const auto& idj : manifest["train"]) {
    const std::string id = idj.get<std::string>();
    const std::string stem = (fs::path(dir) / "train" / id).string();
    out.train.volumes.push_back(load_volume(stem + ".vol.bin"));
    const int v = static_cast<int>(out.train.volumes.size()) - 1;
    if (is_labeled(id)) {
      out.train.labels.push_back(load_labels(stem + ".lab.bin"));
      out.train.labeled.push_back(v);
      out.oracle_labels.push_back(out.train.labels.back());
    } else {
      out.train.labels.emplace_back();
      out.train.unlabeled.push_back(v);
      const std::string opath =
          (fs::path(dir) / "oracle" / "labels" / (id + ".lab.bin")).string();
      out.oracle_labels.push_back(fs::exists(opath) ? load_labels(opath)
                                                    : LabelMap{});
    }
    out.train_ids.push_back(id);
    out.severities.push_back(
        oracle.contains(id) ? oracle[id].value("severity", 0.0) : 0.0);
  }
  for (const auto& idj : manifest["test"]) {
    const std::string id = idj.get<std::string>();
    const std::string stem = (fs::path(dir) / "test" / id).string();
    out.test.volumes.push_back(load_volume(stem + ".vol.bin"));
    out.test.labels.push_back(load_labels(stem + ".lab.bin"));
    out.test.labeled.push_back(static_cast<int>(out.test.volumes.size()) - 1);
    out.test_ids.push_back(id);
  }
  return out;
}

}  // namespace regseg
