// phantom.hpp — procedural cohorts with exact ground truth.
//
// A cohort is built from one template: nested ellipsoids (shell + core) and
// a bent tube, four classes counting background. Each case is the template
// pushed through a known warp (affine about the grid centre, optionally
// plus a smooth sinusoidal displacement field), then given fresh noise and
// a multiplicative bias field. The warp, labels, and severity of every case
// are kept, so tests can score any downstream estimate against the truth.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regseg/geometry.hpp"
#include "regseg/prng.hpp"
#include "regseg/volume.hpp"

namespace regseg {

/// Warp magnitudes at severity 1; a draw at severity s scales them all by s.
/// Translations and the field amplitude are in voxels, rotations in radians.
struct WarpSpec {
  double severity_min = 0.3;
  double severity_max = 1.0;
  double translation = 2.0;
  double rotation = 0.2;
  double log_scale = 0.08;
  double shear = 0.05;
  double deform_amp = 1.2;      // 0 disables the field (pure affine cases)
  double deform_periods = 1.5;  // sinusoid periods across each axis
};

struct PhantomSpec {
  Dims dims{32, 32, 32};
  Spacing spacing{1.0, 1.0, 1.0};
  int num_classes = 4;  // fixed by the geometry: bg, shell, core, tube

  // Geometry in coordinates normalized to [0,1] per axis (z, y, x).
  Vec3 ellipsoid_center{0.48, 0.46, 0.42};
  Vec3 ellipsoid_semi{0.28, 0.25, 0.22};
  double core_scale = 0.55;  // inner surface = outer semi-axes * core_scale
  double tube_z0 = 0.20, tube_z1 = 0.80;
  double tube_y = 0.52, tube_x = 0.76;
  double tube_bend_y = 0.06, tube_bend_x = 0.04;
  double tube_radius = 0.055;

  std::vector<double> intensity_mean{0.03, 0.42, 0.78, 0.55};
  std::vector<double> intensity_std{0.02, 0.03, 0.03, 0.03};
  double noise_std = 0.05;
  double bias_amp = 0.15;

  /// Analytic tube/ellipsoid overlap allowed, as a fraction of tube voxels.
  double overlap_tolerance = 0.0;
  WarpSpec warp;
  int max_retries = 20;
};

struct TemplatePhantom {
  Volume vol;
  LabelMap lab;
};

struct CohortCase {
  Volume vol;
  LabelMap lab;        // exact ground truth
  Transform gt;        // template physical coords -> case physical coords
  double severity = 0.0;
};

struct Cohort {
  PhantomSpec spec;
  TemplatePhantom tmpl;
  std::vector<CohortCase> train;
  std::vector<CohortCase> test;
  std::vector<int> labeled;  // indices into train, ascending
};

/// Label geometry + textured intensities. Throws when structures collide
/// beyond tolerance or touch the boundary shell.
TemplatePhantom generate_template(const PhantomSpec& spec, Rng& rng);

/// One warped case. Redraws the warp (deterministically) when foreground
/// would leave the field of view; throws after spec.max_retries attempts.
CohortCase derive_case(const TemplatePhantom& tmpl, const PhantomSpec& spec,
                       double severity, Rng& rng, const std::string& id);

/// Template plus n_train + n_test cases; the first n_labeled train cases
/// are the labeled ones. Fully determined by (spec, seed).
Cohort build_cohort(const PhantomSpec& spec, int n_train, int n_labeled,
                    int n_test, std::uint64_t seed);

// ---- directory form ------------------------------------------------------
// dir/cohort.json               manifest: ids, labeled ids, grid, counts
// dir/train/<id>.vol.bin        all train volumes; .lab.bin only if labeled
// dir/test/<id>.vol.bin+.lab.bin
// dir/oracle/oracle.json        per-case severity and warp (affine part)
// dir/oracle/labels/<id>.lab.bin   truth for unlabeled train cases

void save_cohort(const Cohort& c, const std::string& dir);

/// What a training run is allowed to see, plus the oracle block for tests.
struct CohortOnDisk {
  Dataset train;
  Dataset test;  // every test case carries labels
  std::vector<std::string> train_ids, test_ids;
  std::vector<LabelMap> oracle_labels;  // per train volume; loaded for all
  std::vector<double> severities;       // per train volume
  Dims dims{0, 0, 0};
  Spacing spacing{1, 1, 1};
};

CohortOnDisk load_cohort(const std::string& dir);

}  // namespace regseg
