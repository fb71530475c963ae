// registration.hpp — intensity-driven affine alignment between volumes.
//
// Derivative-free: cyclic coordinate descent over the twelve pose
// parameters, each refined by golden-section line search, run coarse to
// fine over a two-level pyramid. The similarity metric (normalized MI or
// negative RMSE) is evaluated by resampling the moving volume onto the
// fixed grid, so the returned transform maps moving physical coordinates
// to fixed physical coordinates.
#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "regseg/geometry.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct RegistrationConfig {
  enum class Metric { mi, rmse } metric = Metric::mi;
  int bins = 32;            // MI histogram bins
  int levels = 2;           // pyramid depth; level L downsamples by 2^L
  int sweeps_per_level = 5; // coordinate-descent passes
  int line_search_iters = 14;
  int restarts = 2;         // extra perturbed starts, scored at coarse level
  double tol = 1e-5;        // stop a level when a sweep improves less
  std::uint64_t seed = 0;
  int max_evals = 60000;    // hard budget; exceeding it flags non-convergence
  // Initial line-search half-widths per parameter group, shrunk each sweep.
  double step_translation = 4.0;  // voxels
  double step_rotation = 0.3;     // radians
  double step_log_scale = 0.15;
  double step_shear = 0.12;

  static RegistrationConfig from_json(const std::string& text);
  std::string to_json() const;
};

struct RegistrationResult {
  AffineTransform transform;  // moving -> fixed
  double score = 0.0;         // metric value at the optimum (higher better)
  int evaluations = 0;
  bool converged = false;
};

/// Align moving onto fixed. Deterministic in (inputs, cfg.seed).
RegistrationResult register_affine(const Volume& fixed, const Volume& moving,
                                   const RegistrationConfig& cfg);

/// Average over moving-grid voxels of how far the recovered map lands from
/// the reference map, in voxels of the fixed grid.
double registration_error_voxels(const AffineTransform& recovered,
                                 const Transform& reference,
                                 const Dims& moving_dims,
                                 const Spacing& moving_spacing);

/// Pairwise table over a cohort. `pairs` lists the ordered (moving, fixed)
/// index pairs to register; the helper below builds the usual choices.
TransformTable build_transform_table(
    const std::vector<Volume>& volumes,
    const std::vector<std::pair<int, int>>& pairs,
    const RegistrationConfig& cfg,
    const std::function<void(int, int, const RegistrationResult&)>& on_pair =
        nullptr);

/// All ordered pairs (i != j), or only pairs where exactly one side is
/// labeled (both directions) — the subset cross-teaching training consumes.
std::vector<std::pair<int, int>> all_pairs(int n);
std::vector<std::pair<int, int>> labeled_cross_pairs(
    int n, const std::vector<int>& labeled);

}  // namespace regseg
