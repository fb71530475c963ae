// registration.cpp — see registration.hpp.
#include "regseg/registration.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "regseg/prng.hpp"
#include "regseg/resample.hpp"
#include "regseg/similarity.hpp"

namespace regseg {
namespace {

using nlohmann::json;

// 2x downsample by averaging 2^3 blocks (odd tails clamp).
Volume halve(const Volume& v) {
  const Dims d = v.dims();
  Volume out;
  out.id = v.id;
  const Dims hd{std::max(1, d[0] / 2), std::max(1, d[1] / 2),
                std::max(1, d[2] / 2)};
  out.spacing = {v.spacing[0] * d[0] / hd[0], v.spacing[1] * d[1] / hd[1],
                 v.spacing[2] * d[2] / hd[2]};
  out.voxels = Array3<double>(hd);
  for (int k = 0; k < hd[0]; ++k)
    for (int j = 0; j < hd[1]; ++j)
      for (int i = 0; i < hd[2]; ++i) {
        double acc = 0.0;
        int n = 0;
        for (int dk = 0; dk < 2; ++dk)
          for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
              const int kk = std::min(2 * k + dk, d[0] - 1);
              const int jj = std::min(2 * j + dj, d[1] - 1);
              const int ii = std::min(2 * i + di, d[2] - 1);
              acc += v.voxels.at(kk, jj, ii);
              ++n;
            }
        out.voxels.at(k, j, i) = acc / n;
      }
  return out;
}

struct Objective {
  const Volume& fixed;
  const Volume& moving;
  const RegistrationConfig& cfg;
  const Vec3 center;  // of the moving grid, fixed across levels
  int evals = 0;

  double operator()(const AffineParams& p) {
    ++evals;
    const AffineTransform t = make_affine(p, center);
    const Volume warped =
        resample(moving, Transform::from_affine(t), GridSpec::like(fixed));
    if (cfg.metric == RegistrationConfig::Metric::mi)
      return mutual_information(warped.voxels, fixed.voxels, cfg.bins);
    return -rmse(warped.voxels, fixed.voxels);
  }
};

// Golden-section maximization of f over [lo, hi]; returns best x seen.
template <class F>
double golden_max(F&& f, double lo, double hi, int iters, double* best_val) {
  constexpr double inv_phi = 0.6180339887498949;
  double a = lo, b = hi;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < iters; ++it) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = f(x1);
    }
  }
  if (f1 >= f2) {
    *best_val = f1;
    return x1;
  }
  *best_val = f2;
  return x2;
}

// Half-width of the search bracket for parameter index i at a given level.
double step_for(const RegistrationConfig& cfg, int i, double voxel,
                double shrink) {
  double s;
  if (i < 3)
    s = cfg.step_translation * voxel;
  else if (i < 6)
    s = cfg.step_rotation;
  else if (i < 9)
    s = cfg.step_log_scale;
  else
    s = cfg.step_shear;
  return s * shrink;
}

// Coordinate-descent sweeps at one pyramid level. Returns best score.
double refine(Objective& obj, AffineParams& p, double score,
              const RegistrationConfig& cfg, double voxel) {
  double shrink = 1.0;
  for (int sweep = 0; sweep < cfg.sweeps_per_level; ++sweep) {
    const double before = score;
    for (int i = 0; i < AffineParams::count(); ++i) {
      if (obj.evals > cfg.max_evals) return score;
      const double theta = p.at(i);
      const double h = step_for(cfg, i, voxel, shrink);
      double best_val = 0.0;
      const double cand = golden_max(
          [&](double x) {
            AffineParams q = p;
            q.at(i) = x;
            return obj(q);
          },
          theta - h, theta + h, cfg.line_search_iters, &best_val);
      if (best_val > score) {
        p.at(i) = cand;
        score = best_val;
      }
    }
    shrink *= 0.5;
    if (score - before < cfg.tol) break;
  }
  return score;
}

}  // namespace

RegistrationConfig RegistrationConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  RegistrationConfig c;
  const std::string metric = j.value("metric", "mi");
  if (metric == "mi")
    c.metric = Metric::mi;
  else if (metric == "rmse")
    c.metric = Metric::rmse;
  else
    throw std::invalid_argument("registration metric must be mi or rmse");
  c.bins = j.value("bins", c.bins);
  c.levels = j.value("levels", c.levels);
  c.sweeps_per_level = j.value("sweeps_per_level", c.sweeps_per_level);
  c.line_search_iters = j.value("line_search_iters", c.line_search_iters);
  c.restarts = j.value("restarts", c.restarts);
  c.tol = j.value("tol", c.tol);
  c.seed = j.value("seed", c.seed);
  c.max_evals = j.value("max_evals", c.max_evals);
  c.step_translation = j.value("step_translation", c.step_translation);
  c.step_rotation = j.value("step_rotation", c.step_rotation);
  c.step_log_scale = j.value("step_log_scale", c.step_log_scale);
  c.step_shear = j.value("step_shear", c.step_shear);
  return c;
}

std::string RegistrationConfig::to_json() const {
  json j;
  j["metric"] = metric == Metric::mi ? "mi" : "rmse";
  j["bins"] = bins;
  j["levels"] = levels;
  j["sweeps_per_level"] = sweeps_per_level;
  j["line_search_iters"] = line_search_iters;
  j["restarts"] = restarts;
  j["tol"] = tol;
  j["seed"] = seed;
  j["max_evals"] = max_evals;
  j["step_translation"] = step_translation;
  j["step_rotation"] = step_rotation;
  j["step_log_scale"] = step_log_scale;
  j["step_shear"] = step_shear;
  return j.dump();
}

RegistrationResult register_affine(const Volume& fixed, const Volume& moving,
                                   const RegistrationConfig& cfg) {
  if (fixed.voxels.size() == 0 || moving.voxels.size() == 0)
    throw std::invalid_argument("register_affine: empty volume");

  // Pyramid, full resolution last.
  std::vector<Volume> fixed_pyr{fixed}, moving_pyr{moving};
  for (int l = 1; l < cfg.levels; ++l) {
    fixed_pyr.insert(fixed_pyr.begin(), halve(fixed_pyr.front()));
    moving_pyr.insert(moving_pyr.begin(), halve(moving_pyr.front()));
  }

  const Vec3 center = grid_center(moving.dims(), moving.spacing);
  Rng rng(cfg.seed);

  int total_evals = 0;
  // Choose a start at the coarsest level: identity plus perturbed restarts.
  AffineParams best_p;
  double best_s;
  {
    Objective obj{fixed_pyr[0], moving_pyr[0], cfg, center};
    best_s = obj(best_p);
    for (int r = 0; r < cfg.restarts; ++r) {
      AffineParams p;
      for (int a = 0; a < 3; ++a) {
        p.translation[a] = rng.uniform(-1.0, 1.0) * cfg.step_translation *
                           moving.spacing[a];
        p.rotation[a] = rng.uniform(-1.0, 1.0) * cfg.step_rotation;
      }
      const double s = obj(p);
      if (s > best_s) {
        best_s = s;
        best_p = p;
      }
    }
    total_evals += obj.evals;
  }

  for (std::size_t l = 0; l < fixed_pyr.size(); ++l) {
    Objective obj{fixed_pyr[l], moving_pyr[l], cfg, center};
    obj.evals = total_evals;
    // The metric value is level-dependent; rescore at this level first.
    best_s = obj(best_p);
    const double voxel = moving_pyr[l].spacing[2];
    best_s = refine(obj, best_p, best_s, cfg, voxel);
    total_evals = obj.evals;
  }

  RegistrationResult out;
  out.transform = make_affine(best_p, center);
  out.score = best_s;
  out.evaluations = total_evals;
  out.converged = total_evals <= cfg.max_evals;
  return out;
}

double registration_error_voxels(const AffineTransform& recovered,
                                 const Transform& reference,
                                 const Dims& moving_dims,
                                 const Spacing& moving_spacing) {
  return mean_displacement_voxels(Transform::from_affine(recovered), reference,
                                  moving_dims, moving_spacing);
}

TransformTable build_transform_table(
    const std::vector<Volume>& volumes,
    const std::vector<std::pair<int, int>>& pairs,
    const RegistrationConfig& cfg,
    const std::function<void(int, int, const RegistrationResult&)>& on_pair) {
  TransformTable table(static_cast<int>(volumes.size()));
  for (const auto& [mov, fix] : pairs) {
    RegistrationConfig pair_cfg = cfg;
    // Decorrelate restart draws across pairs, deterministically.
    std::uint64_t s = cfg.seed ^ (static_cast<std::uint64_t>(mov) << 32 |
                                  static_cast<std::uint64_t>(fix));
    pair_cfg.seed = splitmix64(s);
    const RegistrationResult r =
        register_affine(volumes[fix], volumes[mov], pair_cfg);
    table.set(mov, fix, Transform::from_affine(r.transform));
    if (on_pair) on_pair(mov, fix, r);
  }
  return table;
}

std::vector<std::pair<int, int>> all_pairs(int n) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) out.emplace_back(i, j);
  return out;
}

std::vector<std::pair<int, int>> labeled_cross_pairs(
    int n, const std::vector<int>& labeled) {
  std::vector<bool> is_lab(n, false);
  for (int v : labeled) is_lab[v] = true;
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && is_lab[i] != is_lab[j]) out.emplace_back(i, j);
  return out;
}

}  // namespace regseg
