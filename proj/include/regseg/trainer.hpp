// trainer.hpp — the dual-model training loop: batch composition, loss
// assembly with ablation switches, per-model optimizers, feature banks, and
// averaged-logit inference.
//
// Loss per model m over a half-labeled batch:
//   L_m = L_sup + w_cps(i)·L_cps + [scl]·w_cl·L_cl + [rsl]·w_rs·L_rs
// Cross supervision uses the other model's hard labels; contrastive keys are
// detached; registered labels come precomputed. Each model takes its own
// optimizer step; neither loss can move the other model's parameters.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "regseg/losses.hpp"
#include "regseg/membank.hpp"
#include "regseg/optim.hpp"
#include "regseg/prng.hpp"
#include "regseg/regsup.hpp"
#include "regseg/segnets.hpp"
#include "regseg/volume.hpp"

namespace regseg {

/// Cross-supervision warm-up: 0.1·exp(−5(1 − i/t_total)²), rising to 0.1.
double w_cps_schedule(int i, int t_total);

// ---- in-plane augmentation (dihedral group of the square) -----------------

/// Index d ∈ [0,8): rotations (0°,90°,180°,270°) and their mirrored forms.
/// dihedral_source maps a position in the augmented plane to its source
/// position in the original plane; it is exact on the pixel lattice and on
/// continuous coordinates alike.
std::pair<double, double> dihedral_source(int d, double y, double x, int n);
int dihedral_inverse(int d);

template <class T>
Array2<T> dihedral_apply(const Array2<T>& a, int d);

/// Undo augmentation d on a stored feature map (per channel), so banked
/// maps always live in the volume's own frame.
FeatureMap dihedral_restore(const FeatureMap& m, int d);

// ---- configuration --------------------------------------------------------

struct AblationFlags {
  bool rsl = true;   // registered-label supervision
  bool brs = true;   // cycle-scored source selection (consumed upstream)
  bool scl = true;   // supervised contrastive term
  bool reps = true;  // registration-enhanced positive keys (needs scl)
};

struct TrainConfig {
  int t_total = 2000;
  int batch = 8;  // even; half labeled, half unlabeled
  double lr_a = 5e-4;
  double lr_b = 1e-4;
  double weight_decay = 5e-4;
  double w_cl = 1e-3;
  double w_rs = 1.0;
  AblationFlags flags;
  ContrastConfig contrast;
  std::uint64_t seed = 0;
  bool augment = true;
  bool shared_negatives = true;  // sample one negative set from F_A ∪ F_B
  bool shared_bank = false;      // one bank fed by both models
  int feature_stride = 4;

  void validate() const;  // throws std::invalid_argument
};

// ---- batches --------------------------------------------------------------

struct BatchItem {
  SliceRef ref;
  bool labeled = false;
  int dihedral = 0;
};
using Batch = std::vector<BatchItem>;

/// First half labeled slices, second half unlabeled, both drawn uniformly
/// with replacement from their pools.
Batch compose_batch(const Dataset& train, int batch_size, bool augment,
                    Rng& rng);

// ---- the loop -------------------------------------------------------------

struct StepRecord {
  int iteration = 0;
  double w_cps = 0.0;
  double sup_a = 0, cps_a = 0, cl_a = 0, rs_a = 0, total_a = 0;
  double sup_b = 0, cps_b = 0, cl_b = 0, rs_b = 0, total_b = 0;
  int rsl_missing = 0;
};

class Trainer {
 public:
  /// `table` may be null unless flags.reps; `rsl` may be null unless
  /// flags.rsl. The dataset must outlive the trainer.
  Trainer(const Dataset& train, TrainConfig cfg, const ModelSpec& spec_a,
          const ModelSpec& spec_b, const TransformTable* table,
          const RegisteredLabels* rsl);

  StepRecord step();  // throws std::runtime_error on non-finite loss

  int iteration() const { return iter_; }
  Model& model_a() { return *model_a_; }
  Model& model_b() { return *model_b_; }
  const Model& model_a() const { return *model_a_; }
  const Model& model_b() const { return *model_b_; }
  const TrainConfig& config() const { return cfg_; }
  const Dataset& train() const { return *train_; }
  const FeatureBank& bank_a() const { return *bank_a_; }
  const FeatureBank& bank_b() const { return shared() ? *bank_a_ : *bank_b_; }

  /// models, optimizer moments, banks, rng streams, iteration counter.
  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);

 private:
  bool shared() const { return cfg_.shared_bank; }

  const Dataset* train_ = nullptr;
  TrainConfig cfg_;
  const TransformTable* table_ = nullptr;
  const RegisteredLabels* rsl_ = nullptr;
  std::vector<const LabelMap*> rsl_by_volume_;  // null when absent
  std::vector<GridSpec> grids_;

  std::unique_ptr<Model> model_a_, model_b_;
  std::unique_ptr<nn::AdamW> opt_a_, opt_b_;
  std::unique_ptr<FeatureBank> bank_a_, bank_b_;
  Rng batch_rng_, step_rng_;
  int iter_ = 0;
};

// ---- inference ------------------------------------------------------------

/// Per-pixel argmax of the mean of the two models' logits.
Array2<std::int32_t> infer_slice(const Model& a, const Model& b,
                                 const Array2<double>& slice);
LabelMap infer_volume(const Model& a, const Model& b, const Volume& v);

}  // namespace regseg
