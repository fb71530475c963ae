// losses.hpp — training objectives: supervised Dice+CE, cross pseudo
// supervision between the two models, per-slice supervision from registered
// labels, and the supervised contrastive term with registration-enhanced
// positive keys.
//
// Gradient policy: probability/feature tensors flow gradients to their
// producing model; every contrastive key (positive and negative) and every
// pseudo-label is a detached value, so supervision targets never leak
// gradients back to the network that produced them.
#pragma once

#include <Eigen/Core>
#include <map>
#include <optional>
#include <vector>

#include "regseg/geometry.hpp"
#include "regseg/membank.hpp"
#include "regseg/prng.hpp"
#include "regseg/resample.hpp"
#include "regseg/tensor.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct ContrastConfig {
  double temperature = 0.1;  // τ
  int anchor_samples = 1000;  // N, per-class anchor cap
  int negative_samples = 500;  // O, negative budget per class
  double threshold = 0.5;  // h, strict lower bound on top-1 prob
  double w1 = 0.5;  // label-key weight
  double w2 = 0.5;  // registration-key weight
};

// ---- pixel-level losses ---------------------------------------------------

/// One-hot constant node (B,C,H,W) from flat labels (b-major, then y, x).
nn::NodePtr one_hot_node(const std::vector<int>& labels, int batch,
                         int classes, int h, int w);

/// Per-pixel argmax of a probability map, flattened b-major. Ties resolve
/// to the lowest class index.
std::vector<int> argmax_labels(const nn::NodePtr& prob);

/// 1 − mean over classes of (2·ΣP·Y + ε)/(ΣP + ΣY + ε), sums over batch and
/// space, ε = 1e-5.
nn::NodePtr dice_loss(const nn::NodePtr& prob, const nn::NodePtr& target);

/// Mean pixelwise −log P[y], probabilities clamped at 1e-12.
nn::NodePtr ce_loss(const nn::NodePtr& prob, const std::vector<int>& labels);

/// dice + ce against ground truth.
nn::NodePtr sup_loss(const nn::NodePtr& prob, const std::vector<int>& labels);

/// Dice of this model's probabilities against the other model's hard argmax
/// labels; the other model's graph is never touched.
nn::NodePtr cps_loss(const nn::NodePtr& prob_self,
                     const nn::NodePtr& prob_other);

struct RslOutcome {
  nn::NodePtr loss;  // mean per-slice dice+ce over covered slices
  int used = 0;
  int missing = 0;  // slices lacking a registered label, excluded
};

/// Per-slice dice+ce against registered labels, averaged over the slices
/// that have one; absent entries are skipped and counted.
RslOutcome rsl_loss(const nn::NodePtr& prob,
                    const std::vector<std::optional<Array2<std::int32_t>>>&
                        reg_labels);

// ---- anchors and keys -----------------------------------------------------

/// Class and confidence for each feature-grid cell: cell (b, gy, gx) reads
/// the label and top-1 probability at the input-resolution pixel nearest the
/// cell centre (offset stride/2 along each axis).
struct FeatureGridView {
  int batch = 0, gh = 0, gw = 0;
  std::vector<int> label;     // per cell
  std::vector<double> top1;   // per cell
};
FeatureGridView grid_view(const nn::NodePtr& prob,
                          const std::vector<Array2<std::int32_t>>& labels,
                          int stride);

/// Cells are flat indices (b·gh + gy)·gw + gx into the feature grid.
struct AnchorSelection {
  std::map<int, std::vector<int>> anchors;  // class → sampled cells, ≤ N
  std::map<int, std::vector<int>> pool;     // class → all qualifying cells
};

/// Qualifying cell: top-1 prob strictly above h. Per class, up to N anchors
/// are drawn uniformly without replacement; the full pool is kept for key
/// building and negative sampling.
AnchorSelection select_anchors(const FeatureGridView& view,
                               const ContrastConfig& cfg, Rng& rng);

/// Unit-normalized mean feature over the full qualifying set of a class;
/// detached. Empty set or a mean shorter than 1e-8 → absent (class skipped).
std::optional<Eigen::VectorXd> label_positive_key(
    const nn::NodePtr& features, const std::vector<int>& cells);

/// An anchor's 3D position, in voxel coordinates of its source volume.
struct AnchorPoint {
  int volume = 0;
  Vec3 voxel{0.0, 0.0, 0.0};  // (z, y, x)
};

/// Carry the anchor point into every other volume with a known transform;
/// where the bank stores that volume's nearest slice (within half a slice),
/// bilinearly sample the stored map at the mapped in-plane position (edge
/// clamped). Average of the samples, unit-normalized; absent when no volume
/// qualifies or the mean degenerates to zero.
std::optional<Eigen::VectorXd> reg_positive_key(
    const AnchorPoint& p, const std::vector<GridSpec>& grids,
    const TransformTable& table, const FeatureBank& bank, int stride);

/// w1·label_key + w2·reg_key, unit-normalized; without a registration key
/// the label key passes through. Zero-length combination → absent.
std::optional<Eigen::VectorXd> combine_positive(
    const Eigen::VectorXd& label_key,
    const std::optional<Eigen::VectorXd>& reg_key, double w1, double w2);

/// Detached per-class candidate negatives — every qualifying cell's feature.
using NegativePool = std::map<int, std::vector<Eigen::VectorXd>>;
NegativePool negative_pool(const nn::NodePtr& features,
                           const AnchorSelection& sel);
void merge_pools(NegativePool& into, const NegativePool& from);

/// For each class with anchors: from every other class present in the pool,
/// draw up to ⌈O / (classes present − 1)⌉ features uniformly without
/// replacement. Classes alone in the pool get no negatives.
std::map<int, std::vector<Eigen::VectorXd>> sample_negatives(
    const NegativePool& pool, const ContrastConfig& cfg, Rng& rng);

/// Mean over classes, then anchors, of
///   −log( e^{a·p/τ} / (e^{a·p/τ} + Σ_k e^{a·n_k/τ}) ).
/// A class's positives list holds either a single shared key or one key per
/// anchor (registration-enhanced positives are anchor-specific). A class
/// contributes only when it has anchors, positives, and at least one
/// negative; when nothing contributes the loss is a constant zero.
nn::NodePtr contrastive_loss(
    const nn::NodePtr& features,
    const std::map<int, std::vector<int>>& anchors,
    const std::map<int, std::vector<Eigen::VectorXd>>& positives,
    const std::map<int, std::vector<Eigen::VectorXd>>& negatives,
    const ContrastConfig& cfg);

}  // namespace regseg
