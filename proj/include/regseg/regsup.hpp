// regsup.hpp — registration-derived supervision for unlabeled volumes.
//
// For an unlabeled volume, each labeled volume is a candidate source: its
// labels can be carried over through the pairwise transform. Candidates are
// ranked by a cycle-consistency score: push the unlabeled volume to the
// candidate's frame and back, then measure how much survived the round
// trip. Lower composite score = better-behaved transform pair. The chosen
// source's labels, resampled onto the unlabeled grid, become that volume's
// registered labels.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "regseg/geometry.hpp"
#include "regseg/resample.hpp"
#include "regseg/volume.hpp"

namespace regseg {

struct CycleWeights {
  double w_rmse = 0.5;
  double w_mi = 0.5;
};

struct CycleScore {
  double rmse_term = 0.0;  // range-normalized RMSE of the round trip
  double mi_term = 0.0;    // 1 - normalized MI of the round trip
  double composite = 0.0;  // w_rmse * rmse_term + w_mi * mi_term
};

/// Round-trip a volume through t_ab (onto grid_b) and t_ba (back onto its
/// own grid), then score the degradation. Lower is better.
CycleScore cycle_score(const Volume& v, const Transform& t_ab,
                       const Transform& t_ba, const GridSpec& grid_b,
                       const CycleWeights& w);

struct SourceChoice {
  int source = -1;   // volume index of the chosen labeled case
  bool scored = false;  // false when only one candidate existed
  std::map<int, CycleScore> scores;  // per candidate, when scored
};

/// Pick the labeled source for unlabeled volume j. A single candidate is
/// returned directly without scoring; otherwise both directions of every
/// (j, q) pair must be in the table, and the lowest composite wins (ties
/// break to the lower volume index).
SourceChoice select_best_labeled(int j, const Dataset& train,
                                 const TransformTable& table,
                                 const CycleWeights& w);

/// Source labels carried onto volume j's grid (nearest-neighbour, so the
/// label alphabet never grows).
LabelMap make_registered_labels(const LabelMap& y_q, const Transform& t_qj,
                                const GridSpec& grid_j);

struct RegisteredLabels {
  std::vector<int> volumes;          // unlabeled volume indices, ascending
  std::vector<LabelMap> labels;      // parallel to volumes
  std::vector<SourceChoice> choices; // parallel to volumes
};

/// Choose a source and build registered labels for every unlabeled train
/// volume; evaluated once before training, the result is cached on disk.
RegisteredLabels prepare_rsl(const Dataset& train, const TransformTable& table,
                             const CycleWeights& w);

/// dir/rsl_labels/<id>.lab.bin plus dir/brs.json (choices and scores).
void save_registered_labels(const RegisteredLabels& r, const Dataset& train,
                            const std::string& dir);

/// Reload labels keyed by volume index; ids resolve through the dataset.
RegisteredLabels load_registered_labels(const Dataset& train,
                                        const std::string& dir);

}  // namespace regseg
