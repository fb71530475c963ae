// evalkit.hpp — segmentation metrics (DSC, HD95), pseudo-label quality
// tracking during training, run CSV/plot emission, and the ablation table.
//
// Conventions: DSC of a class with both masks empty is 1.0, exactly one
// empty 0.0. HD95 is the 95th percentile (linear interpolation) of the
// pooled symmetric boundary-to-boundary nearest distances, spacing-weighted;
// it is undefined (flagged, excluded from means) when either mask lacks the
// class. By default HD95 is computed per axial slice and averaged over
// slices where both masks carry the class; the volumetric flag switches to a
// single 3D surface computation.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regseg/segnets.hpp"
#include "regseg/trainer.hpp"
#include "regseg/volume.hpp"

namespace regseg {

// ---- metrics --------------------------------------------------------------

double dsc(const Array3<std::int32_t>& pred, const Array3<std::int32_t>& gt,
           int cls);

struct Hd95 {
  double value = 0.0;
  bool defined = false;
};

Hd95 hd95(const Array3<std::int32_t>& pred, const Array3<std::int32_t>& gt,
          int cls, const Spacing& spacing, bool volumetric = false);

struct ClassMetric {
  int cls = 0;
  double dsc = 0.0;
  Hd95 hd95;
};

/// Per-case metrics over the foreground classes [1, num_classes).
struct MetricReport {
  std::string case_id;
  int iteration = 0;
  std::vector<ClassMetric> per_class;
  double mean_dsc = 0.0;
  double mean_hd95 = 0.0;  // over classes where HD95 is defined
  int hd95_defined = 0;    // how many classes contributed to mean_hd95
};

MetricReport evaluate_case(const LabelMap& pred, const LabelMap& gt,
                           const std::string& case_id, int iteration,
                           bool volumetric_hd = false);

// ---- pseudo-label quality -------------------------------------------------

/// One model's hard prediction on a single slice.
Array2<std::int32_t> predict_slice(const Model& m,
                                   const Array2<double>& slice);

/// Mean over unlabeled training volumes of the foreground-mean DSC between
/// one model's predictions and the oracle labels (synthetic cohorts only).
double pseudo_label_dsc(const Model& m, const Dataset& train,
                        const std::vector<LabelMap>& oracle);

struct PseudoQualitySeries {
  std::vector<int> iterations;
  std::vector<double> model_a, model_b;
};

/// Advance the trainer `steps` iterations, measuring both models' pseudo-label
/// DSC whenever the completed-iteration count is a multiple of every_n.
PseudoQualitySeries track_pseudo_quality(Trainer& t,
                                         const std::vector<LabelMap>& oracle,
                                         int steps, int every_n);

// ---- run artifacts --------------------------------------------------------

void write_losses_csv(const std::vector<StepRecord>& records,
                      const std::string& path);
void write_metrics_csv(const std::vector<MetricReport>& reports,
                       const std::string& path);
std::vector<MetricReport> read_metrics_csv(const std::string& path);
void write_pseudo_quality_csv(const PseudoQualitySeries& series,
                              const std::string& path);

/// One ablation row: a flag combination with per-seed run means averaged.
struct AblationRow {
  AblationFlags flags;
  int seeds = 0;
  double mean_dsc = 0.0;
  double mean_hd95 = 0.0;
  int hd95_defined = 0;  // runs that had any defined HD95
};

/// Reads each run directory's config.json (train.flags) and metrics.csv,
/// groups by flag combination, and averages run-level means across seeds.
/// Rows come back in lexicographic flag order (rsl, brs, scl, reps).
std::vector<AblationRow> ablation_table(
    const std::vector<std::string>& run_dirs);
void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::string& path);

// ---- plots ----------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

void write_line_plot_svg(const std::string& path, const std::string& title,
                         const std::vector<PlotSeries>& series);
void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values);

}  // namespace regseg
