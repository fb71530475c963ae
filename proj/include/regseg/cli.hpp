// cli.hpp — the regseg tool: generate | register | prepare-rsl | train |
// eval | ablate.
//
// Every command reads one experiment config (JSON) and works under its `out`
// directory, so a pipeline is a sequence of invocations sharing a config.
// The commands are plain functions so tests can drive them in-process;
// run_cli wraps them in argument parsing.
#pragma once

#include <cstdint>
#include <string>

#include "regseg/config.hpp"

namespace regseg {

/// out/cohort — build and save the phantom cohort, then reload and verify
/// the round trip bit-for-bit.
void cmd_generate(const ExperimentConfig& cfg);

/// out/transforms.bin + transforms.json — pairwise registration over the
/// train volumes (pair scope from registration.pairs).
void cmd_register(const ExperimentConfig& cfg);

/// out/rsl_brs or out/rsl_first — registered labels for every unlabeled
/// train volume, source chosen per train.flags.brs.
void cmd_prepare_rsl(const ExperimentConfig& cfg);

/// out/runs/<tag> — one training run under the config's flags and seed.
/// Returns the run directory.
std::string cmd_train(const ExperimentConfig& cfg);

/// metrics.csv and plots for a finished run (empty run_dir = the config's
/// own tag).
void cmd_eval(const ExperimentConfig& cfg, const std::string& run_dir = "");

/// out/eval_regonly — carry labeled-case labels straight onto the test
/// volumes through fresh registrations (no networks) and score them.
void cmd_eval_reg_only(const ExperimentConfig& cfg);

/// Train + eval every (combo, seed) in cfg.ablate, building any missing
/// prerequisites, then write out/ablation.csv and the bar chart.
void cmd_ablate(const ExperimentConfig& cfg);

/// "rsl1_brs0_scl1_reps0_seed3" — the run directory name under out/runs.
std::string run_tag(const AblationFlags& flags, std::uint64_t seed);

int run_cli(int argc, char** argv);

}  // namespace regseg
