// config.hpp — the experiment file: one declarative JSON document covering
// cohort synthesis, registration, source selection, training, and
// evaluation. Keys are strictly checked (an unknown key anywhere is an
// error naming its dotted path), and command-line overrides address the
// same dotted paths.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regseg/phantom.hpp"
#include "regseg/registration.hpp"
#include "regseg/regsup.hpp"
#include "regseg/segnets.hpp"
#include "regseg/trainer.hpp"

namespace regseg {

struct CohortParams {
  std::uint64_t seed = 1;
  int n_train = 20;
  int n_labeled = 1;
  int n_test = 5;
  Dims dims{32, 32, 32};
  Spacing spacing{1.0, 1.0, 1.0};
  double noise_std = 0.05;
  double bias_amp = 0.15;
  double severity_min = 0.3;
  double severity_max = 1.0;
  double deform_amp = 1.2;

  PhantomSpec phantom() const;
};

struct EvalParams {
  int quality_every = 0;  // pseudo-label DSC cadence during training; 0 = off
  bool volumetric_hd = false;
};

struct AblateParams {
  std::vector<std::string> combos{"none", "rsl", "rsl+scl", "rsl+scl+reps"};
  std::vector<int> seeds{0, 1, 2};
};

/// "none" or a '+'-joined subset of {rsl, brs, scl, reps}.
AblationFlags parse_combo(const std::string& combo);
std::string combo_name(const AblationFlags& flags);

struct ExperimentConfig {
  std::string out = "out";
  CohortParams cohort;
  RegistrationConfig registration;
  std::string pairs = "all";  // or "labeled-cross"
  CycleWeights brs;
  TrainConfig train;
  std::string arch_a = "convnet";
  std::string arch_b = "mixer";
  EvalParams eval;
  AblateParams ablate;

  ModelSpec spec_a() const;
  ModelSpec spec_b() const;

  /// Parse + strict-validate a JSON document.
  static ExperimentConfig parse(const std::string& json_text);
  /// Read a file, apply dotted-path overrides ("train.flags.rsl=false"),
  /// then parse.
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});
  std::string to_json() const;
};

}  // namespace regseg
