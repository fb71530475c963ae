// config.cpp — see config.hpp.
#include "regseg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace regseg {

using nlohmann::json;

namespace {

struct SchemaNode {
  const char* key;
  std::vector<SchemaNode> children;  // empty = leaf (any JSON value)
};

const SchemaNode kSchema{
    "",
    {
        {"out", {}},
        {"cohort",
         {{"seed", {}},
          {"n_train", {}},
          {"n_labeled", {}},
          {"n_test", {}},
          {"dims", {}},
          {"spacing", {}},
          {"noise_std", {}},
          {"bias_amp", {}},
          {"severity_min", {}},
          {"severity_max", {}},
          {"deform_amp", {}}}},
        {"registration",
         {{"metric", {}},
          {"bins", {}},
          {"levels", {}},
          {"sweeps_per_level", {}},
          {"line_search_iters", {}},
          {"restarts", {}},
          {"tol", {}},
          {"seed", {}},
          {"max_evals", {}},
          {"step_translation", {}},
          {"step_rotation", {}},
          {"step_log_scale", {}},
          {"step_shear", {}},
          {"pairs", {}}}},
        {"brs", {{"w_rmse", {}}, {"w_mi", {}}}},
        {"train",
         {{"t_total", {}},
          {"batch", {}},
          {"lr_a", {}},
          {"lr_b", {}},
          {"weight_decay", {}},
          {"w_cl", {}},
          {"w_rs", {}},
          {"seed", {}},
          {"augment", {}},
          {"shared_negatives", {}},
          {"shared_bank", {}},
          {"flags",
           {{"rsl", {}}, {"brs", {}}, {"scl", {}}, {"reps", {}}}},
          {"contrast",
           {{"temperature", {}},
            {"anchor_samples", {}},
            {"negative_samples", {}},
            {"threshold", {}},
            {"w1", {}},
            {"w2", {}}}}}},
        {"models", {{"arch_a", {}}, {"arch_b", {}}}},
        {"eval", {{"quality_every", {}}, {"volumetric_hd", {}}}},
        {"ablate", {{"combos", {}}, {"seeds", {}}}},
    }};

void check_keys(const json& j, const SchemaNode& node,
                const std::string& path) {
  if (!j.is_object()) {
    if (node.children.empty()) return;
    throw std::invalid_argument("config: expected an object at " +
                                (path.empty() ? "the top level" : path));
  }
  for (const auto& [key, value] : j.items()) {
    const SchemaNode* match = nullptr;
    for (const auto& child : node.children)
      if (key == child.key) {
        match = &child;
        break;
      }
    const std::string here = path.empty() ? key : path + "." + key;
    if (match == nullptr)
      throw std::invalid_argument("config: unknown key " + here);
    if (!match->children.empty()) check_keys(value, *match, here);
  }
}

template <class T>
T take(const json& j, const char* key, T fallback, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config: bad value type at " + path + "." +
                                key);
  }
}

template <class T, std::size_t N>
std::array<T, N> take_array(const json& j, const char* key,
                            std::array<T, N> fallback,
                            const std::string& path) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != N)
    throw std::invalid_argument("config: " + path + "." + key + " must be " +
                                std::to_string(N) + " numbers");
  std::array<T, N> out;
  for (std::size_t i = 0; i < N; ++i) {
    try {
      out[i] = v[i].get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config: bad value type at " + path + "." +
                                  key);
    }
  }
  return out;
}

ModelSpec::Arch arch_of(const std::string& name, const std::string& path) {
  if (name == "convnet") return ModelSpec::Arch::convnet;
  if (name == "mixer") return ModelSpec::Arch::mixer;
  throw std::invalid_argument("config: " + path +
                              " must be convnet or mixer, got " + name);
}

json value_of(const std::string& text) {
  // bare words become strings, everything JSON-parseable is taken literally
  const json parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) return json(text);
  return parsed;
}

}  // namespace

PhantomSpec CohortParams::phantom() const {
  PhantomSpec spec;
  spec.dims = dims;
  spec.spacing = spacing;
  spec.noise_std = noise_std;
  spec.bias_amp = bias_amp;
  spec.warp.severity_min = severity_min;
  spec.warp.severity_max = severity_max;
  spec.warp.deform_amp = deform_amp;
  return spec;
}

AblationFlags parse_combo(const std::string& combo) {
  AblationFlags flags{false, false, false, false};
  if (combo == "none") return flags;
  if (combo.empty())
    throw std::invalid_argument("config: empty ablation combo");
  std::istringstream ss(combo);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "rsl")
      flags.rsl = true;
    else if (part == "brs")
      flags.brs = true;
    else if (part == "scl")
      flags.scl = true;
    else if (part == "reps")
      flags.reps = true;
    else
      throw std::invalid_argument(
          "config: ablation combo must be none or '+'-joined rsl/brs/scl/"
          "reps, got " +
          combo);
  }
  return flags;
}

std::string combo_name(const AblationFlags& flags) {
  std::string out;
  const auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(flags.rsl, "rsl");
  add(flags.brs, "brs");
  add(flags.scl, "scl");
  add(flags.reps, "reps");
  return out.empty() ? "none" : out;
}

ModelSpec ExperimentConfig::spec_a() const {
  ModelSpec spec;
  spec.arch = arch_of(arch_a, "models.arch_a");
  spec.in_height = cohort.dims[1];
  spec.in_width = cohort.dims[2];
  return spec;
}

ModelSpec ExperimentConfig::spec_b() const {
  ModelSpec spec = spec_a();
  spec.arch = arch_of(arch_b, "models.arch_b");
  return spec;
}

ExperimentConfig ExperimentConfig::parse(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") +
                                e.what());
  }
  check_keys(j, kSchema, "");
  ExperimentConfig cfg;
  cfg.out = take(j, "out", cfg.out, "");

  const json jc = j.value("cohort", json::object());
  auto& co = cfg.cohort;
  co.seed = take<std::uint64_t>(jc, "seed", co.seed, "cohort");
  co.n_train = take(jc, "n_train", co.n_train, "cohort");
  co.n_labeled = take(jc, "n_labeled", co.n_labeled, "cohort");
  co.n_test = take(jc, "n_test", co.n_test, "cohort");
  co.dims = take_array<int, 3>(jc, "dims", co.dims, "cohort");
  co.spacing = take_array<double, 3>(jc, "spacing", co.spacing, "cohort");
  co.noise_std = take(jc, "noise_std", co.noise_std, "cohort");
  co.bias_amp = take(jc, "bias_amp", co.bias_amp, "cohort");
  co.severity_min = take(jc, "severity_min", co.severity_min, "cohort");
  co.severity_max = take(jc, "severity_max", co.severity_max, "cohort");
  co.deform_amp = take(jc, "deform_amp", co.deform_amp, "cohort");
  if (co.n_train < 1 || co.n_test < 0 || co.n_labeled < 1 ||
      co.n_labeled > co.n_train)
    throw std::invalid_argument(
        "config: cohort counts need n_train >= 1, 0 <= n_test, "
        "1 <= n_labeled <= n_train");
  if (co.dims[1] % 4 != 0 || co.dims[2] % 4 != 0)
    throw std::invalid_argument(
        "config: cohort.dims in-plane extents must be divisible by 4 "
        "(feature stride)");

  if (j.contains("registration")) {
    cfg.registration = RegistrationConfig::from_json(j["registration"].dump());
    cfg.pairs = take(j["registration"], "pairs", cfg.pairs, "registration");
    if (cfg.pairs != "all" && cfg.pairs != "labeled-cross")
      throw std::invalid_argument(
          "config: registration.pairs must be all or labeled-cross");
  }

  const json jb = j.value("brs", json::object());
  cfg.brs.w_rmse = take(jb, "w_rmse", cfg.brs.w_rmse, "brs");
  cfg.brs.w_mi = take(jb, "w_mi", cfg.brs.w_mi, "brs");

  const json jt = j.value("train", json::object());
  auto& tr = cfg.train;
  tr.t_total = take(jt, "t_total", tr.t_total, "train");
  tr.batch = take(jt, "batch", tr.batch, "train");
  tr.lr_a = take(jt, "lr_a", tr.lr_a, "train");
  tr.lr_b = take(jt, "lr_b", tr.lr_b, "train");
  tr.weight_decay = take(jt, "weight_decay", tr.weight_decay, "train");
  tr.w_cl = take(jt, "w_cl", tr.w_cl, "train");
  tr.w_rs = take(jt, "w_rs", tr.w_rs, "train");
  tr.seed = take<std::uint64_t>(jt, "seed", tr.seed, "train");
  tr.augment = take(jt, "augment", tr.augment, "train");
  tr.shared_negatives =
      take(jt, "shared_negatives", tr.shared_negatives, "train");
  tr.shared_bank = take(jt, "shared_bank", tr.shared_bank, "train");
  const json jf = jt.value("flags", json::object());
  tr.flags.rsl = take(jf, "rsl", tr.flags.rsl, "train.flags");
  tr.flags.brs = take(jf, "brs", tr.flags.brs, "train.flags");
  tr.flags.scl = take(jf, "scl", tr.flags.scl, "train.flags");
  tr.flags.reps = take(jf, "reps", tr.flags.reps, "train.flags");
  const json jk = jt.value("contrast", json::object());
  auto& ct = tr.contrast;
  ct.temperature = take(jk, "temperature", ct.temperature, "train.contrast");
  ct.anchor_samples =
      take(jk, "anchor_samples", ct.anchor_samples, "train.contrast");
  ct.negative_samples =
      take(jk, "negative_samples", ct.negative_samples, "train.contrast");
  ct.threshold = take(jk, "threshold", ct.threshold, "train.contrast");
  ct.w1 = take(jk, "w1", ct.w1, "train.contrast");
  ct.w2 = take(jk, "w2", ct.w2, "train.contrast");
  tr.validate();

  const json jm = j.value("models", json::object());
  cfg.arch_a = take(jm, "arch_a", cfg.arch_a, "models");
  cfg.arch_b = take(jm, "arch_b", cfg.arch_b, "models");
  arch_of(cfg.arch_a, "models.arch_a");
  arch_of(cfg.arch_b, "models.arch_b");

  const json je = j.value("eval", json::object());
  cfg.eval.quality_every =
      take(je, "quality_every", cfg.eval.quality_every, "eval");
  cfg.eval.volumetric_hd =
      take(je, "volumetric_hd", cfg.eval.volumetric_hd, "eval");
  if (cfg.eval.quality_every < 0)
    throw std::invalid_argument("config: eval.quality_every must be >= 0");

  const json ja = j.value("ablate", json::object());
  cfg.ablate.combos = take(ja, "combos", cfg.ablate.combos, "ablate");
  cfg.ablate.seeds = take(ja, "seeds", cfg.ablate.seeds, "ablate");
  for (const auto& combo : cfg.ablate.combos) parse_combo(combo);
  if (cfg.ablate.combos.empty() || cfg.ablate.seeds.empty())
    throw std::invalid_argument(
        "config: ablate needs at least one combo and one seed");
  return cfg;
}

ExperimentConfig ExperimentConfig::load(
    const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f)
    throw std::runtime_error("config: cannot open " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: " + path + " is not valid JSON: " +
                                e.what());
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("config: overrides look like path=value, "
                                  "got " +
                                  ov);
    const std::string dotted = ov.substr(0, eq);
    json* cursor = &j;
    std::istringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i)
      cursor = &((*cursor)[parts[i]]);
    (*cursor)[parts.back()] = value_of(ov.substr(eq + 1));
  }
  return parse(j.dump());
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["out"] = out;
  j["cohort"] = {{"seed", cohort.seed},
                 {"n_train", cohort.n_train},
                 {"n_labeled", cohort.n_labeled},
                 {"n_test", cohort.n_test},
                 {"dims", cohort.dims},
                 {"spacing", cohort.spacing},
                 {"noise_std", cohort.noise_std},
                 {"bias_amp", cohort.bias_amp},
                 {"severity_min", cohort.severity_min},
                 {"severity_max", cohort.severity_max},
                 {"deform_amp", cohort.deform_amp}};
  j["registration"] = json::parse(registration.to_json());
  j["registration"]["pairs"] = pairs;
  j["brs"] = {{"w_rmse", brs.w_rmse}, {"w_mi", brs.w_mi}};
  j["train"] = {
      {"t_total", train.t_total},
      {"batch", train.batch},
      {"lr_a", train.lr_a},
      {"lr_b", train.lr_b},
      {"weight_decay", train.weight_decay},
      {"w_cl", train.w_cl},
      {"w_rs", train.w_rs},
      {"seed", train.seed},
      {"augment", train.augment},
      {"shared_negatives", train.shared_negatives},
      {"shared_bank", train.shared_bank},
      {"flags",
       {{"rsl", train.flags.rsl},
        {"brs", train.flags.brs},
        {"scl", train.flags.scl},
        {"reps", train.flags.reps}}},
      {"contrast",
       {{"temperature", train.contrast.temperature},
        {"anchor_samples", train.contrast.anchor_samples},
        {"negative_samples", train.contrast.negative_samples},
        {"threshold", train.contrast.threshold},
        {"w1", train.contrast.w1},
        {"w2", train.contrast.w2}}}};
  j["models"] = {{"arch_a", arch_a}, {"arch_b", arch_b}};
  j["eval"] = {{"quality_every", eval.quality_every},
               {"volumetric_hd", eval.volumetric_hd}};
  j["ablate"] = {{"combos", ablate.combos}, {"seeds", ablate.seeds}};
  return j.dump(2) + "\n";
}

}  // namespace regseg
