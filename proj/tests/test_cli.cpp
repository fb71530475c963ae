// test_cli.cpp — experiment config parsing and the command pipeline run
// end-to-end on a miniature cohort. The pipeline cases share one output
// directory and build on each other in declaration order.
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "regseg/cli.hpp"
#include "regseg/evalkit.hpp"
#include "regseg/phantom.hpp"
#include "regseg/regsup.hpp"

using namespace regseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "missing " << p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.out = out.string();
  cfg.cohort.seed = 7;
  cfg.cohort.n_train = 3;
  cfg.cohort.n_labeled = 1;
  cfg.cohort.n_test = 1;
  cfg.cohort.dims = {24, 24, 24};
  cfg.cohort.deform_amp = 0.6;
  cfg.pairs = "labeled-cross";
  cfg.registration.levels = 1;
  cfg.registration.sweeps_per_level = 2;
  cfg.registration.line_search_iters = 6;
  cfg.registration.restarts = 0;
  cfg.registration.max_evals = 4000;
  cfg.train.t_total = 4;
  cfg.train.batch = 2;
  cfg.train.flags = {false, false, true, false};  // scl only
  cfg.train.contrast.anchor_samples = 8;
  cfg.train.contrast.negative_samples = 8;
  cfg.eval.quality_every = 2;
  cfg.ablate.combos = {"none", "rsl"};
  cfg.ablate.seeds = {0};
  return cfg;
}

const fs::path& shared_out() {
  static const fs::path p = [] {
    const fs::path q = fs::temp_directory_path() / "regseg_cli_shared";
    fs::remove_all(q);
    fs::create_directories(q);
    return q;
  }();
  return p;
}

const ExperimentConfig& shared_cfg() {
  static const ExperimentConfig cfg = tiny_config(shared_out());
  return cfg;
}

fs::path fresh_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("experiment config parses defaults and rejects unknown keys") {
  const ExperimentConfig cfg = ExperimentConfig::parse("{}");
  CHECK(cfg.out == "out");
  CHECK(cfg.cohort.n_train == 20);
  CHECK(cfg.cohort.n_labeled == 1);
  CHECK(cfg.cohort.n_test == 5);
  CHECK(cfg.cohort.dims == Dims{32, 32, 32});
  CHECK(cfg.pairs == "all");
  CHECK(cfg.train.t_total == 2000);
  CHECK(cfg.train.batch == 8);
  CHECK(cfg.train.flags.rsl);
  CHECK(cfg.train.flags.brs);
  CHECK(cfg.train.flags.scl);
  CHECK(cfg.train.flags.reps);
  CHECK(cfg.arch_a == "convnet");
  CHECK(cfg.arch_b == "mixer");
  CHECK(cfg.ablate.combos.size() == 4);
  CHECK(cfg.ablate.seeds == std::vector<int>{0, 1, 2});
  CHECK(cfg.spec_a().arch == ModelSpec::Arch::convnet);
  CHECK(cfg.spec_b().arch == ModelSpec::Arch::mixer);
  CHECK(cfg.spec_a().in_height == 32);

  CHECK_THROWS_WITH_AS(ExperimentConfig::parse(R"({"trian": {}})"),
                       doctest::Contains("trian"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      ExperimentConfig::parse(R"({"train": {"flags": {"rls": true}}})"),
      doctest::Contains("train.flags.rls"), std::invalid_argument);
  CHECK_THROWS_AS(
      ExperimentConfig::parse(R"({"cohort": {"dims": [8, 10, 12]}})"),
      std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"train": {"batch": 3}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      ExperimentConfig::parse(R"({"models": {"arch_a": "resnet"}})"),
      std::invalid_argument);
  CHECK_THROWS_AS(
      ExperimentConfig::parse(R"({"registration": {"pairs": "some"}})"),
      std::invalid_argument);
  CHECK_THROWS_AS(
      ExperimentConfig::parse(R"({"cohort": {"n_labeled": 25}})"),
      std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"train": {"batch": "many"}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("not json"), std::invalid_argument);
}

TEST_CASE("config file loading applies dotted overrides") {
  const fs::path dir = fresh_dir("regseg_cli_cfg");
  {
    std::ofstream f(dir / "config.json");
    f << R"({"out": "somewhere", "train": {"t_total": 50}})";
  }
  const std::string path = (dir / "config.json").string();
  const ExperimentConfig cfg = ExperimentConfig::load(
      path, {"train.t_total=9", "train.flags.rsl=false", "models.arch_a=mixer",
             "cohort.spacing=[1.0,2.0,0.5]", "out=elsewhere"});
  CHECK(cfg.train.t_total == 9);
  CHECK_FALSE(cfg.train.flags.rsl);
  CHECK(cfg.train.flags.brs);  // untouched default survives
  CHECK(cfg.arch_a == "mixer");
  CHECK(cfg.cohort.spacing[1] == 2.0);
  CHECK(cfg.out == "elsewhere");

  CHECK_THROWS_WITH_AS(ExperimentConfig::load(path, {"train.nope=1"}),
                       doctest::Contains("train.nope"),
                       std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::load(path, {"no-equals"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::load((dir / "missing.json").string(), {}),
                  std::runtime_error);
}

TEST_CASE("config json round trip preserves every field") {
  ExperimentConfig cfg = tiny_config("somewhere");
  cfg.train.flags = {true, false, true, false};
  cfg.train.seed = 11;
  cfg.brs.w_rmse = 0.3;
  cfg.brs.w_mi = 0.7;
  const ExperimentConfig back = ExperimentConfig::parse(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.cohort.n_train == 3);
  CHECK(back.cohort.deform_amp == 0.6);
  CHECK(back.pairs == "labeled-cross");
  CHECK(back.registration.levels == 1);
  CHECK(back.brs.w_mi == 0.7);
  CHECK(back.train.seed == 11);
  CHECK(back.train.flags.rsl);
  CHECK_FALSE(back.train.flags.brs);
  CHECK(back.train.contrast.anchor_samples == 8);
  CHECK(back.eval.quality_every == 2);
  CHECK(back.ablate.combos == std::vector<std::string>{"none", "rsl"});
}

TEST_CASE("ablation combos parse and print both ways") {
  const AblationFlags f = parse_combo("rsl+scl+reps");
  CHECK(f.rsl);
  CHECK_FALSE(f.brs);
  CHECK(f.scl);
  CHECK(f.reps);
  CHECK(combo_name(f) == "rsl+scl+reps");
  CHECK_FALSE(parse_combo("none").rsl);
  CHECK(combo_name(parse_combo("none")) == "none");
  CHECK(combo_name(parse_combo("brs")) == "brs");
  CHECK_THROWS_AS(parse_combo("rsl+cps"), std::invalid_argument);
  CHECK_THROWS_AS(parse_combo(""), std::invalid_argument);
  CHECK(run_tag({true, false, true, false}, 3) ==
        "rsl1_brs0_scl1_reps0_seed3");
}

TEST_CASE("generate writes a cohort and reruns byte-identically") {
  const ExperimentConfig& cfg = shared_cfg();
  cmd_generate(cfg);
  const fs::path dir = fs::path(cfg.out) / "cohort";
  REQUIRE(fs::exists(dir / "cohort.json"));
  const json manifest = json::parse(slurp(dir / "cohort.json"));
  CHECK(manifest.at("train").size() == 3);
  CHECK(manifest.at("test").size() == 1);
  CHECK(manifest.at("labeled").size() == 1);
  const std::string first = manifest.at("train")[0].get<std::string>();
  const std::string vol_before = slurp(dir / "train" / (first + ".vol.bin"));
  const std::string manifest_before = slurp(dir / "cohort.json");

  cmd_generate(cfg);  // regenerate in place: fully deterministic
  CHECK(slurp(dir / "train" / (first + ".vol.bin")) == vol_before);
  CHECK(slurp(dir / "cohort.json") == manifest_before);
}

TEST_CASE("register builds the labeled-cross table") {
  const ExperimentConfig& cfg = shared_cfg();
  cmd_register(cfg);
  std::string reg_json;
  const TransformTable t = TransformTable::load(
      (fs::path(cfg.out) / "transforms.bin").string(), &reg_json);
  CHECK(t.size() == 3);
  CHECK(t.entries() == 4);  // 1 labeled x 2 unlabeled, both directions
  CHECK(reg_json.find("\"levels\"") != std::string::npos);
  const json summary =
      json::parse(slurp(fs::path(cfg.out) / "transforms.json"));
  CHECK(summary.at("pairs") == 4);
  CHECK(summary.at("mode") == "labeled-cross");
  CHECK(summary.at("improved").get<int>() >= 0);
  CHECK(summary.at("evaluations").get<long long>() > 0);
}

TEST_CASE("prepare-rsl with one labeled case needs no scoring") {
  const ExperimentConfig& cfg = shared_cfg();
  cmd_prepare_rsl(cfg);  // flags.brs off -> fixed first-labeled source
  const fs::path dir = fs::path(cfg.out) / "rsl_first";
  REQUIRE(fs::exists(dir / "brs.json"));
  const CohortOnDisk d = load_cohort((fs::path(cfg.out) / "cohort").string());
  const RegisteredLabels r = load_registered_labels(d.train, dir.string());
  CHECK(r.volumes == std::vector<int>{1, 2});
  for (const auto& choice : r.choices) {
    CHECK(choice.source == 0);
    CHECK_FALSE(choice.scored);
  }
  for (const auto& lab : r.labels) {
    CHECK(lab.dims() == d.dims);
    CHECK(lab.num_classes == 4);
  }

  ExperimentConfig brs = cfg;
  brs.train.flags.brs = true;
  cmd_prepare_rsl(brs);  // single candidate: chosen without scores
  CHECK(fs::exists(fs::path(cfg.out) / "rsl_brs" / "brs.json"));
}

TEST_CASE("train writes a complete run directory and reruns identically") {
  ExperimentConfig cfg = shared_cfg();
  cfg.train.flags = parse_combo("rsl+scl");
  const fs::path run = cmd_train(cfg);
  CHECK(run == fs::path(cfg.out) / "runs" / "rsl1_brs0_scl1_reps0_seed0");
  CHECK(fs::exists(run / "pseudo_quality.csv"));
  CHECK(fs::exists(run / "checkpoints" / "final" / "model_a.ckpt"));
  CHECK(fs::exists(run / "checkpoints" / "final" / "model_b.ckpt"));
  CHECK(fs::exists(run / "checkpoints" / "final" / "trainer.json"));

  const json rc = json::parse(slurp(run / "config.json"));
  CHECK(rc.at("train").at("flags").at("rsl") == true);
  CHECK(rc.at("train").at("flags").at("scl") == true);
  CHECK(rc.at("train").at("flags").at("brs") == false);

  const std::string losses = slurp(run / "losses.csv");
  CHECK(losses.rfind("iteration,", 0) == 0);
  CHECK(std::count(losses.begin(), losses.end(), '\n') == 5);  // header + 4
  const std::string quality = slurp(run / "pseudo_quality.csv");
  CHECK(std::count(quality.begin(), quality.end(), '\n') == 3);  // iters 2, 4

  cmd_train(cfg);  // same config -> byte-identical artifacts
  CHECK(slurp(run / "losses.csv") == losses);
  CHECK(slurp(run / "pseudo_quality.csv") == quality);
}

TEST_CASE("eval scores a finished run and draws plots") {
  ExperimentConfig cfg = shared_cfg();
  cfg.train.flags = parse_combo("rsl+scl");
  cmd_eval(cfg);  // resolves the run trained above from the config's tag
  const fs::path run =
      fs::path(cfg.out) / "runs" / "rsl1_brs0_scl1_reps0_seed0";
  const auto reports = read_metrics_csv((run / "metrics.csv").string());
  REQUIRE(reports.size() == 1);
  CHECK(reports.front().iteration == 4);
  CHECK(reports.front().per_class.size() == 3);
  CHECK(reports.front().mean_dsc >= 0.0);
  CHECK(reports.front().mean_dsc <= 1.0);
  for (const char* name :
       {"losses.svg", "pseudo_quality.svg", "dsc_by_class.svg"}) {
    CHECK(fs::exists(run / "plots" / name));
    CHECK(fs::file_size(run / "plots" / name) > 200);
  }
}

TEST_CASE("registration-only eval propagates the labeled case") {
  const ExperimentConfig& cfg = shared_cfg();
  cmd_eval_reg_only(cfg);
  const fs::path dir = fs::path(cfg.out) / "eval_regonly";
  const auto reports = read_metrics_csv((dir / "metrics.csv").string());
  REQUIRE(reports.size() == 1);
  CHECK(reports.front().mean_dsc > 0.0);
  const json choices = json::parse(slurp(dir / "choices.json"));
  CHECK(choices.size() == 1);
  for (const auto& [id, choice] : choices.items())
    CHECK(choice.at("scored") == false);
}

TEST_CASE("ablate runs the grid and writes the table") {
  const ExperimentConfig& cfg = shared_cfg();  // none + rsl, seed 0
  cmd_ablate(cfg);
  const std::string csv = slurp(fs::path(cfg.out) / "ablation.csv");
  CHECK(csv.rfind("rsl,brs,scl,reps", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 combos
  CHECK(fs::file_size(fs::path(cfg.out) / "ablation_dsc.svg") > 200);
  for (const char* tag :
       {"rsl0_brs0_scl0_reps0_seed0", "rsl1_brs0_scl0_reps0_seed0"})
    CHECK(fs::exists(fs::path(cfg.out) / "runs" / tag / "metrics.csv"));
}

TEST_CASE("commands fail with actionable messages out of order") {
  const ExperimentConfig cfg = tiny_config(fresh_dir("regseg_cli_empty"));
  CHECK_THROWS_WITH_AS(cmd_register(cfg), doctest::Contains("generate"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(cmd_train(cfg), doctest::Contains("generate"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(cmd_eval(cfg), doctest::Contains("train"),
                       std::runtime_error);

  cmd_generate(cfg);
  CHECK_THROWS_WITH_AS(cmd_prepare_rsl(cfg), doctest::Contains("register"),
                       std::runtime_error);
  ExperimentConfig rsl_cfg = cfg;
  rsl_cfg.train.flags = parse_combo("rsl");
  CHECK_THROWS_WITH_AS(cmd_train(rsl_cfg), doctest::Contains("prepare-rsl"),
                       std::runtime_error);
  ExperimentConfig reps_cfg = cfg;
  reps_cfg.train.flags = parse_combo("scl+reps");
  CHECK_THROWS_WITH_AS(cmd_train(reps_cfg), doctest::Contains("register"),
                       std::runtime_error);
}

TEST_CASE("the command line front end parses and dispatches") {
  const fs::path dir = fresh_dir("regseg_cli_argv");
  const ExperimentConfig cfg = tiny_config(dir / "exp");
  std::ofstream(dir / "config.json") << cfg.to_json();
  const std::string cfg_arg = "--config=" + (dir / "config.json").string();
  {
    const char* argv[] = {"regseg", "generate", cfg_arg.c_str()};
    CHECK(run_cli(3, const_cast<char**>(argv)) == 0);
    CHECK(fs::exists(dir / "exp" / "cohort" / "cohort.json"));
  }
  {
    const std::string out_arg = "--out=" + (dir / "exp2").string();
    const char* argv[] = {"regseg",        "generate",
                          cfg_arg.c_str(), out_arg.c_str(),
                          "--set",         "cohort.n_test=0"};
    CHECK(run_cli(6, const_cast<char**>(argv)) == 0);
    const json manifest =
        json::parse(slurp(dir / "exp2" / "cohort" / "cohort.json"));
    CHECK(manifest.at("test").size() == 0);
  }
  {
    const char* argv[] = {"regseg", "frobnicate", cfg_arg.c_str()};
    CHECK(run_cli(3, const_cast<char**>(argv)) != 0);
  }
  {
    const char* argv[] = {"regseg", "train", cfg_arg.c_str(), "--set",
                          "train.nope=1"};
    CHECK(run_cli(5, const_cast<char**>(argv)) != 0);
  }
}
