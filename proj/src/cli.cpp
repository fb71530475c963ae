// cli.cpp — see cli.hpp.
#include "regseg/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "regseg/evalkit.hpp"
#include "regseg/phantom.hpp"
#include "regseg/registration.hpp"
#include "regseg/regsup.hpp"
#include "regseg/resample.hpp"
#include "regseg/similarity.hpp"
#include "regseg/trainer.hpp"

namespace regseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cohort_dir(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out) / "cohort").string();
}
std::string transforms_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out) / "transforms.bin").string();
}
std::string rsl_dir(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out) / (cfg.train.flags.brs ? "rsl_brs" : "rsl_first"))
      .string();
}

CohortOnDisk require_cohort(const ExperimentConfig& cfg) {
  const fs::path manifest = fs::path(cohort_dir(cfg)) / "cohort.json";
  if (!fs::exists(manifest))
    throw std::runtime_error("no cohort at " + cohort_dir(cfg) +
                             "; run `regseg generate` first");
  return load_cohort(cohort_dir(cfg));
}

TransformTable require_table(const ExperimentConfig& cfg) {
  if (!fs::exists(transforms_path(cfg)))
    throw std::runtime_error("no transform table at " + transforms_path(cfg) +
                             "; run `regseg register` first");
  return TransformTable::load(transforms_path(cfg));
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return json::parse(f);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

/// losses.csv / pseudo_quality.csv back as named numeric columns.
std::map<std::string, std::vector<double>> read_csv_columns(
    const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error(path.string() + " is empty");
  std::vector<std::string> names;
  {
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) names.push_back(cell);
  }
  std::map<std::string, std::vector<double>> cols;
  for (const auto& n : names) cols[n];
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    for (const auto& n : names) {
      if (!std::getline(ss, cell, ','))
        throw std::runtime_error(path.string() + ": short row");
      cols[n].push_back(std::stod(cell));
    }
  }
  return cols;
}

}  // namespace

std::string run_tag(const AblationFlags& flags, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "rsl%d_brs%d_scl%d_reps%d_seed%llu",
                flags.rsl ? 1 : 0, flags.brs ? 1 : 0, flags.scl ? 1 : 0,
                flags.reps ? 1 : 0, static_cast<unsigned long long>(seed));
  return buf;
}

void cmd_generate(const ExperimentConfig& cfg) {
  const auto& co = cfg.cohort;
  const Cohort c = build_cohort(co.phantom(), co.n_train, co.n_labeled,
                                co.n_test, co.seed);
  const std::string dir = cohort_dir(cfg);
  save_cohort(c, dir);

  // Round-trip check: everything reloads bit-for-bit.
  const CohortOnDisk d = load_cohort(dir);
  const auto same_vol = [](const Array3<double>& a, const Array3<double>& b) {
    return a.dims() == b.dims() &&
           std::equal(a.data(), a.data() + a.size(), b.data());
  };
  const auto same_lab = [](const Array3<std::int32_t>& a,
                           const Array3<std::int32_t>& b) {
    return a.dims() == b.dims() &&
           std::equal(a.data(), a.data() + a.size(), b.data());
  };
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    if (!same_vol(d.train.volumes[i].voxels, c.train[i].vol.voxels) ||
        !same_lab(d.oracle_labels[i].voxels, c.train[i].lab.voxels))
      throw std::runtime_error("cohort round trip corrupted train case " +
                               c.train[i].vol.id);
  }
  for (std::size_t i = 0; i < c.test.size(); ++i) {
    if (!same_vol(d.test.volumes[i].voxels, c.test[i].vol.voxels) ||
        !same_lab(d.test.labels[i].voxels, c.test[i].lab.voxels))
      throw std::runtime_error("cohort round trip corrupted test case " +
                               c.test[i].vol.id);
  }

  std::cout << "cohort: " << dir << "\n"
            << "  train " << c.train.size() << " (labeled "
            << c.labeled.size() << "), test " << c.test.size() << ", dims "
            << co.dims[0] << "x" << co.dims[1] << "x" << co.dims[2] << "\n";
}

void cmd_register(const ExperimentConfig& cfg) {
  const CohortOnDisk d = require_cohort(cfg);
  const int n = static_cast<int>(d.train.volumes.size());
  const std::vector<std::pair<int, int>> pairs =
      cfg.pairs == "all" ? all_pairs(n)
                         : labeled_cross_pairs(n, d.train.labeled);
  if (pairs.empty())
    throw std::runtime_error("registration pair list is empty");

  const auto metric_score = [&](const Volume& fixed, const Volume& moving,
                                const Transform& t) {
    const Volume r = resample(moving, t, GridSpec::like(fixed));
    return cfg.registration.metric == RegistrationConfig::Metric::mi
               ? mutual_information(r.voxels, fixed.voxels,
                                    cfg.registration.bins)
               : -rmse(r.voxels, fixed.voxels);
  };
  const Transform ident = Transform::from_affine(AffineTransform::identity());

  int improved = 0, converged = 0;
  long long evaluations = 0;
  int done = 0;
  const TransformTable table = build_transform_table(
      d.train.volumes, pairs, cfg.registration,
      [&](int mov, int fix, const RegistrationResult& r) {
        const double base =
            metric_score(d.train.volumes[fix], d.train.volumes[mov], ident);
        if (r.score > base) ++improved;
        if (r.converged) ++converged;
        evaluations += r.evaluations;
        ++done;
        std::cout << "  pair " << done << "/" << pairs.size() << "  "
                  << d.train_ids[mov] << " -> " << d.train_ids[fix]
                  << "  score " << r.score << (r.score > base ? "" : "  (!)")
                  << "\n";
      });

  table.save(transforms_path(cfg), cfg.registration.to_json());
  json summary;
  summary["mode"] = cfg.pairs;
  summary["pairs"] = pairs.size();
  summary["improved"] = improved;
  summary["improved_rate"] =
      static_cast<double>(improved) / static_cast<double>(pairs.size());
  summary["converged"] = converged;
  summary["evaluations"] = evaluations;
  write_text(fs::path(cfg.out) / "transforms.json", summary.dump(2) + "\n");

  std::cout << "transforms: " << transforms_path(cfg) << "\n  " << pairs.size()
            << " pairs, " << improved << " improved over identity\n";
}

void cmd_prepare_rsl(const ExperimentConfig& cfg) {
  const CohortOnDisk d = require_cohort(cfg);
  const TransformTable table = require_table(cfg);
  if (d.train.labeled.empty())
    throw std::runtime_error("cohort has no labeled train case");

  RegisteredLabels r;
  if (cfg.train.flags.brs) {
    r = prepare_rsl(d.train, table, cfg.brs);
  } else {
    // Fixed source: the first labeled case, no scoring.
    const int q = d.train.labeled.front();
    for (int j : d.train.unlabeled) {
      if (!table.has(q, j))
        throw std::runtime_error("transform " + d.train_ids[q] + " -> " +
                                 d.train_ids[j] +
                                 " missing; re-run `regseg register`");
      SourceChoice choice;
      choice.source = q;
      r.volumes.push_back(j);
      r.labels.push_back(make_registered_labels(
          d.train.labels[q], table.get(q, j),
          GridSpec::like(d.train.volumes[j])));
      r.choices.push_back(choice);
    }
  }
  const std::string dir = rsl_dir(cfg);
  save_registered_labels(r, d.train, dir);

  // When sources were actually scored, compare the picks against the truth
  // ranking recovered from the cohort's warp oracle. The reference pairwise
  // map is exact for pure-affine cases and the affine part otherwise.
  int scored = 0, agree = 0;
  bool any_deformed = false;
  if (cfg.train.flags.brs && d.train.labeled.size() > 1) {
    const json oracle =
        read_json_file(fs::path(cohort_dir(cfg)) / "oracle" / "oracle.json");
    std::vector<Mat4> warp(d.train.volumes.size());
    for (std::size_t i = 0; i < d.train.volumes.size(); ++i) {
      const json& oc = oracle.at(d.train_ids[i]);
      any_deformed = any_deformed || oc.at("deformed").get<bool>();
      const auto mat = oc.at("affine").get<std::vector<double>>();
      for (int row = 0; row < 4; ++row)
        for (int col = 0; col < 4; ++col)
          warp[i](row, col) = mat[static_cast<std::size_t>(row) * 4 + col];
    }
    for (std::size_t k = 0; k < r.volumes.size(); ++k) {
      if (!r.choices[k].scored) continue;
      const int j = r.volumes[k];
      int best = -1;
      double best_err = 0.0;
      for (int q : d.train.labeled) {
        AffineTransform ref;  // case q -> case j through the template
        ref.m = warp[j] * warp[q].inverse();
        const double err = registration_error_voxels(
            table.get(q, j).affine, Transform::from_affine(ref), d.dims,
            d.spacing);
        if (best < 0 || err < best_err) {
          best = q;
          best_err = err;
        }
      }
      ++scored;
      if (best == r.choices[k].source) ++agree;
    }
    json ja;
    ja["pairs"] = scored;
    ja["affine_reference_exact"] = !any_deformed;
    if (scored > 0)
      ja["agreement"] = static_cast<double>(agree) / scored;
    write_text(fs::path(dir) / "brs_agreement.json", ja.dump(2) + "\n");
  }

  std::cout << "registered labels: " << dir << "  (" << r.volumes.size()
            << " unlabeled volumes)";
  if (scored > 0)
    std::cout << "  source agreement " << agree << "/" << scored;
  std::cout << "\n";
}

std::string cmd_train(const ExperimentConfig& cfg) {
  const CohortOnDisk d = require_cohort(cfg);
  const AblationFlags& flags = cfg.train.flags;

  TransformTable table;
  if (flags.reps) table = require_table(cfg);

  RegisteredLabels rsl;
  if (flags.rsl) {
    const fs::path dir = rsl_dir(cfg);
    if (!fs::exists(dir / "brs.json"))
      throw std::runtime_error("no registered labels at " + dir.string() +
                               "; run `regseg prepare-rsl` first");
    rsl = load_registered_labels(d.train, dir.string());
  }

  Trainer t(d.train, cfg.train, cfg.spec_a(), cfg.spec_b(),
            flags.reps ? &table : nullptr, flags.rsl ? &rsl : nullptr);

  std::vector<StepRecord> records;
  records.reserve(cfg.train.t_total);
  PseudoQualitySeries quality;
  const int every = cfg.eval.quality_every;
  const int report = std::max(1, cfg.train.t_total / 10);
  for (int i = 0; i < cfg.train.t_total; ++i) {
    records.push_back(t.step());
    if (every > 0 && t.iteration() % every == 0) {
      quality.iterations.push_back(t.iteration());
      quality.model_a.push_back(
          pseudo_label_dsc(t.model_a(), d.train, d.oracle_labels));
      quality.model_b.push_back(
          pseudo_label_dsc(t.model_b(), d.train, d.oracle_labels));
    }
    if (t.iteration() % report == 0 || t.iteration() == cfg.train.t_total) {
      const StepRecord& r = records.back();
      std::cout << "  iter " << t.iteration() << "/" << cfg.train.t_total
                << "  total_a " << r.total_a << "  total_b " << r.total_b
                << "\n";
    }
  }

  const fs::path run =
      fs::path(cfg.out) / "runs" / run_tag(flags, cfg.train.seed);
  fs::create_directories(run);
  write_text(run / "config.json", cfg.to_json());
  write_losses_csv(records, (run / "losses.csv").string());
  if (every > 0)
    write_pseudo_quality_csv(quality, (run / "pseudo_quality.csv").string());
  t.save_checkpoint((run / "checkpoints" / "final").string());

  std::cout << "run: " << run.string() << "\n";
  return run.string();
}

void cmd_eval(const ExperimentConfig& cfg, const std::string& run_dir) {
  const fs::path run = run_dir.empty()
                           ? fs::path(cfg.out) / "runs" /
                                 run_tag(cfg.train.flags, cfg.train.seed)
                           : fs::path(run_dir);
  const fs::path ckpt = run / "checkpoints" / "final";
  if (!fs::exists(ckpt / "model_a.ckpt"))
    throw std::runtime_error("no checkpoint under " + run.string() +
                             "; run `regseg train` first");
  const Model a = Model::load((ckpt / "model_a.ckpt").string());
  const Model b = Model::load((ckpt / "model_b.ckpt").string());
  const int iteration =
      read_json_file(ckpt / "trainer.json").at("iteration").get<int>();

  const CohortOnDisk d = require_cohort(cfg);
  std::vector<MetricReport> reports;
  for (std::size_t i = 0; i < d.test.volumes.size(); ++i) {
    const LabelMap pred = infer_volume(a, b, d.test.volumes[i]);
    reports.push_back(evaluate_case(pred, d.test.labels[i], d.test_ids[i],
                                    iteration, cfg.eval.volumetric_hd));
  }
  write_metrics_csv(reports, (run / "metrics.csv").string());

  const fs::path plots = run / "plots";
  fs::create_directories(plots);
  {
    const auto cols = read_csv_columns(run / "losses.csv");
    const auto series = [&](const char* name) {
      return PlotSeries{name, cols.at("iteration"), cols.at(name)};
    };
    write_line_plot_svg((plots / "losses.svg").string(), "training loss",
                        {series("total_a"), series("total_b"),
                         series("sup_a"), series("sup_b")});
  }
  if (fs::exists(run / "pseudo_quality.csv")) {
    const auto cols = read_csv_columns(run / "pseudo_quality.csv");
    write_line_plot_svg(
        (plots / "pseudo_quality.svg").string(), "pseudo-label DSC",
        {{"model_a", cols.at("iteration"), cols.at("dsc_a")},
         {"model_b", cols.at("iteration"), cols.at("dsc_b")}});
  }
  {
    std::vector<std::string> labels;
    std::vector<double> values;
    if (!reports.empty()) {
      for (std::size_t c = 0; c < reports.front().per_class.size(); ++c) {
        double s = 0.0;
        for (const auto& rep : reports) s += rep.per_class[c].dsc;
        labels.push_back("class " +
                         std::to_string(reports.front().per_class[c].cls));
        values.push_back(s / static_cast<double>(reports.size()));
      }
    }
    write_bar_chart_svg((plots / "dsc_by_class.svg").string(),
                        "test DSC by class", labels, values);
  }

  double mean_dsc = 0.0;
  for (const auto& rep : reports) mean_dsc += rep.mean_dsc;
  if (!reports.empty()) mean_dsc /= static_cast<double>(reports.size());
  std::cout << "eval: " << (run / "metrics.csv").string() << "  mean DSC "
            << mean_dsc << " over " << reports.size() << " test cases\n";
}

void cmd_eval_reg_only(const ExperimentConfig& cfg) {
  const CohortOnDisk d = require_cohort(cfg);
  if (d.train.labeled.empty())
    throw std::runtime_error("cohort has no labeled train case");
  if (d.test.volumes.empty())
    throw std::runtime_error("cohort has no test cases");

  const fs::path dir = fs::path(cfg.out) / "eval_regonly";
  fs::create_directories(dir);
  std::vector<MetricReport> reports;
  json choices;
  for (std::size_t s = 0; s < d.test.volumes.size(); ++s) {
    const Volume& target = d.test.volumes[s];
    const GridSpec target_grid = GridSpec::like(target);
    int best_q = -1;
    Transform best_t;
    double best_score = 0.0;
    for (int q : d.train.labeled) {
      const Volume& source = d.train.volumes[q];
      const Transform to_target = Transform::from_affine(
          register_affine(target, source, cfg.registration).transform);
      if (d.train.labeled.size() == 1) {
        best_q = q;
        best_t = to_target;
        break;
      }
      const Transform back = Transform::from_affine(
          register_affine(source, target, cfg.registration).transform);
      const CycleScore cs = cycle_score(target, back, to_target,
                                        GridSpec::like(source), cfg.brs);
      if (best_q < 0 || cs.composite < best_score) {
        best_q = q;
        best_t = to_target;
        best_score = cs.composite;
      }
    }
    const LabelMap pred =
        make_registered_labels(d.train.labels[best_q], best_t, target_grid);
    reports.push_back(evaluate_case(pred, d.test.labels[s], d.test_ids[s], 0,
                                    cfg.eval.volumetric_hd));
    choices[d.test_ids[s]] = {{"source", d.train_ids[best_q]},
                              {"scored", d.train.labeled.size() > 1}};
    std::cout << "  " << d.test_ids[s] << " <- " << d.train_ids[best_q]
              << "  DSC " << reports.back().mean_dsc << "\n";
  }
  write_metrics_csv(reports, (dir / "metrics.csv").string());
  write_text(dir / "choices.json", choices.dump(2) + "\n");

  double mean_dsc = 0.0;
  for (const auto& rep : reports) mean_dsc += rep.mean_dsc;
  mean_dsc /= static_cast<double>(reports.size());
  std::cout << "registration-only eval: " << (dir / "metrics.csv").string()
            << "  mean DSC " << mean_dsc << "\n";
}

void cmd_ablate(const ExperimentConfig& cfg) {
  if (!fs::exists(fs::path(cohort_dir(cfg)) / "cohort.json"))
    cmd_generate(cfg);

  bool needs_table = false, needs_first = false, needs_brs = false;
  std::vector<AblationFlags> combos;
  for (const auto& name : cfg.ablate.combos) {
    const AblationFlags f = parse_combo(name);
    combos.push_back(f);
    needs_table = needs_table || f.rsl || f.reps;
    needs_first = needs_first || (f.rsl && !f.brs);
    needs_brs = needs_brs || (f.rsl && f.brs);
  }
  if (needs_table && !fs::exists(transforms_path(cfg))) cmd_register(cfg);
  const auto ensure_rsl = [&](bool brs) {
    ExperimentConfig c = cfg;
    c.train.flags.brs = brs;
    if (!fs::exists(fs::path(rsl_dir(c)) / "brs.json")) cmd_prepare_rsl(c);
  };
  if (needs_first) ensure_rsl(false);
  if (needs_brs) ensure_rsl(true);

  std::vector<std::string> run_dirs;
  for (const AblationFlags& flags : combos)
    for (std::uint64_t seed : cfg.ablate.seeds) {
      ExperimentConfig c = cfg;
      c.train.flags = flags;
      c.train.seed = seed;
      std::cout << "== " << run_tag(flags, seed) << "\n";
      const std::string run = cmd_train(c);
      cmd_eval(c, run);
      run_dirs.push_back(run);
    }

  const std::vector<AblationRow> rows = ablation_table(run_dirs);
  write_ablation_csv(rows, (fs::path(cfg.out) / "ablation.csv").string());
  std::vector<std::string> labels;
  std::vector<double> values;
  std::cout << "combo            seeds  mean DSC  mean HD95\n";
  for (const auto& row : rows) {
    labels.push_back(combo_name(row.flags));
    values.push_back(row.mean_dsc);
    char line[96];
    std::snprintf(line, sizeof(line), "%-16s %5d  %8.4f  %9.4f\n",
                  combo_name(row.flags).c_str(), row.seeds, row.mean_dsc,
                  row.hd95_defined > 0 ? row.mean_hd95 : 0.0);
    std::cout << line;
  }
  write_bar_chart_svg((fs::path(cfg.out) / "ablation_dsc.svg").string(),
                      "ablation: test DSC", labels, values);
  std::cout << "ablation table: "
            << (fs::path(cfg.out) / "ablation.csv").string() << "\n";
}

int run_cli(int argc, char** argv) {
  CLI::App app{"cross-teaching segmentation with registration supervision"};
  app.require_subcommand(1);

  std::string config_path, out_override, run_dir;
  std::vector<std::string> overrides;
  bool reg_only = false;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")
        ->required();
    sub->add_option("--set", overrides,
                    "override a config value, dotted.path=value");
    sub->add_option("--out", out_override, "output directory override");
    return sub;
  };
  add_common(app.add_subcommand("generate", "build the phantom cohort"));
  add_common(app.add_subcommand("register", "pairwise registration table"));
  add_common(app.add_subcommand(
      "prepare-rsl", "registered labels for unlabeled volumes"));
  add_common(app.add_subcommand("train", "one training run"));
  CLI::App* ev = add_common(
      app.add_subcommand("eval", "score a run on the test cases"));
  ev->add_option("--run", run_dir, "run directory (default: config's tag)");
  ev->add_flag("--reg-only", reg_only,
               "score registration-propagated labels instead of a run");
  add_common(app.add_subcommand("ablate", "train + eval the flag grid"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ExperimentConfig cfg = ExperimentConfig::load(config_path, overrides);
    if (!out_override.empty()) cfg.out = out_override;
    fs::create_directories(cfg.out);
    if (app.got_subcommand("generate")) cmd_generate(cfg);
    else if (app.got_subcommand("register")) cmd_register(cfg);
    else if (app.got_subcommand("prepare-rsl")) cmd_prepare_rsl(cfg);
    else if (app.got_subcommand("train")) cmd_train(cfg);
    else if (app.got_subcommand("eval")) {
      if (reg_only) cmd_eval_reg_only(cfg);
      else cmd_eval(cfg, run_dir);
    } else if (app.got_subcommand("ablate")) cmd_ablate(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace regseg
