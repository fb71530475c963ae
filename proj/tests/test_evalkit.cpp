// test_evalkit.cpp — metric values vs. hand counts and plain-loop oracles,
// empty-mask conventions, report assembly, CSV round trips, the ablation
// table, and plot emission.
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "regseg/evalkit.hpp"
#include "regseg/prng.hpp"
#include "testlib/oracles.hpp"

using namespace regseg;

namespace {

Array3<std::int32_t> mask3(Dims d) { return Array3<std::int32_t>(d); }

Array3<std::int32_t> random_mask(Dims d, int classes, Rng& rng) {
  auto m = mask3(d);
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = static_cast<std::int32_t>(rng.uniform_int(classes));
  return m;
}

std::string temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("evalkit_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

/// Cohort plus full oracle labels (the dataset itself hides the unlabeled
/// volumes' labels, the oracle keeps them).
std::pair<Dataset, std::vector<LabelMap>> make_cohort_with_oracle(
    int n_volumes, int depth, int hw, int n_labeled, std::uint64_t seed) {
  Dataset ds;
  ds.num_classes = 4;
  std::vector<LabelMap> oracle;
  Rng rng(seed);
  for (int v = 0; v < n_volumes; ++v) {
    Volume vol;
    vol.id = "v" + std::to_string(v);
    vol.voxels = Array3<double>({depth, hw, hw});
    LabelMap lab;
    lab.id = vol.id;
    lab.num_classes = 4;
    lab.voxels = Array3<std::int32_t>({depth, hw, hw});
    for (int z = 0; z < depth; ++z)
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const int band = ((4 * y) / hw + v + z) % 4;
          vol.voxels.at(z, y, x) = 0.125 + 0.25 * band + 0.02 * rng.normal();
          lab.voxels.at(z, y, x) = band;
        }
    ds.volumes.push_back(std::move(vol));
    oracle.push_back(lab);
    if (v >= n_labeled) lab.voxels = Array3<std::int32_t>();
    ds.labels.push_back(std::move(lab));
    (v < n_labeled ? ds.labeled : ds.unlabeled).push_back(v);
  }
  return {std::move(ds), std::move(oracle)};
}

}  // namespace

TEST_CASE("dsc: hand-counted examples and conventions") {
  auto a = mask3({1, 4, 4}), b = mask3({1, 4, 4});
  SUBCASE("identical masks score 1") {
    a.at(0, 1, 1) = 1;
    a.at(0, 2, 2) = 1;
    b = a;
    CHECK(dsc(a, b, 1) == 1.0);
    CHECK(dsc(a, b, 0) == 1.0);
  }
  SUBCASE("disjoint equal-size masks score 0") {
    a.at(0, 0, 0) = 1;
    b.at(0, 3, 3) = 1;
    CHECK(dsc(a, b, 1) == 0.0);
  }
  SUBCASE("two 2x2 squares sharing two pixels score one half") {
    // a covers columns 0-1, b covers columns 1-2, rows 0-1: overlap is 2
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        a.at(0, y, x) = 1;
        b.at(0, y, x + 1) = 1;
      }
    CHECK(dsc(a, b, 1) == 0.5);
  }
  SUBCASE("empty-mask conventions") {
    CHECK(dsc(a, b, 1) == 1.0);  // both empty
    a.at(0, 0, 0) = 1;
    CHECK(dsc(a, b, 1) == 0.0);  // one empty
  }
  SUBCASE("grids must match") {
    auto c = mask3({1, 4, 5});
    CHECK_THROWS_AS(dsc(a, c, 1), std::invalid_argument);
  }
}

TEST_CASE("dsc equals the reference on random masks, exactly") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_mask({2, 16, 16}, 3, rng);
    const auto b = random_mask({2, 16, 16}, 3, rng);
    for (int cls = 0; cls < 3; ++cls) {
      CHECK(dsc(a, b, cls) == oracle::dsc_ref(a, b, cls));
      CHECK(dsc(a, b, cls) == dsc(b, a, cls));  // symmetry
    }
  }
}

TEST_CASE("hd95: hand-derived examples") {
  const Spacing unit{1.0, 1.0, 1.0};
  SUBCASE("identical masks sit at distance zero") {
    auto a = mask3({1, 8, 8});
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) a.at(0, y, x) = 1;
    const auto h = hd95(a, a, 1, unit);
    REQUIRE(h.defined);
    CHECK(h.value == 0.0);
  }
  SUBCASE("single pixels three apart, spacing one") {
    auto a = mask3({1, 8, 8}), b = mask3({1, 8, 8});
    a.at(0, 4, 1) = 1;
    b.at(0, 4, 4) = 1;
    const auto h = hd95(a, b, 1, unit);
    REQUIRE(h.defined);
    CHECK(h.value == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("doubling spacing doubles the distance") {
    auto a = mask3({1, 8, 8}), b = mask3({1, 8, 8});
    a.at(0, 2, 2) = 1;
    b.at(0, 5, 6) = 1;
    const auto h1 = hd95(a, b, 1, {1.0, 1.0, 1.0});
    const auto h2 = hd95(a, b, 1, {1.0, 2.0, 2.0});
    REQUIRE(h1.defined);
    REQUIRE(h2.defined);
    CHECK(h2.value == doctest::Approx(2.0 * h1.value).epsilon(1e-12));
  }
  SUBCASE("interpolated percentile on an uneven distance pool") {
    // a = {(0,0)}, b = {(0,0),(0,4)}: pooled distances {0, 0, 4},
    // 95th percentile lands at 0.1·0 + 0.9·4 = 3.6
    auto a = mask3({1, 8, 8}), b = mask3({1, 8, 8});
    a.at(0, 0, 0) = 1;
    b.at(0, 0, 0) = 1;
    b.at(0, 0, 4) = 1;
    const auto h = hd95(a, b, 1, unit);
    REQUIRE(h.defined);
    CHECK(h.value == doctest::Approx(3.6).epsilon(1e-12));
  }
  SUBCASE("either mask empty leaves the metric undefined") {
    auto a = mask3({1, 8, 8}), b = mask3({1, 8, 8});
    a.at(0, 3, 3) = 1;
    CHECK_FALSE(hd95(a, b, 1, unit).defined);
    CHECK_FALSE(hd95(b, a, 1, unit).defined);
    CHECK_FALSE(hd95(b, b, 1, unit).defined);
  }
  SUBCASE("slices average: two slices with distances 1 and 3 give 2") {
    auto a = mask3({2, 8, 8}), b = mask3({2, 8, 8});
    a.at(0, 4, 2) = 1;
    b.at(0, 4, 3) = 1;  // distance 1 on slice 0
    a.at(1, 4, 1) = 1;
    b.at(1, 4, 4) = 1;  // distance 3 on slice 1
    const auto h = hd95(a, b, 1, unit);
    REQUIRE(h.defined);
    CHECK(h.value == doctest::Approx(2.0).epsilon(1e-12));
  }
}

TEST_CASE("volumetric hd95 sees out-of-plane distance") {
  auto a = mask3({4, 6, 6}), b = mask3({4, 6, 6});
  a.at(0, 3, 3) = 1;
  b.at(3, 3, 3) = 1;  // same in-plane spot, three slices apart
  const Spacing s{2.0, 1.0, 1.0};
  SUBCASE("the slice-wise variant finds no covered slice") {
    CHECK_FALSE(hd95(a, b, 1, s, false).defined);
  }
  SUBCASE("the 3D variant measures the spacing-weighted gap") {
    const auto h = hd95(a, b, 1, s, true);
    REQUIRE(h.defined);
    CHECK(h.value == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("identical volumes are at zero") {
    const auto h = hd95(a, a, 1, s, true);
    REQUIRE(h.defined);
    CHECK(h.value == 0.0);
  }
}

TEST_CASE("hd95 equals the reference within 1e-9 on random pairs") {
  Rng rng(29);
  int defined_pairs = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_mask({2, 16, 16}, 3, rng);
    const auto b = random_mask({2, 16, 16}, 3, rng);
    for (int cls = 1; cls < 3; ++cls) {
      const auto got = hd95(a, b, cls, {1.0, 0.7, 1.3});
      const auto ref = oracle::hd95_ref(a, b, cls, 0.7, 1.3);
      REQUIRE(got.defined == ref.defined);
      if (got.defined) {
        CHECK(std::abs(got.value - ref.value) < 1e-9);
        ++defined_pairs;
      }
      const auto swapped = hd95(b, a, cls, {1.0, 0.7, 1.3});
      CHECK(swapped.defined == got.defined);
      if (got.defined) CHECK(swapped.value == got.value);
    }
  }
  CHECK(defined_pairs > 150);  // the comparison actually exercised distances
}

TEST_CASE("case reports aggregate foreground classes") {
  LabelMap gt;
  gt.num_classes = 4;
  gt.spacing = {1.0, 1.0, 1.0};
  gt.voxels = mask3({1, 8, 8});
  // class 1 present, class 2 present, class 3 absent everywhere
  for (int x = 0; x < 3; ++x) gt.voxels.at(0, 2, x) = 1;
  for (int x = 4; x < 7; ++x) gt.voxels.at(0, 5, x) = 2;
  LabelMap pred = gt;

  SUBCASE("perfect prediction") {
    const auto rep = evaluate_case(pred, gt, "c0", 42);
    CHECK(rep.case_id == "c0");
    CHECK(rep.iteration == 42);
    REQUIRE(rep.per_class.size() == 3);
    CHECK(rep.mean_dsc == 1.0);
    CHECK(rep.hd95_defined == 2);  // class 3 absent from both: undefined
    CHECK(rep.mean_hd95 == 0.0);
    CHECK(rep.per_class[2].dsc == 1.0);  // absent-absent convention
    CHECK_FALSE(rep.per_class[2].hd95.defined);
  }
  SUBCASE("a displaced class moves the means") {
    pred.voxels = mask3({1, 8, 8});
    for (int x = 1; x < 4; ++x) pred.voxels.at(0, 2, x) = 1;  // shift class 1
    for (int x = 4; x < 7; ++x) pred.voxels.at(0, 5, x) = 2;  // keep class 2
    const auto rep = evaluate_case(pred, gt, "c1", 0);
    const double d1 = dsc(pred.voxels, gt.voxels, 1);
    CHECK(rep.per_class[0].dsc == d1);
    CHECK(rep.mean_dsc ==
          doctest::Approx((d1 + 1.0 + 1.0) / 3.0).epsilon(1e-12));
    CHECK(rep.hd95_defined == 2);
    CHECK(rep.mean_hd95 > 0.0);
  }
  SUBCASE("grid and class-count misuse is rejected") {
    LabelMap small = gt;
    small.voxels = mask3({1, 8, 7});
    CHECK_THROWS_AS(evaluate_case(small, gt, "x", 0),
                    std::invalid_argument);
    LabelMap flat = gt;
    flat.num_classes = 1;
    CHECK_THROWS_AS(evaluate_case(pred, flat, "x", 0),
                    std::invalid_argument);
  }
}

TEST_CASE("single-model predictions take the per-pixel argmax") {
  ModelSpec spec;
  spec.arch = ModelSpec::Arch::convnet;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.num_classes = 4;
  Model m(spec, 31);
  Rng rng(2);
  Array2<double> slice(8, 8);
  for (std::size_t i = 0; i < slice.size(); ++i) slice[i] = rng.uniform();

  const auto pred = predict_slice(m, slice);
  auto prob = m.forward(make_input({slice})).prob;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      int best = 0;
      double best_v = -1.0;
      for (int c = 0; c < 4; ++c) {
        const double v = prob->value((static_cast<long>(c) * 8 + y) * 8 + x);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      CHECK(pred.at(y, x) == best);
    }
}

TEST_CASE("pseudo-label quality scores the unlabeled volumes") {
  auto [ds, oracle_labels] = make_cohort_with_oracle(3, 2, 8, 1, 3);
  ModelSpec spec;
  spec.arch = ModelSpec::Arch::convnet;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.num_classes = 4;
  Model m(spec, 5);

  SUBCASE("an oracle built from the model's own output scores 1") {
    std::vector<LabelMap> self = oracle_labels;
    for (const int v : ds.unlabeled) {
      auto& lm = self[static_cast<std::size_t>(v)];
      for (int z = 0; z < 2; ++z) {
        const auto plane = predict_slice(
            m, slice_of(ds.volumes[static_cast<std::size_t>(v)], z));
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) lm.voxels.at(z, y, x) = plane.at(y, x);
      }
    }
    CHECK(pseudo_label_dsc(m, ds, self) == 1.0);
  }
  SUBCASE("scores stay inside the unit interval") {
    const double q = pseudo_label_dsc(m, ds, oracle_labels);
    CHECK(q >= 0.0);
    CHECK(q <= 1.0);
  }
  SUBCASE("misuse is rejected") {
    std::vector<LabelMap> short_oracle(oracle_labels.begin(),
                                       oracle_labels.end() - 1);
    CHECK_THROWS_AS(pseudo_label_dsc(m, ds, short_oracle),
                    std::invalid_argument);
    Dataset lonely = ds;
    lonely.unlabeled.clear();
    CHECK_THROWS_AS(pseudo_label_dsc(m, lonely, oracle_labels),
                    std::invalid_argument);
  }
}

TEST_CASE("quality tracking logs at the requested cadence") {
  auto [ds, oracle_labels] = make_cohort_with_oracle(4, 2, 8, 2, 13);
  ModelSpec sa;
  sa.arch = ModelSpec::Arch::convnet;
  sa.in_height = 8;
  sa.in_width = 8;
  sa.num_classes = 4;
  ModelSpec sb = sa;
  sb.arch = ModelSpec::Arch::mixer;
  TrainConfig cfg;
  cfg.t_total = 20;
  cfg.flags = {false, false, false, false};
  Trainer t(ds, cfg, sa, sb, nullptr, nullptr);

  const auto series = track_pseudo_quality(t, oracle_labels, 6, 2);
  CHECK(series.iterations == std::vector<int>{2, 4, 6});
  REQUIRE(series.model_a.size() == 3);
  REQUIRE(series.model_b.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(series.model_a[i] >= 0.0);
    CHECK(series.model_a[i] <= 1.0);
    CHECK(series.model_b[i] >= 0.0);
    CHECK(series.model_b[i] <= 1.0);
  }
  CHECK(t.iteration() == 6);
  CHECK_THROWS_AS(track_pseudo_quality(t, oracle_labels, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("metric CSV round trip preserves every field") {
  const auto dir = temp_dir("metrics");
  std::vector<MetricReport> reports;
  Rng rng(7);
  for (int i = 0; i < 3; ++i) {
    MetricReport rep;
    rep.case_id = "case" + std::to_string(i);
    rep.iteration = 100 * i;
    double dsc_acc = 0.0, hd_acc = 0.0;
    for (int c = 1; c <= 3; ++c) {
      ClassMetric cm;
      cm.cls = c;
      cm.dsc = rng.uniform();
      cm.hd95.defined = c != 2;
      cm.hd95.value = cm.hd95.defined ? 3.0 * rng.uniform() : 0.0;
      dsc_acc += cm.dsc;
      if (cm.hd95.defined) {
        hd_acc += cm.hd95.value;
        ++rep.hd95_defined;
      }
      rep.per_class.push_back(cm);
    }
    rep.mean_dsc = dsc_acc / 3.0;
    rep.mean_hd95 = hd_acc / rep.hd95_defined;
    reports.push_back(rep);
  }
  const auto path = dir + "/metrics.csv";
  write_metrics_csv(reports, path);
  const auto back = read_metrics_csv(path);
  REQUIRE(back.size() == reports.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].case_id == reports[i].case_id);
    CHECK(back[i].iteration == reports[i].iteration);
    REQUIRE(back[i].per_class.size() == reports[i].per_class.size());
    for (std::size_t c = 0; c < back[i].per_class.size(); ++c) {
      CHECK(back[i].per_class[c].cls == reports[i].per_class[c].cls);
      CHECK(back[i].per_class[c].dsc == reports[i].per_class[c].dsc);
      CHECK(back[i].per_class[c].hd95.value ==
            reports[i].per_class[c].hd95.value);
      CHECK(back[i].per_class[c].hd95.defined ==
            reports[i].per_class[c].hd95.defined);
    }
    CHECK(back[i].mean_dsc == doctest::Approx(reports[i].mean_dsc)
                                  .epsilon(1e-15));
    CHECK(back[i].hd95_defined == reports[i].hd95_defined);
  }
  CHECK_THROWS_AS(read_metrics_csv(dir + "/absent.csv"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("loss and quality CSVs carry one row per record") {
  const auto dir = temp_dir("csv");
  std::vector<StepRecord> records(3);
  for (int i = 0; i < 3; ++i) {
    records[static_cast<std::size_t>(i)].iteration = i;
    records[static_cast<std::size_t>(i)].total_a = 1.5 - 0.1 * i;
  }
  write_losses_csv(records, dir + "/losses.csv");
  PseudoQualitySeries series;
  series.iterations = {10, 20};
  series.model_a = {0.25, 0.5};
  series.model_b = {0.3, 0.45};
  write_pseudo_quality_csv(series, dir + "/pseudo_quality.csv");

  std::ifstream lf(dir + "/losses.csv");
  std::string line;
  int rows = 0;
  std::getline(lf, line);
  CHECK(line ==
        "iteration,w_cps,sup_a,cps_a,cl_a,rs_a,total_a,"
        "sup_b,cps_b,cl_b,rs_b,total_b,rsl_missing");
  while (std::getline(lf, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  std::ifstream qf(dir + "/pseudo_quality.csv");
  std::getline(qf, line);
  CHECK(line == "iteration,dsc_a,dsc_b");
  std::getline(qf, line);
  CHECK(line == "10,0.25,0.29999999999999999");
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablation table groups runs by flags and averages seeds") {
  const auto dir = temp_dir("ablate");
  const auto make_run = [&](const std::string& name, bool rsl,
                            const std::vector<std::string>& rows) {
    const auto run = dir + "/" + name;
    std::filesystem::create_directories(run);
    std::ofstream cf(run + "/config.json");
    cf << "{\"train\":{\"flags\":{\"rsl\":" << (rsl ? "true" : "false")
       << ",\"brs\":false,\"scl\":false,\"reps\":false}}}\n";
    std::ofstream mf(run + "/metrics.csv");
    mf << "iteration,case,cls,dsc,hd95,hd95_defined\n";
    for (const auto& r : rows) mf << r << "\n";
    return run;
  };
  // baseline, two seeds: run means 0.6/3 and 0.8/1
  const auto r1 = make_run("s0", false,
                           {"100,c0,1,0.5,2,1", "100,c0,2,0.7,4,1"});
  const auto r2 = make_run("s1", false,
                           {"100,c0,1,0.9,1,1", "100,c0,2,0.7,0,0"});
  // rsl on, one seed: run mean 0.9/1
  const auto r3 = make_run("s2", true, {"100,c0,1,0.9,1,1"});

  const auto rows = ablation_table({r1, r2, r3});
  REQUIRE(rows.size() == 2);
  CHECK_FALSE(rows[0].flags.rsl);  // lexicographic: all-false first
  CHECK(rows[1].flags.rsl);
  CHECK(rows[0].seeds == 2);
  CHECK(rows[0].mean_dsc == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(rows[0].mean_hd95 == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(rows[0].hd95_defined == 2);
  CHECK(rows[1].seeds == 1);
  CHECK(rows[1].mean_dsc == doctest::Approx(0.9).epsilon(1e-12));

  const auto path = dir + "/ablation.csv";
  write_ablation_csv(rows, path);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "rsl,brs,scl,reps,seeds,mean_dsc,mean_hd95,hd95_defined");
  std::getline(f, line);
  CHECK(line.substr(0, 10) == "0,0,0,0,2,");

  SUBCASE("missing inputs fail loudly") {
    CHECK_THROWS_AS(ablation_table({r1}), std::invalid_argument);
    const auto bare = dir + "/bare";
    std::filesystem::create_directories(bare);
    CHECK_THROWS_AS(ablation_table({r1, bare}), std::runtime_error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("plots are well-formed SVG documents") {
  const auto dir = temp_dir("plots");
  PlotSeries s1{"model a", {0, 1, 2, 3}, {1.0, 0.7, 0.5, 0.4}};
  PlotSeries s2{"model b", {0, 1, 2, 3}, {1.1, 0.8, 0.6, 0.45}};
  write_line_plot_svg(dir + "/loss.svg", "loss", {s1, s2});
  write_bar_chart_svg(dir + "/bars.svg", "per-class DSC", {"c1", "c2"},
                      {0.8, 0.6});

  std::ifstream lf(dir + "/loss.svg");
  std::string text((std::istreambuf_iterator<char>(lf)),
                   std::istreambuf_iterator<char>());
  CHECK(text.find("<svg") == 0);
  CHECK(text.find("</svg>") != std::string::npos);
  std::size_t polylines = 0, at = 0;
  while ((at = text.find("<polyline", at)) != std::string::npos) {
    ++polylines;
    ++at;
  }
  CHECK(polylines == 2);
  CHECK(text.find("model a") != std::string::npos);

  std::ifstream bf(dir + "/bars.svg");
  std::string bars((std::istreambuf_iterator<char>(bf)),
                   std::istreambuf_iterator<char>());
  CHECK(bars.find("<svg") == 0);
  std::size_t rects = 0;
  at = 0;
  while ((at = bars.find("<rect", at)) != std::string::npos) {
    ++rects;
    ++at;
  }
  CHECK(rects == 3);  // background + two bars
  CHECK_THROWS_AS(
      write_bar_chart_svg(dir + "/bad.svg", "t", {"one"}, {0.1, 0.2}),
      std::invalid_argument);
  std::filesystem::remove_all(dir);
}
