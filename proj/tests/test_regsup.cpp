// test_regsup.cpp — cycle-consistency scoring and registered labels.
#include <doctest.h>

#include <filesystem>

#include "regseg/phantom.hpp"
#include "regseg/registration.hpp"
#include "regseg/regsup.hpp"
#include "regseg/resample.hpp"
#include "testlib/oracles.hpp"

using namespace regseg;
namespace fs = std::filesystem;

namespace {

PhantomSpec base_spec() {
  PhantomSpec s;
  s.dims = {24, 24, 24};
  s.warp.deform_amp = 0.0;
  return s;
}

// Table holding exact ground-truth transforms between all cohort cases.
TransformTable gt_table(const Cohort& c) {
  const int n = static_cast<int>(c.train.size());
  TransformTable t(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      // template->j after inverting template->i gives i->j exactly.
      const AffineTransform ij =
          compose(c.train[j].gt.affine, invert(c.train[i].gt.affine));
      t.set(i, j, Transform::from_affine(ij));
    }
  return t;
}

Dataset train_view(const Cohort& c) {
  Dataset d;
  d.num_classes = 4;
  for (std::size_t n = 0; n < c.train.size(); ++n) {
    d.volumes.push_back(c.train[n].vol);
    const bool lab = std::find(c.labeled.begin(), c.labeled.end(),
                               static_cast<int>(n)) != c.labeled.end();
    if (lab) {
      d.labels.push_back(c.train[n].lab);
      d.labeled.push_back(static_cast<int>(n));
    } else {
      d.labels.emplace_back();
      d.unlabeled.push_back(static_cast<int>(n));
    }
  }
  return d;
}

}  // namespace

TEST_CASE("a perfect round trip scores near zero") {
  PhantomSpec spec = base_spec();
  Rng rng(201);
  const TemplatePhantom t = generate_template(spec, rng);
  const Transform ident = Transform::from_affine(AffineTransform::identity());
  const CycleScore s =
      cycle_score(t.vol, ident, ident, GridSpec::like(t.vol), {});
  CHECK(s.rmse_term < 1e-12);
  CHECK(s.mi_term < 1e-12);
  CHECK(s.composite < 1e-12);

  // An exact inverse pair only loses interpolation sharpness.
  Rng crng(202);
  const CohortCase cc = derive_case(t, spec, 0.3, crng, "c");
  const CycleScore s2 = cycle_score(t.vol, cc.gt, invert(cc.gt),
                                    GridSpec::like(cc.vol), {});
  CHECK(s2.rmse_term < 0.02);
  // Interpolation still dulls texture, so MI dips; it stays far from the
  // score a wrong transform earns (next test pins the ranking).
  CHECK(s2.composite < 0.35);
}

TEST_CASE("a badly wrong transform ranks worst") {
  PhantomSpec spec = base_spec();
  Rng rng(203);
  const TemplatePhantom t = generate_template(spec, rng);
  Rng crng(204);
  const CohortCase cc = derive_case(t, spec, 0.5, crng, "c");

  const CycleScore good = cycle_score(t.vol, cc.gt, invert(cc.gt),
                                      GridSpec::like(cc.vol), {});
  AffineParams far;
  far.translation = {0.0, 18.0, 18.0};  // pushes most content out of view
  const Transform bad =
      Transform::from_affine(make_affine(far, Vec3::Zero()));
  const CycleScore worse =
      cycle_score(t.vol, bad, invert(bad), GridSpec::like(cc.vol), {});
  CHECK(worse.composite > good.composite + 0.1);
}

TEST_CASE("degenerate weights collapse to a single term") {
  PhantomSpec spec = base_spec();
  Rng rng(205);
  const TemplatePhantom t = generate_template(spec, rng);
  Rng crng(206);
  const CohortCase cc = derive_case(t, spec, 0.7, crng, "c");
  const CycleWeights only_rmse{1.0, 0.0};
  const CycleScore s = cycle_score(t.vol, cc.gt, invert(cc.gt),
                                   GridSpec::like(cc.vol), only_rmse);
  CHECK(s.composite == s.rmse_term);
  const CycleWeights only_mi{0.0, 1.0};
  const CycleScore s2 = cycle_score(t.vol, cc.gt, invert(cc.gt),
                                    GridSpec::like(cc.vol), only_mi);
  CHECK(s2.composite == s2.mi_term);
}

TEST_CASE("one labeled candidate is returned without scoring") {
  PhantomSpec spec = base_spec();
  const Cohort c = build_cohort(spec, 3, 1, 0, 207);
  const Dataset train = train_view(c);
  TransformTable empty(3);  // must not be consulted
  const SourceChoice choice = select_best_labeled(1, train, empty, {});
  CHECK(choice.source == 0);
  CHECK_FALSE(choice.scored);
  CHECK(choice.scores.empty());
}

TEST_CASE("scoring prefers the gently warped candidate") {
  PhantomSpec spec = base_spec();
  Rng trng(208);
  const TemplatePhantom t = generate_template(spec, trng);

  int wins = 0;
  const int trials = 5;
  for (int trial = 0; trial < trials; ++trial) {
    Rng r1(300 + trial), r2(400 + trial), r3(500 + trial);
    // Unlabeled volume u plus two candidates warped away from it: one mild,
    // one severe.
    const CohortCase u = derive_case(t, spec, 0.4, r1, "u");
    const TemplatePhantom around_u{u.vol, u.lab};
    const CohortCase mild = derive_case(around_u, spec, 0.2, r2, "mild");
    const CohortCase severe = derive_case(around_u, spec, 1.0, r3, "severe");

    Dataset train;
    train.num_classes = 4;
    train.volumes = {mild.vol, severe.vol, u.vol};
    train.labels = {mild.lab, severe.lab, LabelMap{}};
    train.labeled = {0, 1};
    train.unlabeled = {2};

    RegistrationConfig cfg;
    cfg.metric = RegistrationConfig::Metric::mi;
    cfg.seed = 600 + trial;
    const TransformTable table = build_transform_table(
        train.volumes, labeled_cross_pairs(3, train.labeled), cfg);
    const SourceChoice choice = select_best_labeled(2, train, table, {});
    CHECK(choice.scored);
    REQUIRE(choice.scores.size() == 2);
    if (choice.source == 0) ++wins;

    // Rescaling both weights by the same factor never changes the argmin.
    const SourceChoice scaled =
        select_best_labeled(2, train, table, CycleWeights{1.5, 1.5});
    CHECK(scaled.source == choice.source);
  }
  CHECK(wins >= 4);
}

TEST_CASE("ground-truth transforms propagate labels perfectly") {
  PhantomSpec spec = base_spec();
  Rng trng(209);
  const TemplatePhantom t = generate_template(spec, trng);

  // Identity leaves the labels untouched, voxel for voxel.
  const Transform ident = Transform::from_affine(AffineTransform::identity());
  const LabelMap same = make_registered_labels(t.lab, ident,
                                               GridSpec::like(t.vol));
  REQUIRE(same.voxels.size() == t.lab.voxels.size());
  for (std::size_t q = 0; q < same.voxels.size(); ++q)
    REQUIRE(same.voxels[q] == t.lab.voxels[q]);

  // A case's labels were made by pushing the source labels through its
  // transform, so propagating with that exact transform recovers them.
  Rng crng(214);
  const CohortCase cc = derive_case(t, spec, 0.6, crng, "c");
  const LabelMap r = make_registered_labels(t.lab, cc.gt,
                                            GridSpec::like(cc.vol));
  for (int cls = 0; cls < 4; ++cls)
    CHECK(oracle::dsc_ref(r.voxels, cc.lab.voxels, cls) == 1.0);

  // Same thing at cohort scope through the table.
  Rng r1(215), r2(216);
  const CohortCase u1 = derive_case(t, spec, 0.5, r1, "u1");
  const CohortCase u2 = derive_case(t, spec, 0.8, r2, "u2");
  Dataset train;
  train.num_classes = 4;
  train.volumes = {t.vol, u1.vol, u2.vol};
  train.labels = {t.lab, LabelMap{}, LabelMap{}};
  train.labeled = {0};
  train.unlabeled = {1, 2};
  TransformTable table(3);
  table.set(0, 1, u1.gt);
  table.set(1, 0, invert(u1.gt));
  table.set(0, 2, u2.gt);
  table.set(2, 0, invert(u2.gt));
  const RegisteredLabels rsl = prepare_rsl(train, table, {});
  REQUIRE(rsl.volumes == std::vector<int>{1, 2});
  const CohortCase* cases[] = {&u1, &u2};
  for (std::size_t n = 0; n < rsl.volumes.size(); ++n)
    for (int cls = 0; cls < 4; ++cls)
      CHECK(oracle::dsc_ref(rsl.labels[n].voxels, cases[n]->lab.voxels, cls) ==
            1.0);
}

TEST_CASE("estimated transforms beat copying labels straight over") {
  PhantomSpec spec = base_spec();
  const Cohort c = build_cohort(spec, 3, 1, 0, 210);
  const Dataset train = train_view(c);

  RegistrationConfig cfg;
  cfg.metric = RegistrationConfig::Metric::mi;
  cfg.seed = 211;
  const TransformTable table = build_transform_table(
      train.volumes, labeled_cross_pairs(3, train.labeled), cfg);
  const RegisteredLabels r = prepare_rsl(train, table, {});

  for (std::size_t n = 0; n < r.volumes.size(); ++n) {
    const LabelMap& truth = c.train[r.volumes[n]].lab;
    const LabelMap& naive = c.train[0].lab;  // unwarped source labels
    double got = 0.0, base = 0.0;
    for (int cls = 1; cls < 4; ++cls) {
      got += oracle::dsc_ref(r.labels[n].voxels, truth.voxels, cls);
      base += oracle::dsc_ref(naive.voxels, truth.voxels, cls);
    }
    CHECK(got > base);
    CHECK(got / 3.0 > 0.5);  // registration recovers most of the shape
  }
}

TEST_CASE("registered labels persist with provenance and reload") {
  PhantomSpec spec = base_spec();
  const Cohort c = build_cohort(spec, 4, 2, 0, 212);
  const Dataset train = train_view(c);
  const TransformTable table = gt_table(c);
  const RegisteredLabels r = prepare_rsl(train, table, {});

  const fs::path dir = fs::temp_directory_path() / "regseg_regsup";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_registered_labels(r, train, dir.string());
  CHECK(fs::exists(dir / "brs.json"));

  const RegisteredLabels re = load_registered_labels(train, dir.string());
  REQUIRE(re.volumes == r.volumes);
  for (std::size_t n = 0; n < r.labels.size(); ++n) {
    CHECK(re.choices[n].source == r.choices[n].source);
    for (std::size_t q = 0; q < r.labels[n].voxels.size(); ++q)
      REQUIRE(re.labels[n].voxels[q] == r.labels[n].voxels[q]);
  }

  // Same inputs, same bytes: the selection is pure.
  const RegisteredLabels r2 = prepare_rsl(train, table, {});
  for (std::size_t n = 0; n < r.labels.size(); ++n)
    for (std::size_t q = 0; q < r.labels[n].voxels.size(); ++q)
      REQUIRE(r2.labels[n].voxels[q] == r.labels[n].voxels[q]);
}

TEST_CASE("missing table entries fail fast") {
  PhantomSpec spec = base_spec();
  const Cohort c = build_cohort(spec, 3, 2, 0, 213);
  const Dataset train = train_view(c);
  TransformTable sparse(3);
  sparse.set(2, 0, Transform::from_affine(AffineTransform::identity()));
  // (0,2) direction and the (2,1)/(1,2) pair are absent.
  CHECK_THROWS_AS(select_best_labeled(2, train, sparse, {}),
                  std::runtime_error);
}
