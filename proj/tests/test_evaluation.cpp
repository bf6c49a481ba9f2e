#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "valadapt/evaluation.hpp"
#include "valadapt/rng.hpp"

using namespace valadapt;

namespace {

// A configuration small enough for unit tests: tiny corpus, tiny network,
// short trainings.
PipelineConfig mini_config() {
  PipelineConfig cfg;
  cfg.synth.n_train_speakers = 6;
  cfg.synth.n_test_speakers = 2;
  cfg.synth.n_dev_speakers = 2;
  cfg.synth.segments_per_speaker = 30;
  cfg.synth.dim = 12;
  cfg.synth.style_clusters = 2;
  cfg.n_test_speakers = 2;
  cfg.n_dev_speakers = 2;
  cfg.test_a_seconds = 100.0;
  cfg.similarity.pca_k = 3;
  cfg.similarity.gmm_mixtures = 2;
  cfg.similarity.kld_samples = 500;
  cfg.n_closest = 2;
  cfg.lambda = 3.0;
  cfg.arch.n_hidden = 2;
  cfg.arch.width = 12;
  cfg.train.dropout_p = 0.3;
  cfg.train.learning_rate = 0.01;
  cfg.train.batch_size = 32;
  cfg.train.epochs_pretrain = 12;
  cfg.train.epochs_adapt = 8;
  cfg.train.patience = 12;
  return cfg;
}

}  // namespace

TEST_CASE("evaluate_ccc matches a manual computation and rejects empties") {
  PipelineConfig cfg = mini_config();
  SeedContext ctx = prepare_seed(cfg, 3);
  MlpRegressor model = train_baseline(cfg, ctx, Attribute::valence);
  const auto& ids = ctx.parts.test_b;
  const double reported =
      evaluate_ccc(model, ctx.normalized, ids, Attribute::valence);
  Eigen::VectorXd pred = predict_scores(model, ctx.normalized, ids);
  Eigen::VectorXd truth(pred.size());
  for (long i = 0; i < pred.size(); ++i)
    truth[i] = ctx.normalized.by_id(ids[i]).label(Attribute::valence);
  CHECK(reported == doctest::Approx(ccc(truth, pred)).epsilon(1e-12));
  CHECK_THROWS_AS(evaluate_ccc(model, ctx.normalized, {}, Attribute::valence),
                  ValidationError);
}

TEST_CASE("speaker dependency: amount zero equals the baseline exactly") {
  PipelineConfig cfg = mini_config();
  EvalReport r = run_speaker_dependency(cfg, {0.0}, {Attribute::valence}, {5});
  const double base = r.baseline(Attribute::valence, 5);
  const auto dep = r.values("speaker-dependent", Attribute::valence, "", 0.0);
  REQUIRE(dep.size() == 1);
  CHECK(dep[0] == base);
}

TEST_CASE("speaker dependency report is reproducible") {
  PipelineConfig cfg = mini_config();
  EvalReport a = run_speaker_dependency(cfg, {60.0}, {Attribute::valence}, {7});
  EvalReport b = run_speaker_dependency(cfg, {60.0}, {Attribute::valence}, {7});
  CHECK(a.to_csv() == b.to_csv());
}

TEST_CASE("dropout sweep: grid validation and argmax per cell") {
  PipelineConfig cfg = mini_config();
  cfg.train.epochs_pretrain = 6;
  CHECK_THROWS_AS(run_dropout_sweep(cfg, {0.0, 0.95}, {8},
                                    {Attribute::valence}, 1),
                  ValidationError);
  DropoutSweepResult res =
      run_dropout_sweep(cfg, {0.0, 0.5}, {8}, {Attribute::valence}, 1);
  REQUIRE(res.optimal_p.size() == 1);
  const double p = res.optimal_p.at({8, static_cast<int>(Attribute::valence)});
  CHECK((p == 0.0 || p == 0.5));
  CHECK(res.report.cells().size() == 2);
  // Each cell's dev CCC is recorded; optimal is the argmax (ties -> larger).
  const auto& cells = res.report.cells();
  const double c0 = cells[0].ccc_value, c5 = cells[1].ccc_value;
  CHECK(p == ((c5 >= c0) ? 0.5 : 0.0));
}

TEST_CASE("global adaptation: budget 0 equals the baseline; cells recorded") {
  PipelineConfig cfg = mini_config();
  EvalReport r = run_global_adaptation(cfg, AdaptStrategy::unique,
                                       {0.0, 50.0}, 2, Monitor::adaptation,
                                       Attribute::valence, {2});
  const double base = r.baseline(Attribute::valence, 2);
  const auto zero = r.values("unique-ga", Attribute::valence, "", 0.0);
  REQUIRE(zero.size() == 1);
  CHECK(zero[0] == base);
  const auto adapted = r.values("unique-ga", Attribute::valence, "", 50.0);
  REQUIRE(adapted.size() == 1);
  CHECK(std::isfinite(adapted[0]));
}

TEST_CASE("weighting with lambda=1 reproduces the baseline bitwise") {
  PipelineConfig cfg = mini_config();
  cfg.lambda = 1.0;
  EvalReport r = run_global_adaptation(cfg, AdaptStrategy::weighting, {50.0},
                                       2, Monitor::dev, Attribute::valence,
                                       {11});
  const double base = r.baseline(Attribute::valence, 11);
  const auto adapted = r.values("weighting-ga", Attribute::valence, "", 50.0);
  REQUIRE(adapted.size() == 1);
  CHECK(adapted[0] == base);  // exact equality: identical training trajectory
}

TEST_CASE("individual adaptation: per-speaker models, oversampling rejected") {
  PipelineConfig cfg = mini_config();
  CHECK_THROWS_AS(
      run_individual_adaptation(cfg, AdaptStrategy::oversample, {50.0},
                                Monitor::dev, Attribute::valence, {1}),
      ValidationError);
  EvalReport r =
      run_individual_adaptation(cfg, AdaptStrategy::unique, {50.0},
                                Monitor::adaptation, Attribute::valence, {1});
  const auto vals = r.values("unique-ia", Attribute::valence);
  REQUIRE(vals.size() == 1);
  CHECK(std::isfinite(vals[0]));
}

TEST_CASE("IA concatenation: CCC is order independent under consistent "
          "pairing") {
  Rng rng(9);
  std::vector<double> preds, truths;
  for (int i = 0; i < 40; ++i) {
    preds.push_back(rng.normal());
    truths.push_back(preds.back() + 0.3 * rng.normal());
  }
  Eigen::VectorXd p = Eigen::Map<Eigen::VectorXd>(preds.data(), 40);
  Eigen::VectorXd t = Eigen::Map<Eigen::VectorXd>(truths.data(), 40);
  const double direct = ccc(t, p);
  std::vector<int> perm(40);
  for (int i = 0; i < 40; ++i) perm[i] = i;
  Rng shuffle_rng(4);
  shuffle_rng.shuffle(perm);
  Eigen::VectorXd p2(40), t2(40);
  for (int i = 0; i < 40; ++i) {
    p2[i] = p[perm[i]];
    t2[i] = t[perm[i]];
  }
  CHECK(ccc(t2, p2) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("n-sweep: one GA and one IA cell per N value") {
  PipelineConfig cfg = mini_config();
  cfg.train.epochs_pretrain = 6;
  cfg.train.epochs_adapt = 4;
  EvalReport r = run_n_sweep(cfg, {1, 2}, Attribute::valence, {3});
  int ga = 0, ia = 0;
  std::set<int> ns;
  for (const EvalCell& c : r.cells()) {
    CHECK(c.protocol == "n-sweep");
    if (c.strategy == "weighting-ga") {
      ++ga;
      ns.insert(c.n_closest);
      CHECK(c.lambda == 3.0);  // the 1:3 ratio is pinned for the sweep
    }
    if (c.strategy == "weighting-ia") ++ia;
  }
  CHECK(ga == 2);
  CHECK(ia == 2);
  CHECK(ns == std::set<int>{1, 2});
}

TEST_CASE("mtl baseline: STL column equals the speaker-independent baseline") {
  PipelineConfig cfg = mini_config();
  cfg.train.epochs_pretrain = 6;
  EvalReport r = run_mtl_baseline(cfg, 0.5, {4});
  // Every attribute has a baseline (STL) row and an mtl row.
  for (Attribute attr : kAttributes) {
    CHECK_NOTHROW(r.baseline(attr, 4));
    bool has_mtl = false;
    for (const EvalCell& c : r.cells())
      if (c.attribute == attr && c.strategy.rfind("mtl-", 0) == 0)
        has_mtl = true;
    CHECK(has_mtl);
  }
  // STL rows coincide with the global-adaptation baseline for the same seed.
  EvalReport ga = run_global_adaptation(cfg, AdaptStrategy::unique, {0.0}, 2,
                                        Monitor::dev, Attribute::valence, {4});
  CHECK(r.baseline(Attribute::valence, 4) ==
        ga.baseline(Attribute::valence, 4));
  CHECK_THROWS_AS(run_mtl_baseline(cfg, 0.0, {4}), ValidationError);
}

TEST_CASE("kfold: every speaker tests exactly once, averages reported") {
  PipelineConfig cfg = mini_config();
  cfg.train.epochs_pretrain = 5;
  cfg.train.epochs_adapt = 3;
  cfg.n_closest = 2;
  SynthConfig synth = cfg.synth;
  synth.n_train_speakers = 5;
  synth.n_test_speakers = 2;
  synth.n_dev_speakers = 2;  // 9 speakers total -> folds of 2,2,2,2,1
  synth.segments_per_speaker = 40;
  synth.seed = 77;
  Corpus corpus = generate_synthetic(synth);

  EvalReport r = run_kfold(cfg, corpus, 2, AdaptStrategy::unique,
                           Attribute::valence, 13);
  std::set<std::uint64_t> folds;
  int base_rows = 0;
  for (const EvalCell& c : r.cells()) {
    if (c.protocol == "kfold" && c.strategy == kBaselineStrategy) {
      folds.insert(c.seed);
      ++base_rows;
    }
  }
  CHECK(base_rows == 5);  // ceil(9 / 2) folds
  CHECK(folds == std::set<std::uint64_t>{0, 1, 2, 3, 4});
  bool has_avg = false;
  for (const EvalCell& c : r.cells())
    if (c.protocol == "kfold-average") has_avg = true;
  CHECK(has_avg);
}

TEST_CASE("paired_seed_test: boundary, degenerate and hand-computed cases") {
  const std::vector<double> a = {0.3, 0.4, 0.5, 0.6};
  TTestResult same = paired_seed_test(a, a);
  CHECK(same.p_value == 0.5);
  CHECK(same.t == 0.0);

  std::vector<double> shifted = a;
  for (double& v : shifted) v += 1.0;
  TTestResult degen = paired_seed_test(a, shifted);
  CHECK(degen.degenerate);
  CHECK(degen.p_value == 0.0);

  // d = b - a = [1, 2, 3, 2, 2]: t and p frozen from an independent
  // computation (mean 2, sd 0.70711, t = 2 / (sd / sqrt(5))).
  const std::vector<double> base = {1, 1, 1, 1, 1};
  const std::vector<double> high = {2, 3, 4, 3, 3};
  TTestResult r = paired_seed_test(base, high);
  CHECK(r.t == doctest::Approx(6.324555320336758).epsilon(1e-12));
  CHECK(r.p_value == doctest::Approx(0.001599101076167675).epsilon(1e-9));
  CHECK(r.dof == 4);
  CHECK(!r.degenerate);

  CHECK_THROWS_AS(paired_seed_test({1.0}, {2.0}), ValidationError);
  CHECK_THROWS_AS(paired_seed_test({1.0, 2.0}, {1.0}), ValidationError);
}

TEST_CASE("report CSV round trip and markdown generation") {
  EvalReport r;
  r.add({"global-adaptation", Attribute::valence, kBaselineStrategy, 0.0, 0,
         0.0, "dev", 1, 0.30});
  r.add({"global-adaptation", Attribute::valence, "weighting-ga", 200.0, 5,
         3.0, "adaptation", 1, 0.35});
  r.add({"global-adaptation", Attribute::valence, "weighting-ga",
         std::numeric_limits<double>::infinity(), 5, 3.0, "adaptation", 1,
         0.33});
  const auto dir =
      std::filesystem::temp_directory_path() / "valadapt_tests" / "report";
  std::filesystem::create_directories(dir);
  r.write_csv(dir / "r.csv");
  EvalReport back = EvalReport::load_csv(dir / "r.csv");
  REQUIRE(back.cells().size() == 3);
  CHECK(back.cells()[1].ccc_value == 0.35);
  CHECK(std::isinf(back.cells()[2].budget));
  CHECK(back.baseline(Attribute::valence, 1) == 0.30);

  const std::string md = r.to_markdown();
  CHECK(md.find("weighting-ga") != std::string::npos);
  CHECK(md.find("16.67") != std::string::npos);  // (0.35-0.30)/0.30 gain %
  r.write_series_csv(dir / "series.csv");
  CHECK(std::filesystem::exists(dir / "series.csv"));

  CHECK(EvalReport::relative_gain(0.35, 0.30) ==
        doctest::Approx((0.35 - 0.30) / 0.30));
}

TEST_CASE("baseline consistency across protocols sharing a seed") {
  PipelineConfig cfg = mini_config();
  cfg.train.epochs_pretrain = 6;
  EvalReport ga = run_global_adaptation(cfg, AdaptStrategy::unique, {0.0}, 2,
                                        Monitor::dev, Attribute::valence, {9});
  EvalReport sd = run_speaker_dependency(cfg, {0.0}, {Attribute::valence}, {9});
  CHECK(ga.baseline(Attribute::valence, 9) ==
        sd.baseline(Attribute::valence, 9));
}
