#include "valadapt/evaluation.hpp"

#include <algorithm>
#include <bit>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include "valadapt/rng.hpp"

namespace valadapt {

namespace {

std::uint64_t bits_of(double v) { return std::bit_cast<std::uint64_t>(v); }

double median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string budget_str(double budget) {
  if (std::isinf(budget)) return "all";
  std::ostringstream os;
  os.precision(17);
  os << budget;
  return os.str();
}

double budget_from_str(const std::string& s) {
  if (s == "all") return std::numeric_limits<double>::infinity();
  return std::stod(s);
}

}  // namespace

void PipelineConfig::validate() const {
  synth.validate();
  train.validate();
  if (n_test_speakers < 1 || n_dev_speakers < 1)
    throw ValidationError("PipelineConfig: speaker counts must be >= 1");
  if (test_a_seconds <= 0.0)
    throw ValidationError("PipelineConfig: test_a_seconds must be > 0");
  if (similarity.pca_k < 1 || similarity.gmm_mixtures < 1 ||
      similarity.kld_samples < 2)
    throw ValidationError("PipelineConfig: bad similarity settings");
  if (n_closest < 1) throw ValidationError("PipelineConfig: n_closest >= 1");
  if (lambda < 1.0) throw ValidationError("PipelineConfig: lambda >= 1");
}

// --- EvalReport -----------------------------------------------------------------

void EvalReport::append(const EvalReport& other) {
  cells_.insert(cells_.end(), other.cells_.begin(), other.cells_.end());
}

std::vector<double> EvalReport::values(const std::string& strategy,
                                       Attribute attribute,
                                       const std::string& monitor,
                                       std::optional<double> budget) const {
  std::vector<double> out;
  for (const EvalCell& c : cells_) {
    if (c.strategy != strategy || c.attribute != attribute) continue;
    if (!monitor.empty() && c.monitor != monitor) continue;
    if (budget && !(c.budget == *budget ||
                    (std::isinf(*budget) && std::isinf(c.budget))))
      continue;
    out.push_back(c.ccc_value);
  }
  return out;
}

double EvalReport::baseline(Attribute attribute, std::uint64_t seed) const {
  for (const EvalCell& c : cells_)
    if (c.strategy == kBaselineStrategy && c.attribute == attribute &&
        c.seed == seed)
      return c.ccc_value;
  throw ValidationError("EvalReport: no baseline cell for seed " +
                        std::to_string(seed));
}

double EvalReport::relative_gain(double adapted, double baseline) {
  if (baseline == 0.0) throw NumericalError("relative gain: zero baseline");
  return (adapted - baseline) / baseline;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "protocol,attribute,strategy,budget,N,lambda,monitor,seed,ccc\n";
  for (const EvalCell& c : cells_) {
    os << c.protocol << ',' << attribute_name(c.attribute) << ',' << c.strategy
       << ',' << budget_str(c.budget) << ',' << c.n_closest << ',' << c.lambda
       << ',' << c.monitor << ',' << c.seed << ',' << c.ccc_value << '\n';
  }
  return os.str();
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os << to_csv();
}

EvalReport EvalReport::load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) ||
      line != "protocol,attribute,strategy,budget,N,lambda,monitor,seed,ccc")
    throw ValidationError(path.string() + ": bad report header");
  EvalReport r;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream fs(line);
    std::string tok;
    EvalCell c;
    std::getline(fs, c.protocol, ',');
    std::getline(fs, tok, ',');
    c.attribute = attribute_from_name(tok);
    std::getline(fs, c.strategy, ',');
    std::getline(fs, tok, ',');
    c.budget = budget_from_str(tok);
    std::getline(fs, tok, ',');
    c.n_closest = std::stoi(tok);
    std::getline(fs, tok, ',');
    c.lambda = std::stod(tok);
    std::getline(fs, c.monitor, ',');
    std::getline(fs, tok, ',');
    c.seed = std::stoull(tok);
    std::getline(fs, tok, ',');
    c.ccc_value = std::stod(tok);
    r.add(std::move(c));
  }
  return r;
}

std::string EvalReport::to_markdown() const {
  std::set<std::string> protocols;
  for (const EvalCell& c : cells_) protocols.insert(c.protocol);
  std::ostringstream os;
  os << "# Evaluation report\n";
  for (const std::string& proto : protocols) {
    os << "\n## " << proto << "\n";
    for (Attribute attr : kAttributes) {
      // Baselines per seed for gains.
      std::map<std::uint64_t, double> base;
      std::vector<double> base_vals;
      for (const EvalCell& c : cells_)
        if (c.protocol == proto && c.attribute == attr &&
            c.strategy == kBaselineStrategy) {
          base[c.seed] = c.ccc_value;
          base_vals.push_back(c.ccc_value);
        }
      struct Key {
        std::string strategy, monitor;
        double budget;
        int n;
        double lambda;
        bool operator<(const Key& o) const {
          return std::tie(strategy, monitor, budget, n, lambda) <
                 std::tie(o.strategy, o.monitor, o.budget, o.n, o.lambda);
        }
      };
      std::map<Key, std::vector<std::pair<std::uint64_t, double>>> rows;
      for (const EvalCell& c : cells_) {
        if (c.protocol != proto || c.attribute != attr ||
            c.strategy == kBaselineStrategy)
          continue;
        rows[{c.strategy, c.monitor, c.budget, c.n_closest, c.lambda}]
            .push_back({c.seed, c.ccc_value});
      }
      if (rows.empty() && base_vals.empty()) continue;
      os << "\n### " << attribute_name(attr) << "\n\n";
      if (!base_vals.empty())
        os << "Speaker-independent baseline: median CCC "
           << median(base_vals) << " over " << base_vals.size()
           << " seed(s)\n\n";
      if (rows.empty()) continue;
      os << "| strategy | monitor | budget | N | lambda | median CCC | "
            "median gain % |\n";
      os << "|---|---|---|---|---|---|---|\n";
      for (const auto& [key, vals] : rows) {
        std::vector<double> cccs, gains;
        for (const auto& [seed, v] : vals) {
          cccs.push_back(v);
          auto it = base.find(seed);
          if (it != base.end())
            gains.push_back(100.0 * relative_gain(v, it->second));
        }
        os << "| " << key.strategy << " | " << key.monitor << " | "
           << budget_str(key.budget) << " | " << key.n << " | " << key.lambda
           << " | ";
        os.precision(4);
        os << std::fixed << median(cccs);
        os.unsetf(std::ios_base::floatfield);
        os << " | ";
        if (gains.empty()) {
          os << "n/a";
        } else {
          os.precision(2);
          os << std::fixed << median(gains);
          os.unsetf(std::ios_base::floatfield);
        }
        os << " |\n";
        os.precision(17);
      }
    }
  }
  return os.str();
}

void EvalReport::write_series_csv(const std::filesystem::path& path) const {
  struct Key {
    std::string protocol;
    int attribute;
    std::string strategy, monitor;
    int n;
    double lambda, budget;
    bool operator<(const Key& o) const {
      return std::tie(protocol, attribute, strategy, monitor, n, lambda,
                      budget) < std::tie(o.protocol, o.attribute, o.strategy,
                                         o.monitor, o.n, o.lambda, o.budget);
    }
  };
  std::map<Key, std::vector<double>> series;
  for (const EvalCell& c : cells_)
    series[{c.protocol, static_cast<int>(c.attribute), c.strategy, c.monitor,
            c.n_closest, c.lambda, c.budget}]
        .push_back(c.ccc_value);
  std::ofstream os(path);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os.precision(17);
  os << "protocol,attribute,strategy,monitor,N,lambda,budget,median_ccc,"
        "n_seeds\n";
  for (const auto& [k, vals] : series)
    os << k.protocol << ',' << attribute_name(static_cast<Attribute>(k.attribute))
       << ',' << k.strategy << ',' << k.monitor << ',' << k.n << ','
       << k.lambda << ',' << budget_str(k.budget) << ',' << median(vals) << ','
       << vals.size() << '\n';
}

// --- Pipeline building blocks -----------------------------------------------------

SeedContext prepare_seed(const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeedContext ctx;
  ctx.seed = seed;
  SynthConfig synth = cfg.synth;
  synth.seed = derive_seed(seed, "corpus");
  ctx.synth = generate_synthetic_with_latents(synth);
  ctx.parts = make_partitions(ctx.synth.corpus, cfg.n_test_speakers,
                              cfg.n_dev_speakers, cfg.test_a_seconds,
                              derive_seed(seed, "partition-choice"));
  ctx.stats = compute_norm_stats(ctx.synth.corpus, ctx.parts.train);
  ctx.normalized = apply_normalization(ctx.synth.corpus, ctx.stats);
  return ctx;
}

namespace {

ModelConfig arch_for(const PipelineConfig& cfg, const Corpus& corpus,
                     int out_dim) {
  ModelConfig arch = cfg.arch;
  arch.input_dim = corpus.dim();
  arch.out_dim = out_dim;
  return arch;
}

TrainConfig derived_train_cfg(const PipelineConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  return tc;
}

}  // namespace

MlpRegressor train_baseline(const PipelineConfig& cfg, const SeedContext& ctx,
                            Attribute attribute, TrainHistory* history) {
  MlpRegressor model(arch_for(cfg, ctx.normalized, 1),
                     derive_seed(ctx.seed, "init", attribute_name(attribute)));
  TrainData data =
      make_train_data(ctx.normalized, ctx.parts.train, attribute);
  TrainData dev = make_train_data(ctx.normalized, ctx.parts.dev, attribute);
  TrainConfig tc = derived_train_cfg(
      cfg, derive_seed(ctx.seed, "train-baseline", attribute_name(attribute)));
  tc.monitor = Monitor::dev;
  TrainHistory h = train(model, data, tc, dev);
  if (history) *history = h;
  return model;
}

SimilarityMatrix seed_similarity(const PipelineConfig& cfg,
                                 const SeedContext& ctx) {
  SimilarityConfig sim = cfg.similarity;
  sim.seed = derive_seed(ctx.seed, "similarity");
  return compute_similarity_matrix(ctx.normalized, ctx.parts, sim);
}

ClosestLists seed_closest_lists(const PipelineConfig& cfg,
                                const SeedContext& ctx, int n_closest) {
  return closest_lists(seed_similarity(cfg, ctx), n_closest);
}

double evaluate_ccc(const MlpRegressor& model, const Corpus& corpus,
                    const std::vector<std::string>& ids, Attribute attribute) {
  if (ids.empty()) throw ValidationError("evaluate_ccc: empty partition");
  Eigen::MatrixXd x(static_cast<long>(ids.size()), corpus.dim());
  Eigen::VectorXd truth(static_cast<long>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Segment& s = corpus.by_id(ids[i]);
    x.row(static_cast<long>(i)) = s.features.transpose();
    truth[static_cast<long>(i)] = s.label(attribute);
  }
  const Eigen::MatrixXd pred = model.predict(x);
  const int col = model.config().out_dim == 3 ? static_cast<int>(attribute) : 0;
  return ccc(truth, pred.col(col));
}

// --- Speaker dependency -----------------------------------------------------------

namespace {

// Seeded greedy slice of a test speaker's test-A segments up to `amount`.
std::vector<std::string> test_a_slice(const Corpus& corpus,
                                      const PartitionSet& parts,
                                      const std::string& speaker,
                                      double amount, std::uint64_t seed) {
  std::set<std::string> ta(parts.test_a.begin(), parts.test_a.end());
  std::vector<std::string> ids;
  for (std::size_t i : corpus.segments_of_speaker(speaker)) {
    const Segment& s = corpus.segments()[i];
    if (ta.count(s.id)) ids.push_back(s.id);
  }
  Rng rng(derive_seed(seed, "spdep-slice", speaker));
  rng.shuffle(ids);
  std::vector<std::string> out;
  double cum = 0.0;
  for (const std::string& id : ids) {
    if (cum >= amount) break;
    out.push_back(id);
    cum += corpus.by_id(id).duration_s;
  }
  return out;
}

}  // namespace

EvalReport run_speaker_dependency(const PipelineConfig& cfg,
                                  const std::vector<double>& amounts_seconds,
                                  const std::vector<Attribute>& attributes,
                                  const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ValidationError("run_speaker_dependency: no seeds");
  EvalReport report;
  for (std::uint64_t seed : seeds) {
    SeedContext ctx = prepare_seed(cfg, seed);
    const auto test_speakers = ctx.parts.speakers_of(ctx.synth.corpus,
                                                     Split::test_a);
    for (Attribute attr : attributes) {
      MlpRegressor baseline = train_baseline(cfg, ctx, attr);
      const double base_ccc =
          evaluate_ccc(baseline, ctx.normalized, ctx.parts.test_b, attr);
      report.add({"speaker-dependency", attr, kBaselineStrategy, 0.0, 0, 0.0,
                  monitor_name(Monitor::dev), seed, base_ccc});
      for (double amount : amounts_seconds) {
        if (amount < 0.0)
          throw ValidationError("run_speaker_dependency: negative amount");
        if (amount == 0.0) {
          report.add({"speaker-dependency", attr, "speaker-dependent", 0.0, 0,
                      0.0, monitor_name(Monitor::dev), seed, base_ccc});
          continue;
        }
        std::vector<std::string> train_ids = ctx.parts.train;
        for (const std::string& sp : test_speakers) {
          const auto slice =
              test_a_slice(ctx.synth.corpus, ctx.parts, sp, amount,
                           derive_seed(seed, "spdep", bits_of(amount)));
          train_ids.insert(train_ids.end(), slice.begin(), slice.end());
        }
        // The augmented train set gets fresh normalization statistics.
        NormStats stats = compute_norm_stats(ctx.synth.corpus, train_ids);
        Corpus normed = apply_normalization(ctx.synth.corpus, stats);
        MlpRegressor model(
            arch_for(cfg, normed, 1),
            derive_seed(seed, "init", attribute_name(attr)));
        TrainConfig tc = derived_train_cfg(
            cfg, derive_seed(seed, "train-spdep", attribute_name(attr),
                             bits_of(amount)));
        tc.monitor = Monitor::dev;
        TrainData data = make_train_data(normed, train_ids, attr);
        TrainData dev = make_train_data(normed, ctx.parts.dev, attr);
        train(model, data, tc, dev);
        report.add({"speaker-dependency", attr, "speaker-dependent", amount, 0,
                    0.0, monitor_name(Monitor::dev), seed,
                    evaluate_ccc(model, normed, ctx.parts.test_b, attr)});
      }
    }
  }
  return report;
}

// --- Dropout sweep ----------------------------------------------------------------

DropoutSweepResult run_dropout_sweep(const PipelineConfig& cfg,
                                     const std::vector<double>& p_grid,
                                     const std::vector<int>& widths,
                                     const std::vector<Attribute>& attributes,
                                     std::uint64_t seed) {
  if (p_grid.empty()) throw ValidationError("run_dropout_sweep: empty grid");
  for (double p : p_grid)
    if (p < 0.0 || p > 0.9 + 1e-12)
      throw ValidationError("run_dropout_sweep: dropout rate " +
                            std::to_string(p) + " outside the grid [0, 0.9]");
  std::vector<double> grid = p_grid;
  std::sort(grid.begin(), grid.end());  // ascending, so ties pick the larger p
  DropoutSweepResult result;
  SeedContext ctx = prepare_seed(cfg, seed);
  for (int width : widths) {
    for (Attribute attr : attributes) {
      double best_p = grid.front();
      double best_ccc = -std::numeric_limits<double>::infinity();
      for (double p : grid) {
        ModelConfig arch = arch_for(cfg, ctx.normalized, 1);
        arch.width = width;
        MlpRegressor model(
            arch, derive_seed(seed, "init-sweep", attribute_name(attr), width));
        TrainConfig tc = derived_train_cfg(
            cfg, derive_seed(seed, "train-sweep", attribute_name(attr), width,
                             bits_of(p)));
        tc.dropout_p = p;
        tc.monitor = Monitor::dev;
        TrainData data =
            make_train_data(ctx.normalized, ctx.parts.train, attr);
        TrainData dev = make_train_data(ctx.normalized, ctx.parts.dev, attr);
        TrainHistory h = train(model, data, tc, dev);
        const double dev_ccc = h.best_monitor_ccc;
        std::ostringstream label;
        label << "dropout-p=" << p << "-w" << width;
        result.report.add({"dropout-sweep", attr, label.str(), 0.0, 0, 0.0,
                           monitor_name(Monitor::dev), seed, dev_ccc});
        if (dev_ccc >= best_ccc) {  // ties resolve to the larger rate
          best_ccc = dev_ccc;
          best_p = p;
        }
      }
      result.optimal_p[{width, static_cast<int>(attr)}] = best_p;
    }
  }
  return result;
}

// --- Adaptation protocols ----------------------------------------------------------

namespace {

PlanBudget budget_for(const PipelineConfig& cfg, double budget_seconds) {
  if (std::isinf(budget_seconds)) return PlanBudget::all_data();
  PlanBudget b;
  b.seconds = budget_seconds;
  b.scope = cfg.budget_scope;
  return b;
}

// Fine-tunes a copy of the baseline on the plan, monitored per `monitor`.
MlpRegressor adapt_finetune(const PipelineConfig& cfg, const SeedContext& ctx,
                            const MlpRegressor& baseline,
                            const AdaptationPlan& plan, Monitor monitor,
                            Attribute attr, std::uint64_t stage_seed) {
  MlpRegressor model = baseline;
  TrainData adapt = make_adaptation_data(ctx.normalized, plan, attr);
  TrainData monitor_data =
      monitor == Monitor::dev
          ? make_train_data(ctx.normalized, ctx.parts.dev, attr)
          : adapt;
  TrainConfig tc = derived_train_cfg(cfg, stage_seed);
  tc.monitor = monitor;
  fine_tune_last_layer(model, adapt, tc, monitor_data);
  return model;
}

// Trains the weighting model from scratch; with lambda = 1 this is bitwise
// the baseline training run. The adaptation monitor variant watches the
// weighted loss on the full train set.
MlpRegressor weighting_train(const PipelineConfig& cfg, const SeedContext& ctx,
                             const WeightMap& map, Monitor monitor,
                             Attribute attr) {
  MlpRegressor model(arch_for(cfg, ctx.normalized, 1),
                     derive_seed(ctx.seed, "init", attribute_name(attr)));
  TrainData data = make_train_data(ctx.normalized, ctx.parts.train, attr, &map);
  TrainData monitor_data =
      monitor == Monitor::dev
          ? make_train_data(ctx.normalized, ctx.parts.dev, attr)
          : data;
  TrainConfig tc = derived_train_cfg(
      cfg, derive_seed(ctx.seed, "train-baseline", attribute_name(attr)));
  tc.monitor = monitor;
  train(model, data, tc, monitor_data);
  return model;
}

}  // namespace

EvalReport run_global_adaptation(const PipelineConfig& cfg,
                                 AdaptStrategy strategy,
                                 const std::vector<double>& budgets,
                                 int n_closest, Monitor monitor,
                                 Attribute attribute,
                                 const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ValidationError("run_global_adaptation: no seeds");
  if (monitor == Monitor::train)
    throw ValidationError(
        "run_global_adaptation: monitor must be dev or adaptation");
  const std::string strategy_label =
      std::string(adapt_strategy_name(strategy)) + "-ga";
  EvalReport report;
  for (std::uint64_t seed : seeds) {
    SeedContext ctx = prepare_seed(cfg, seed);
    MlpRegressor baseline = train_baseline(cfg, ctx, attribute);
    const double base_ccc =
        evaluate_ccc(baseline, ctx.normalized, ctx.parts.test_b, attribute);
    report.add({"global-adaptation", attribute, kBaselineStrategy, 0.0, 0, 0.0,
                monitor_name(Monitor::dev), seed, base_ccc});
    const ClosestLists lists = seed_closest_lists(cfg, ctx, n_closest);
    for (double budget_s : budgets) {
      EvalCell cell{"global-adaptation",
                    attribute,
                    strategy_label,
                    budget_s,
                    n_closest,
                    strategy == AdaptStrategy::weighting ? cfg.lambda : 0.0,
                    monitor_name(monitor),
                    seed,
                    0.0};
      if (budget_s == 0.0) {
        cell.ccc_value = base_ccc;  // the curve starts at the baseline
        report.add(std::move(cell));
        continue;
      }
      const PlanBudget budget = budget_for(cfg, budget_s);
      const std::uint64_t stage_seed = derive_seed(
          seed, "adapt", adapt_strategy_name(strategy), monitor_name(monitor),
          bits_of(budget_s));
      MlpRegressor adapted = [&] {
        switch (strategy) {
          case AdaptStrategy::unique: {
            AdaptationPlan plan = build_unique_plan(
                lists, budget, ctx.normalized, ctx.parts, stage_seed);
            return adapt_finetune(cfg, ctx, baseline, plan, monitor, attribute,
                                  stage_seed);
          }
          case AdaptStrategy::oversample: {
            AdaptationPlan plan = build_oversampling_plan(
                lists, budget, ctx.normalized, ctx.parts, stage_seed);
            return adapt_finetune(cfg, ctx, baseline, plan, monitor, attribute,
                                  stage_seed);
          }
          case AdaptStrategy::weighting: {
            WeightMap map = build_weight_map(lists, budget, cfg.lambda,
                                             ctx.normalized, ctx.parts,
                                             stage_seed);
            return weighting_train(cfg, ctx, map, monitor, attribute);
          }
        }
        throw ValidationError("unknown strategy");
      }();
      cell.ccc_value =
          evaluate_ccc(adapted, ctx.normalized, ctx.parts.test_b, attribute);
      report.add(std::move(cell));
    }
  }
  return report;
}

EvalReport run_individual_adaptation(const PipelineConfig& cfg,
                                     AdaptStrategy strategy,
                                     const std::vector<double>& budgets,
                                     Monitor monitor, Attribute attribute,
                                     const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty())
    throw ValidationError("run_individual_adaptation: no seeds");
  if (strategy == AdaptStrategy::oversample)
    throw ValidationError(
        "run_individual_adaptation: the oversampling strategy does not apply "
        "to individual adaptation");
  const std::string strategy_label =
      std::string(adapt_strategy_name(strategy)) + "-ia";
  EvalReport report;
  for (std::uint64_t seed : seeds) {
    SeedContext ctx = prepare_seed(cfg, seed);
    MlpRegressor baseline = train_baseline(cfg, ctx, attribute);
    report.add({"individual-adaptation", attribute, kBaselineStrategy, 0.0, 0,
                0.0, monitor_name(Monitor::dev), seed,
                evaluate_ccc(baseline, ctx.normalized, ctx.parts.test_b,
                             attribute)});
    const ClosestLists lists =
        seed_closest_lists(cfg, ctx, cfg.n_closest);
    // test-B segments per test speaker, in sorted speaker order.
    std::map<std::string, std::vector<std::string>> test_b_of;
    for (const std::string& id : ctx.parts.test_b)
      test_b_of[ctx.normalized.by_id(id).speaker_id].push_back(id);

    for (double budget_s : budgets) {
      const std::uint64_t stage_seed = derive_seed(
          seed, "adapt-ia", adapt_strategy_name(strategy),
          monitor_name(monitor), bits_of(budget_s));
      auto plans = build_ia_plans(lists, budget_for(cfg, budget_s), strategy,
                                  ctx.normalized, ctx.parts, stage_seed);
      std::vector<double> preds, truths;
      for (const auto& [te, plan] : plans) {
        MlpRegressor personal = [&] {
          if (strategy == AdaptStrategy::weighting) {
            WeightMap map;
            map.lambda = cfg.lambda;
            for (const PlanEntry& e : plan.entries)
              map.member_ids.push_back(e.segment_id);
            std::sort(map.member_ids.begin(), map.member_ids.end());
            return weighting_train(cfg, ctx, map, monitor, attribute);
          }
          return adapt_finetune(cfg, ctx, baseline, plan, monitor, attribute,
                                derive_seed(stage_seed, te));
        }();
        const auto& ids = test_b_of.at(te);
        Eigen::VectorXd p = predict_scores(personal, ctx.normalized, ids);
        for (long i = 0; i < p.size(); ++i) {
          preds.push_back(p[i]);
          truths.push_back(ctx.normalized.by_id(ids[i]).label(attribute));
        }
      }
      Eigen::VectorXd pv = Eigen::Map<Eigen::VectorXd>(
          preds.data(), static_cast<long>(preds.size()));
      Eigen::VectorXd tv = Eigen::Map<Eigen::VectorXd>(
          truths.data(), static_cast<long>(truths.size()));
      report.add({"individual-adaptation", attribute, strategy_label, budget_s,
                  cfg.n_closest,
                  strategy == AdaptStrategy::weighting ? cfg.lambda : 0.0,
                  monitor_name(monitor), seed, ccc(tv, pv)});
    }
  }
  return report;
}

EvalReport run_n_sweep(const PipelineConfig& cfg,
                       const std::vector<int>& n_values, Attribute attribute,
                       const std::vector<std::uint64_t>& seeds) {
  PipelineConfig sweep_cfg = cfg;
  sweep_cfg.lambda = 3.0;  // the 1:3 weighting ratio
  EvalReport report;
  const std::vector<double> budget = {cfg.test_a_seconds};
  for (int n : n_values) {
    PipelineConfig c = sweep_cfg;
    c.n_closest = n;
    EvalReport ga =
        run_global_adaptation(c, AdaptStrategy::weighting, budget, n,
                              Monitor::dev, attribute, seeds);
    EvalReport ia = run_individual_adaptation(
        c, AdaptStrategy::weighting, budget, Monitor::dev, attribute, seeds);
    for (EvalCell cell : ga.cells()) {
      cell.protocol = "n-sweep";
      cell.n_closest = n;
      report.add(std::move(cell));
    }
    for (EvalCell cell : ia.cells()) {
      cell.protocol = "n-sweep";
      cell.n_closest = n;
      report.add(std::move(cell));
    }
  }
  return report;
}

EvalReport run_mtl_baseline(const PipelineConfig& cfg, double grid_step,
                            const std::vector<std::uint64_t>& seeds) {
  if (grid_step <= 0.0 || grid_step > 1.0)
    throw ValidationError("run_mtl_baseline: bad grid step");
  EvalReport report;
  for (std::uint64_t seed : seeds) {
    SeedContext ctx = prepare_seed(cfg, seed);
    // STL baselines (one per attribute) for the comparison table.
    for (Attribute attr : kAttributes) {
      MlpRegressor baseline = train_baseline(cfg, ctx, attr);
      report.add({"mtl-baseline", attr, kBaselineStrategy, 0.0, 0, 0.0,
                  monitor_name(Monitor::dev), seed,
                  evaluate_ccc(baseline, ctx.normalized, ctx.parts.test_b,
                               attr)});
    }
    TrainData data = make_train_data_mtl(ctx.normalized, ctx.parts.train);
    TrainData dev = make_train_data_mtl(ctx.normalized, ctx.parts.dev);
    struct Candidate {
      double alpha, beta;
      MlpRegressor model;
      std::array<double, 3> dev_ccc;
    };
    std::vector<Candidate> candidates;
    for (double alpha = 0.0; alpha <= 1.0 + 1e-9; alpha += grid_step) {
      for (double beta = 0.0; alpha + beta <= 1.0 + 1e-9; beta += grid_step) {
        MlpRegressor model(arch_for(cfg, ctx.normalized, 3),
                           derive_seed(seed, "init-mtl"));
        TrainConfig tc = derived_train_cfg(
            cfg, derive_seed(seed, "train-mtl", bits_of(alpha), bits_of(beta)));
        tc.mtl_alpha = alpha;
        tc.mtl_beta = beta;
        tc.monitor = Monitor::dev;
        train(model, data, tc, dev);
        Candidate c{alpha, beta, std::move(model), {}};
        const Eigen::MatrixXd pred = c.model.predict(dev.inputs);
        for (int a = 0; a < 3; ++a)
          c.dev_ccc[a] = ccc(dev.targets.col(a), pred.col(a));
        candidates.push_back(std::move(c));
      }
    }
    // Tune (alpha, beta) on the dev set per attribute.
    for (Attribute attr : kAttributes) {
      const int a = static_cast<int>(attr);
      const Candidate* best = &candidates.front();
      for (const Candidate& c : candidates)
        if (c.dev_ccc[a] > best->dev_ccc[a]) best = &c;
      std::ostringstream label;
      label << "mtl-a" << best->alpha << "-b" << best->beta;
      report.add({"mtl-baseline", attr, label.str(), 0.0, 0, 0.0,
                  monitor_name(Monitor::dev), seed,
                  evaluate_ccc(best->model, ctx.normalized, ctx.parts.test_b,
                               attr)});
    }
  }
  return report;
}

EvalReport run_kfold(const PipelineConfig& cfg, const Corpus& corpus,
                     int speakers_per_fold, AdaptStrategy strategy,
                     Attribute attribute, std::uint64_t seed) {
  if (speakers_per_fold < 1)
    throw ValidationError("run_kfold: speakers_per_fold must be >= 1");
  std::vector<std::string> speakers = corpus.speaker_ids();
  if (speakers.size() < 2 * static_cast<std::size_t>(speakers_per_fold))
    throw ValidationError("run_kfold: not enough speakers for folding");
  Rng rng(derive_seed(seed, "kfold-shuffle"));
  rng.shuffle(speakers);
  std::vector<std::vector<std::string>> folds;
  for (std::size_t i = 0; i < speakers.size();
       i += static_cast<std::size_t>(speakers_per_fold))
    folds.emplace_back(
        speakers.begin() + static_cast<long>(i),
        speakers.begin() +
            static_cast<long>(std::min(speakers.size(),
                                       i + static_cast<std::size_t>(
                                               speakers_per_fold))));
  if (folds.back().size() < static_cast<std::size_t>(speakers_per_fold))
    std::cerr << "[valadapt] warning: last fold has only "
              << folds.back().size() << " speaker(s)\n";

  EvalReport report;
  std::vector<double> base_cccs, adapted_cccs;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto& test_speakers = folds[f];
    const auto& dev_speakers = folds[(f + 1) % folds.size()];
    PartitionSet parts = make_partitions_for(
        corpus, test_speakers, dev_speakers, cfg.test_a_seconds,
        derive_seed(seed, "kfold-part", f));
    NormStats stats = compute_norm_stats(corpus, parts.train);
    Corpus normed = apply_normalization(corpus, stats);

    SeedContext ctx;
    ctx.seed = derive_seed(seed, "kfold", f);
    ctx.synth.corpus = corpus;
    ctx.parts = parts;
    ctx.stats = stats;
    ctx.normalized = normed;

    MlpRegressor baseline = train_baseline(cfg, ctx, attribute);
    const double base_ccc =
        evaluate_ccc(baseline, normed, parts.test_b, attribute);
    base_cccs.push_back(base_ccc);
    report.add({"kfold", attribute, kBaselineStrategy, 0.0, 0, 0.0,
                monitor_name(Monitor::dev), f, base_ccc});

    const ClosestLists lists = seed_closest_lists(cfg, ctx, cfg.n_closest);
    const PlanBudget budget = budget_for(cfg, cfg.test_a_seconds);
    const std::uint64_t stage_seed = derive_seed(ctx.seed, "kfold-adapt");
    MlpRegressor adapted = [&] {
      switch (strategy) {
        case AdaptStrategy::unique: {
          AdaptationPlan plan =
              build_unique_plan(lists, budget, normed, parts, stage_seed);
          return adapt_finetune(cfg, ctx, baseline, plan, Monitor::dev,
                                attribute, stage_seed);
        }
        case AdaptStrategy::oversample: {
          AdaptationPlan plan = build_oversampling_plan(lists, budget, normed,
                                                        parts, stage_seed);
          return adapt_finetune(cfg, ctx, baseline, plan, Monitor::dev,
                                attribute, stage_seed);
        }
        case AdaptStrategy::weighting: {
          WeightMap map = build_weight_map(lists, budget, cfg.lambda, normed,
                                           parts, stage_seed);
          return weighting_train(cfg, ctx, map, Monitor::dev, attribute);
        }
      }
      throw ValidationError("unknown strategy");
    }();
    const double adapted_ccc =
        evaluate_ccc(adapted, normed, parts.test_b, attribute);
    adapted_cccs.push_back(adapted_ccc);
    report.add({"kfold", attribute,
                std::string(adapt_strategy_name(strategy)) + "-ga",
                cfg.test_a_seconds, cfg.n_closest,
                strategy == AdaptStrategy::weighting ? cfg.lambda : 0.0,
                monitor_name(Monitor::dev), f, adapted_ccc});
  }
  double base_avg = 0.0, adapted_avg = 0.0;
  for (double v : base_cccs) base_avg += v / base_cccs.size();
  for (double v : adapted_cccs) adapted_avg += v / adapted_cccs.size();
  report.add({"kfold-average", attribute, kBaselineStrategy, 0.0, 0, 0.0,
              monitor_name(Monitor::dev), folds.size(), base_avg});
  report.add({"kfold-average", attribute,
              std::string(adapt_strategy_name(strategy)) + "-ga",
              cfg.test_a_seconds, cfg.n_closest,
              strategy == AdaptStrategy::weighting ? cfg.lambda : 0.0,
              monitor_name(Monitor::dev), folds.size(), adapted_avg});
  return report;
}

// --- Statistics --------------------------------------------------------------------

TTestResult paired_seed_test(const std::vector<double>& a,
                             const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ValidationError("paired_seed_test: length mismatch");
  if (a.size() < 2)
    throw ValidationError("paired_seed_test: need at least 2 pairs");
  const int n = static_cast<int>(a.size());
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += (b[i] - a[i]) / n;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = (b[i] - a[i]) - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (n - 1));

  TTestResult r;
  r.dof = n - 1;
  if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
    r.degenerate = true;
    r.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                     : (mean < 0.0 ? -std::numeric_limits<double>::infinity()
                                   : 0.0);
    r.p_value = mean > 0.0 ? 0.0 : (mean < 0.0 ? 1.0 : 0.5);
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t_distribution<double> dist(r.dof);
  r.p_value = 1.0 - boost::math::cdf(dist, r.t);
  return r;
}

}  // namespace valadapt
