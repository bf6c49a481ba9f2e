#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "valadapt/adaptation.hpp"
#include "valadapt/corpus.hpp"
#include "valadapt/model.hpp"
#include "valadapt/similarity.hpp"

namespace valadapt {

/// Shared knobs of the full pipeline. Stage seeds are derived from one
/// global seed, so two protocols sharing a seed share the corpus, the
/// partitions and the baseline model.
struct PipelineConfig {
  SynthConfig synth;
  int n_test_speakers = 8;
  int n_dev_speakers = 4;
  double test_a_seconds = 200.0;
  SimilarityConfig similarity;  // its seed field is ignored (derived)
  int n_closest = 5;
  double lambda = 3.0;
  BudgetScope budget_scope = BudgetScope::per_test_speaker;
  ModelConfig arch;   // input_dim is filled from the corpus
  TrainConfig train;  // its seed field is ignored (derived)

  void validate() const;
};

struct EvalCell {
  std::string protocol;
  Attribute attribute = Attribute::valence;
  std::string strategy;  // e.g. "speaker-independent", "weighting-ga"
  double budget = 0.0;   // seconds; +inf encodes "all data"
  int n_closest = 0;
  double lambda = 0.0;
  std::string monitor;
  std::uint64_t seed = 0;
  double ccc_value = 0.0;
};

class EvalReport {
 public:
  void add(EvalCell cell) { cells_.push_back(std::move(cell)); }
  void append(const EvalReport& other);
  const std::vector<EvalCell>& cells() const { return cells_; }

  /// All CCC values matching (protocol may be empty = any), in seed order.
  std::vector<double> values(const std::string& strategy, Attribute attribute,
                             const std::string& monitor = "",
                             std::optional<double> budget = {}) const;
  /// The speaker-independent baseline for (attribute, seed).
  double baseline(Attribute attribute, std::uint64_t seed) const;
  static double relative_gain(double adapted, double baseline);

  void write_csv(const std::filesystem::path& path) const;
  std::string to_csv() const;
  /// Baseline/gain summary tables, median across seeds.
  std::string to_markdown() const;
  /// Budget-curve series (one row per strategy x budget with median CCC).
  void write_series_csv(const std::filesystem::path& path) const;

  static EvalReport load_csv(const std::filesystem::path& path);

 private:
  std::vector<EvalCell> cells_;
};

inline constexpr const char* kBaselineStrategy = "speaker-independent";

// --- Per-seed pipeline state ----------------------------------------------------

struct SeedContext {
  std::uint64_t seed = 0;
  SyntheticCorpus synth;
  PartitionSet parts;
  NormStats stats;
  Corpus normalized;
};

/// Generates the corpus, partitions it and normalizes features with
/// train-only statistics, all from seeds derived from `seed`.
SeedContext prepare_seed(const PipelineConfig& cfg, std::uint64_t seed);

/// Speaker-independent baseline: trained on the train split, dev-monitored
/// early stopping. One attribute (STL head).
MlpRegressor train_baseline(const PipelineConfig& cfg, const SeedContext& ctx,
                            Attribute attribute,
                            TrainHistory* history = nullptr);

/// Similarity matrix over (train x test) speakers and the resulting ranked
/// lists.
SimilarityMatrix seed_similarity(const PipelineConfig& cfg,
                                 const SeedContext& ctx);
ClosestLists seed_closest_lists(const PipelineConfig& cfg,
                                const SeedContext& ctx, int n_closest);

/// CCC of model predictions against ground truth over the given segments.
/// For 3-head models the head matching `attribute` is used.
double evaluate_ccc(const MlpRegressor& model, const Corpus& corpus,
                    const std::vector<std::string>& ids, Attribute attribute);

// --- Protocols -------------------------------------------------------------------

/// Speaker-dependent vs speaker-independent comparison: adds seeded test-A
/// slices of the given durations to the train set (normalization statistics
/// recomputed on the augmented set), evaluates on test-B.
EvalReport run_speaker_dependency(const PipelineConfig& cfg,
                                  const std::vector<double>& amounts_seconds,
                                  const std::vector<Attribute>& attributes,
                                  const std::vector<std::uint64_t>& seeds);

struct DropoutSweepResult {
  EvalReport report;
  // (width, attribute) -> optimal dropout rate on the dev set.
  std::map<std::pair<int, int>, double> optimal_p;
};

/// Dev-set dropout sweep; p values must lie within the paper grid [0, 0.9].
/// Argmax ties resolve to the larger rate.
DropoutSweepResult run_dropout_sweep(const PipelineConfig& cfg,
                                     const std::vector<double>& p_grid,
                                     const std::vector<int>& widths,
                                     const std::vector<Attribute>& attributes,
                                     std::uint64_t seed);

/// Global adaptation: one model personalized to the pool of test speakers.
/// Unique/oversampling fine-tune the pre-trained baseline; weighting trains
/// from scratch with the lambda-weighted loss. `budget` +inf selects all
/// data of the closest speakers; budget 0 reproduces the baseline exactly.
EvalReport run_global_adaptation(const PipelineConfig& cfg,
                                 AdaptStrategy strategy,
                                 const std::vector<double>& budgets,
                                 int n_closest, Monitor monitor,
                                 Attribute attribute,
                                 const std::vector<std::uint64_t>& seeds);

/// Individual adaptation: one model per test speaker; predictions are
/// concatenated over speakers before a single CCC. Oversampling is invalid
/// here.
EvalReport run_individual_adaptation(const PipelineConfig& cfg,
                                     AdaptStrategy strategy,
                                     const std::vector<double>& budgets,
                                     Monitor monitor, Attribute attribute,
                                     const std::vector<std::uint64_t>& seeds);

/// Number-of-closest-speakers sweep with the weighting approach at ratio
/// 1:3, for both the global and individual modes.
EvalReport run_n_sweep(const PipelineConfig& cfg,
                       const std::vector<int>& n_values, Attribute attribute,
                       const std::vector<std::uint64_t>& seeds);

/// Multi-task baseline: 3-head model, (alpha, beta) tuned on the dev set
/// over a simplex grid with the given step.
EvalReport run_mtl_baseline(const PipelineConfig& cfg, double grid_step,
                            const std::vector<std::uint64_t>& seeds);

/// Speaker k-fold cross-validation harness over an existing corpus: every
/// speaker is a test speaker in exactly one fold (folds of
/// `speakers_per_fold`, last fold possibly smaller), dev speakers come from
/// the next fold cyclically, the 200 s test-A rule applies per fold. Runs
/// baseline plus one global adaptation per fold and reports per-fold and
/// fold-averaged cells.
EvalReport run_kfold(const PipelineConfig& cfg, const Corpus& corpus,
                     int speakers_per_fold, AdaptStrategy strategy,
                     Attribute attribute, std::uint64_t seed);

// --- Statistics -------------------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  double p_value = 0.5;
  int dof = 0;
  bool degenerate = false;  // zero variance of the paired differences
};

/// One-tailed paired t-test for H1: mean(b) > mean(a). Identical samples
/// give the boundary convention p = 0.5.
TTestResult paired_seed_test(const std::vector<double>& a,
                             const std::vector<double>& b);

}  // namespace valadapt
