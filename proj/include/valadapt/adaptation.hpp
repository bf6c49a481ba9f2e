#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "valadapt/corpus.hpp"
#include "valadapt/similarity.hpp"

namespace valadapt {

enum class AdaptStrategy : int { unique = 0, oversample = 1, weighting = 2 };
const char* adapt_strategy_name(AdaptStrategy s);
AdaptStrategy adapt_strategy_from_name(const std::string& name);

/// How the budget argument is interpreted: per test speaker (multiplied by
/// the number of test speakers) or as the grand total.
enum class BudgetScope : int { per_test_speaker = 0, total = 1 };
const char* budget_scope_name(BudgetScope s);
BudgetScope budget_scope_from_name(const std::string& name);

struct PlanBudget {
  double seconds = 200.0;
  BudgetScope scope = BudgetScope::per_test_speaker;
  bool use_all_data = false;  // "all data from the selected speakers"

  static PlanBudget all_data();
  static PlanBudget per_speaker(double seconds);
  static PlanBudget total(double seconds);
  double total_seconds(int n_test_speakers) const;
};

struct PlanEntry {
  std::string segment_id;
  int multiplicity = 1;
};

/// Which train segments the adaptation uses and how often each one recurs in
/// an epoch. `source_sets` records each selected train speaker with its
/// selection count C across the closest lists.
struct AdaptationPlan {
  AdaptStrategy strategy = AdaptStrategy::unique;
  std::vector<PlanEntry> entries;
  double budget_seconds_per_test_speaker = 0.0;
  std::vector<std::pair<std::string, int>> source_sets;
  std::uint64_t seed = 0;
  double lambda = 0.0;  // loss weight for the weighting strategy, else 0

  double total_duration(const Corpus& corpus) const;
  bool empty() const { return entries.empty(); }

  /// Entries are distinct, multiplicities valid for the strategy, and all
  /// segments belong to train speakers in source_sets.
  void validate(const Corpus& corpus, const PartitionSet& parts) const;

  void save(const std::filesystem::path& csv_path,
            const std::filesystem::path& json_path) const;
  static AdaptationPlan load(const std::filesystem::path& csv_path,
                             const std::filesystem::path& json_path);
};

/// Loss-weighting alternative: member segments cost lambda times more during
/// training; all other train segments keep weight 1.
struct WeightMap {
  double lambda = 1.0;
  std::vector<std::string> member_ids;  // sorted

  bool contains(const std::string& id) const;
};

/// Per-group fill diagnostics (shares and realized durations), mainly for
/// verification.
struct FillReport {
  struct Group {
    std::string key;
    std::string speaker_id;
    double share = 0.0;
    double realized = 0.0;
  };
  std::vector<Group> groups;
};

/// Pools the closest lists into the unique-speaker set and draws a balanced
/// sample without replacement: every selected speaker contributes roughly
/// total/U seconds and the plan total lands within one segment of the budget.
AdaptationPlan build_unique_plan(const ClosestLists& closest_lists,
                                 PlanBudget budget, const Corpus& corpus,
                                 const PartitionSet& parts, std::uint64_t seed,
                                 FillReport* report = nullptr);

/// One source set per (test speaker, closest speaker) pair: a train speaker
/// selected C times fills C sets, so its segments can recur in the plan with
/// multiplicity above one.
AdaptationPlan build_oversampling_plan(const ClosestLists& closest_lists,
                                       PlanBudget budget, const Corpus& corpus,
                                       const PartitionSet& parts,
                                       std::uint64_t seed,
                                       FillReport* report = nullptr);

/// Weighting strategy: the member set equals the unique plan drawn with the
/// same seed and budget; lambda is attached for the trainer.
WeightMap build_weight_map(const ClosestLists& closest_lists, PlanBudget budget,
                           double lambda, const Corpus& corpus,
                           const PartitionSet& parts, std::uint64_t seed);

/// One plan per test speaker from that speaker's own closest list, balanced
/// across its listed speakers. Valid for the unique and weighting strategies;
/// oversampling does not apply to a single test speaker.
std::vector<std::pair<std::string, AdaptationPlan>> build_ia_plans(
    const ClosestLists& closest_lists, PlanBudget budget,
    AdaptStrategy strategy, const Corpus& corpus, const PartitionSet& parts,
    std::uint64_t seed);

}  // namespace valadapt
