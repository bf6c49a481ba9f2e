#include "valadapt/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "valadapt/rng.hpp"

namespace valadapt {

const char* adapt_strategy_name(AdaptStrategy s) {
  switch (s) {
    case AdaptStrategy::unique: return "unique";
    case AdaptStrategy::oversample: return "oversample";
    case AdaptStrategy::weighting: return "weighting";
  }
  return "?";
}

AdaptStrategy adapt_strategy_from_name(const std::string& name) {
  for (AdaptStrategy s : {AdaptStrategy::unique, AdaptStrategy::oversample,
                          AdaptStrategy::weighting})
    if (name == adapt_strategy_name(s)) return s;
  throw ValidationError("unknown adaptation strategy: " + name);
}

const char* budget_scope_name(BudgetScope s) {
  return s == BudgetScope::per_test_speaker ? "per-test-speaker" : "total";
}

BudgetScope budget_scope_from_name(const std::string& name) {
  if (name == "per-test-speaker") return BudgetScope::per_test_speaker;
  if (name == "total") return BudgetScope::total;
  throw ValidationError("unknown budget scope: " + name);
}

PlanBudget PlanBudget::all_data() {
  PlanBudget b;
  b.use_all_data = true;
  b.seconds = std::numeric_limits<double>::infinity();
  return b;
}

PlanBudget PlanBudget::per_speaker(double seconds) {
  PlanBudget b;
  b.seconds = seconds;
  b.scope = BudgetScope::per_test_speaker;
  return b;
}

PlanBudget PlanBudget::total(double seconds) {
  PlanBudget b;
  b.seconds = seconds;
  b.scope = BudgetScope::total;
  return b;
}

double PlanBudget::total_seconds(int n_test_speakers) const {
  if (use_all_data) return std::numeric_limits<double>::infinity();
  if (seconds <= 0.0) throw ValidationError("budget must be positive");
  return scope == BudgetScope::per_test_speaker ? seconds * n_test_speakers
                                                : seconds;
}

double AdaptationPlan::total_duration(const Corpus& corpus) const {
  double total = 0.0;
  for (const PlanEntry& e : entries)
    total += e.multiplicity * corpus.by_id(e.segment_id).duration_s;
  return total;
}

void AdaptationPlan::validate(const Corpus& corpus,
                              const PartitionSet& parts) const {
  std::unordered_set<std::string> train_ids(parts.train.begin(),
                                            parts.train.end());
  std::set<std::string> source_speakers;
  for (const auto& [sp, c] : source_sets) {
    if (c < 1) throw ValidationError("plan: source set count below 1");
    source_speakers.insert(sp);
  }
  std::unordered_set<std::string> seen;
  for (const PlanEntry& e : entries) {
    if (e.multiplicity < 1)
      throw ValidationError("plan: multiplicity below 1 for " + e.segment_id);
    if (strategy == AdaptStrategy::unique && e.multiplicity != 1)
      throw ValidationError("plan: unique strategy with multiplicity > 1");
    if (!seen.insert(e.segment_id).second)
      throw ValidationError("plan: duplicate entry " + e.segment_id);
    if (!train_ids.count(e.segment_id))
      throw ValidationError("plan: segment " + e.segment_id +
                            " is not in the train partition");
    if (!source_speakers.count(corpus.by_id(e.segment_id).speaker_id))
      throw ValidationError("plan: segment " + e.segment_id +
                            " from a speaker outside source_sets");
  }
}

bool WeightMap::contains(const std::string& id) const {
  return std::binary_search(member_ids.begin(), member_ids.end(), id);
}

namespace {

struct FillGroup {
  std::string key;         // seed tag, unique per group
  std::string speaker_id;
  std::vector<std::string> order;  // seeded segment order, consumed front first
  std::vector<std::string> taken;
  std::size_t cursor = 0;
  double share = 0.0;
  double realized = 0.0;
};

// Train segments of one speaker in seeded-random order.
std::vector<std::string> speaker_train_order(const Corpus& corpus,
                                             const PartitionSet& parts,
                                             const std::string& speaker,
                                             std::uint64_t seed,
                                             const std::string& tag) {
  std::unordered_set<std::string> train_ids(parts.train.begin(),
                                            parts.train.end());
  std::vector<std::string> ids;
  for (std::size_t i : corpus.segments_of_speaker(speaker)) {
    const Segment& s = corpus.segments()[i];
    if (train_ids.count(s.id)) ids.push_back(s.id);
  }
  Rng rng(derive_seed(seed, "fill", tag));
  rng.shuffle(ids);
  return ids;
}

// Balanced sampling: a first pass fills each group up to its share with whole
// segments, then a round-robin pass spends the leftover budget while the
// global total stays at or below the budget. The final total is therefore
// within one segment of the budget whenever enough data exists.
void balanced_fill(std::vector<FillGroup>& groups, double total_budget,
                   const Corpus& corpus) {
  if (groups.empty()) throw ValidationError("balanced_fill: no source groups");
  const bool unlimited = std::isinf(total_budget);
  const double share = unlimited
                           ? std::numeric_limits<double>::infinity()
                           : total_budget / static_cast<double>(groups.size());
  double total = 0.0;
  for (FillGroup& g : groups) {
    g.share = share;
    for (; g.cursor < g.order.size(); ++g.cursor) {
      const double dur = corpus.by_id(g.order[g.cursor]).duration_s;
      if (!unlimited && g.realized + dur > g.share) break;
      g.taken.push_back(g.order[g.cursor]);
      g.realized += dur;
      total += dur;
    }
  }
  if (unlimited) return;

  // Round-robin top-up: one whole segment per visit while it fits.
  bool progress = true;
  while (progress) {
    progress = false;
    for (FillGroup& g : groups) {
      while (g.cursor < g.order.size()) {
        const double dur = corpus.by_id(g.order[g.cursor]).duration_s;
        if (total + dur > total_budget) {
          ++g.cursor;  // a segment that no longer fits never will again
          continue;
        }
        g.taken.push_back(g.order[g.cursor]);
        g.realized += dur;
        total += dur;
        ++g.cursor;
        progress = true;
        break;
      }
    }
  }
  if (total < total_budget) {
    double max_seg = 0.0;
    for (const FillGroup& g : groups)
      for (const std::string& id : g.order)
        max_seg = std::max(max_seg, corpus.by_id(id).duration_s);
    if (total + max_seg < total_budget)
      std::cerr << "[valadapt] warning: adaptation budget " << total_budget
                << "s not reachable, selected " << total << "s\n";
  }
}

std::vector<std::pair<std::string, int>> selection_counts(
    const ClosestLists& closest_lists) {
  std::map<std::string, int> counts;
  for (const auto& [te, list] : closest_lists)
    for (const std::string& tr : list) counts[tr] += 1;
  return {counts.begin(), counts.end()};
}

}  // namespace

AdaptationPlan build_unique_plan(const ClosestLists& closest_lists,
                                 PlanBudget budget, const Corpus& corpus,
                                 const PartitionSet& parts, std::uint64_t seed,
                                 FillReport* report) {
  if (closest_lists.empty())
    throw ValidationError("build_unique_plan: no closest lists");
  const auto counts = selection_counts(closest_lists);
  const double total =
      budget.total_seconds(static_cast<int>(closest_lists.size()));

  std::vector<FillGroup> groups;
  for (const auto& [speaker, c] : counts) {
    FillGroup g;
    g.key = "u/" + speaker;
    g.speaker_id = speaker;
    g.order = speaker_train_order(corpus, parts, speaker, seed, g.key);
    if (g.order.empty())
      throw ValidationError("build_unique_plan: speaker " + speaker +
                            " has no train data");
    groups.push_back(std::move(g));
  }
  balanced_fill(groups, total, corpus);

  AdaptationPlan plan;
  plan.strategy = AdaptStrategy::unique;
  plan.seed = seed;
  plan.budget_seconds_per_test_speaker =
      std::isinf(total) ? total : total / static_cast<double>(closest_lists.size());
  plan.source_sets = counts;
  for (const FillGroup& g : groups)
    for (const std::string& id : g.taken) plan.entries.push_back({id, 1});
  if (report) {
    report->groups.clear();
    for (const FillGroup& g : groups)
      report->groups.push_back({g.key, g.speaker_id, g.share, g.realized});
  }
  plan.validate(corpus, parts);
  return plan;
}

AdaptationPlan build_oversampling_plan(const ClosestLists& closest_lists,
                                       PlanBudget budget, const Corpus& corpus,
                                       const PartitionSet& parts,
                                       std::uint64_t seed, FillReport* report) {
  if (closest_lists.empty())
    throw ValidationError("build_oversampling_plan: no closest lists");
  const double total =
      budget.total_seconds(static_cast<int>(closest_lists.size()));

  std::vector<FillGroup> groups;
  for (const auto& [te, list] : closest_lists) {
    for (const std::string& tr : list) {
      FillGroup g;
      g.key = "o/" + te + "/" + tr;
      g.speaker_id = tr;
      g.order = speaker_train_order(corpus, parts, tr, seed, g.key);
      if (g.order.empty())
        throw ValidationError("build_oversampling_plan: speaker " + tr +
                              " has no train data");
      groups.push_back(std::move(g));
    }
  }
  balanced_fill(groups, total, corpus);

  AdaptationPlan plan;
  plan.strategy = AdaptStrategy::oversample;
  plan.seed = seed;
  plan.budget_seconds_per_test_speaker =
      std::isinf(total) ? total : total / static_cast<double>(closest_lists.size());
  plan.source_sets = selection_counts(closest_lists);

  std::map<std::string, int> multiplicity;
  for (const FillGroup& g : groups)
    for (const std::string& id : g.taken) multiplicity[id] += 1;
  for (const auto& [id, m] : multiplicity) plan.entries.push_back({id, m});
  if (report) {
    report->groups.clear();
    for (const FillGroup& g : groups)
      report->groups.push_back({g.key, g.speaker_id, g.share, g.realized});
  }
  plan.validate(corpus, parts);
  return plan;
}

WeightMap build_weight_map(const ClosestLists& closest_lists, PlanBudget budget,
                           double lambda, const Corpus& corpus,
                           const PartitionSet& parts, std::uint64_t seed) {
  if (lambda < 1.0)
    throw ValidationError("build_weight_map: lambda must be >= 1");
  AdaptationPlan plan =
      build_unique_plan(closest_lists, budget, corpus, parts, seed);
  WeightMap map;
  map.lambda = lambda;
  for (const PlanEntry& e : plan.entries) map.member_ids.push_back(e.segment_id);
  std::sort(map.member_ids.begin(), map.member_ids.end());
  return map;
}

std::vector<std::pair<std::string, AdaptationPlan>> build_ia_plans(
    const ClosestLists& closest_lists, PlanBudget budget,
    AdaptStrategy strategy, const Corpus& corpus, const PartitionSet& parts,
    std::uint64_t seed) {
  if (strategy == AdaptStrategy::oversample)
    throw ValidationError(
        "build_ia_plans: the oversampling strategy does not apply to "
        "individual adaptation; each test speaker contributes one list, so "
        "every segment is drawn at most once");
  std::vector<std::pair<std::string, AdaptationPlan>> plans;
  for (const auto& [te, list] : closest_lists) {
    ClosestLists single = {{te, list}};
    PlanBudget per = budget;
    if (!budget.use_all_data && budget.scope == BudgetScope::total)
      per.seconds = budget.seconds / static_cast<double>(closest_lists.size());
    per.scope = BudgetScope::per_test_speaker;
    AdaptationPlan plan =
        build_unique_plan(single, per, corpus, parts,
                          derive_seed(seed, "ia", te));
    plan.strategy = strategy == AdaptStrategy::weighting
                        ? AdaptStrategy::weighting
                        : AdaptStrategy::unique;
    plans.push_back({te, std::move(plan)});
  }
  return plans;
}

// --- Persistence -----------------------------------------------------------------

void AdaptationPlan::save(const std::filesystem::path& csv_path,
                          const std::filesystem::path& json_path) const {
  {
    std::ofstream os(csv_path);
    if (!os) throw MissingArtifactError("cannot write " + csv_path.string());
    os << "segment_id,multiplicity\n";
    for (const PlanEntry& e : entries)
      os << e.segment_id << ',' << e.multiplicity << '\n';
  }
  nlohmann::json j;
  j["strategy"] = adapt_strategy_name(strategy);
  j["budget_seconds_per_test_speaker"] =
      std::isinf(budget_seconds_per_test_speaker)
          ? -1.0
          : budget_seconds_per_test_speaker;
  j["seed"] = seed;
  j["lambda"] = lambda;
  nlohmann::json sets = nlohmann::json::array();
  for (const auto& [sp, c] : source_sets)
    sets.push_back({{"speaker_id", sp}, {"count", c}});
  j["source_sets"] = sets;
  std::ofstream os(json_path);
  if (!os) throw MissingArtifactError("cannot write " + json_path.string());
  os << j.dump(2) << '\n';
}

AdaptationPlan AdaptationPlan::load(const std::filesystem::path& csv_path,
                                    const std::filesystem::path& json_path) {
  AdaptationPlan plan;
  {
    std::ifstream is(csv_path);
    if (!is) throw MissingArtifactError("cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(is, line) || line != "segment_id,multiplicity")
      throw ValidationError(csv_path.string() + ": bad plan header");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos)
        throw ValidationError(csv_path.string() + ": malformed row");
      plan.entries.push_back(
          {line.substr(0, comma), std::stoi(line.substr(comma + 1))});
    }
  }
  std::ifstream is(json_path);
  if (!is) throw MissingArtifactError("cannot open " + json_path.string());
  nlohmann::json j;
  is >> j;
  plan.strategy = adapt_strategy_from_name(j.at("strategy").get<std::string>());
  const double b = j.at("budget_seconds_per_test_speaker").get<double>();
  plan.budget_seconds_per_test_speaker =
      b < 0.0 ? std::numeric_limits<double>::infinity() : b;
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.lambda = j.value("lambda", 0.0);
  for (const auto& s : j.at("source_sets"))
    plan.source_sets.push_back({s.at("speaker_id").get<std::string>(),
                                s.at("count").get<int>()});
  return plan;
}

}  // namespace valadapt
