#include "valadapt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "valadapt/rng.hpp"

namespace valadapt {

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool looks_like_inline_features(const std::string& field) {
  if (field.find(';') != std::string::npos) return true;
  // A single real is a valid inline vector for D = 1.
  return field.find_first_not_of("0123456789.eE+-") == std::string::npos &&
         !field.empty();
}

}  // namespace

const char* attribute_name(Attribute a) {
  switch (a) {
    case Attribute::arousal: return "arousal";
    case Attribute::valence: return "valence";
    case Attribute::dominance: return "dominance";
  }
  return "?";
}

Attribute attribute_from_name(const std::string& name) {
  for (Attribute a : kAttributes)
    if (name == attribute_name(a)) return a;
  throw ValidationError("unknown attribute: " + name);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test_a: return "test_a";
    case Split::test_b: return "test_b";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  for (Split s : {Split::train, Split::dev, Split::test_a, Split::test_b})
    if (name == split_name(s)) return s;
  throw ValidationError("unknown split: " + name);
}

// --- Corpus ------------------------------------------------------------------

Corpus::Corpus(std::vector<Segment> segments, int dim)
    : segments_(std::move(segments)), dim_(dim) {
  rebuild_index();
  validate();
}

void Corpus::rebuild_index() {
  id_index_.clear();
  speaker_index_.clear();
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const Segment& s = segments_[i];
    auto [it, inserted] = id_index_.emplace(s.id, i);
    if (!inserted)
      throw ValidationError("duplicate segment id \"" + s.id + "\"");
    speaker_index_[s.speaker_id].push_back(i);
  }
}

bool Corpus::has_id(const std::string& id) const {
  return id_index_.count(id) > 0;
}

std::size_t Corpus::index_of(const std::string& id) const {
  auto it = id_index_.find(id);
  if (it == id_index_.end())
    throw ValidationError("unknown segment id \"" + id + "\"");
  return it->second;
}

const Segment& Corpus::by_id(const std::string& id) const {
  return segments_[index_of(id)];
}

std::vector<std::string> Corpus::speaker_ids() const {
  std::vector<std::string> out;
  out.reserve(speaker_index_.size());
  for (const auto& [sp, _] : speaker_index_) out.push_back(sp);
  return out;
}

const std::vector<std::size_t>& Corpus::segments_of_speaker(
    const std::string& speaker_id) const {
  auto it = speaker_index_.find(speaker_id);
  if (it == speaker_index_.end())
    throw ValidationError("unknown speaker id \"" + speaker_id + "\"");
  return it->second;
}

double Corpus::speaker_duration(const std::string& speaker_id) const {
  double total = 0.0;
  for (std::size_t i : segments_of_speaker(speaker_id))
    total += segments_[i].duration_s;
  return total;
}

void Corpus::validate() const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const Segment& s = segments_[i];
    if (s.duration_s <= 0.0)
      throw ValidationError("segment \"" + s.id + "\": duration must be > 0");
    if (s.features.size() != dim_)
      throw ValidationError("segment \"" + s.id + "\": feature dimension " +
                            std::to_string(s.features.size()) +
                            " != corpus dim " + std::to_string(dim_));
    if (!s.features.allFinite())
      throw ValidationError("segment \"" + s.id + "\": non-finite feature");
    for (double v : s.labels)
      if (!std::isfinite(v))
        throw ValidationError("segment \"" + s.id + "\": non-finite label");
  }
}

// --- Partitions --------------------------------------------------------------

const std::vector<std::string>& PartitionSet::ids(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::dev: return dev;
    case Split::test_a: return test_a;
    case Split::test_b: return test_b;
  }
  throw ValidationError("bad split");
}

std::vector<std::string> PartitionSet::speakers_of(const Corpus& c,
                                                   Split s) const {
  std::set<std::string> speakers;
  for (const std::string& id : ids(s)) speakers.insert(c.by_id(id).speaker_id);
  return {speakers.begin(), speakers.end()};
}

void PartitionSet::validate(const Corpus& corpus) const {
  std::set<std::string> seen;
  for (Split s : {Split::train, Split::dev, Split::test_a, Split::test_b}) {
    for (const std::string& id : ids(s)) {
      corpus.index_of(id);
      if (!seen.insert(id).second)
        throw ValidationError("segment \"" + id + "\" in multiple partitions");
    }
  }

  auto train_speakers = speakers_of(corpus, Split::train);
  auto dev_speakers = speakers_of(corpus, Split::dev);
  auto ta_speakers = speakers_of(corpus, Split::test_a);
  auto tb_speakers = speakers_of(corpus, Split::test_b);
  if (ta_speakers != tb_speakers)
    throw ValidationError("test_a and test_b speaker sets differ");
  for (const auto& sets : {train_speakers, dev_speakers}) {
    for (const std::string& sp : sets)
      if (std::binary_search(ta_speakers.begin(), ta_speakers.end(), sp))
        throw ValidationError("speaker \"" + sp +
                              "\" appears in both test and train/dev");
  }
  for (const std::string& sp : train_speakers)
    if (std::binary_search(dev_speakers.begin(), dev_speakers.end(), sp))
      throw ValidationError("speaker \"" + sp + "\" in both train and dev");

  // Per-speaker test-A duration within one segment of the target.
  std::map<std::string, double> ta_duration;
  std::map<std::string, double> max_seg;
  for (const std::string& id : test_a) {
    const Segment& s = corpus.by_id(id);
    ta_duration[s.speaker_id] += s.duration_s;
  }
  for (const std::string& sp : ta_speakers)
    for (std::size_t i : corpus.segments_of_speaker(sp))
      max_seg[sp] = std::max(max_seg[sp], corpus.segments()[i].duration_s);
  for (const std::string& sp : ta_speakers) {
    const double got = ta_duration[sp];
    if (std::abs(got - test_a_target_seconds) > max_seg[sp] + 1e-9)
      throw ValidationError("speaker \"" + sp + "\" test_a duration " +
                            std::to_string(got) +
                            " not within one segment of target");
  }
}

void PartitionSet::save_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os << "segment_id,split\n";
  for (Split s : {Split::train, Split::dev, Split::test_a, Split::test_b})
    for (const std::string& id : ids(s)) os << id << ',' << split_name(s) << '\n';
  os << std::flush;
  if (!os) throw MissingArtifactError("write failed for " + path.string());
}

PartitionSet PartitionSet::load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  PartitionSet parts;
  std::string line;
  if (!std::getline(is, line) || split_csv_line(line) !=
                                     std::vector<std::string>{"segment_id", "split"})
    throw ValidationError(path.string() + ": bad partition header");
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 2)
      throw ValidationError(path.string() + " row " + std::to_string(row) +
                            ": expected 2 fields");
    switch (split_from_name(fields[1])) {
      case Split::train: parts.train.push_back(fields[0]); break;
      case Split::dev: parts.dev.push_back(fields[0]); break;
      case Split::test_a: parts.test_a.push_back(fields[0]); break;
      case Split::test_b: parts.test_b.push_back(fields[0]); break;
    }
  }
  return parts;
}

PartitionSet make_partitions_for(const Corpus& corpus,
                                 const std::vector<std::string>& test_speakers,
                                 const std::vector<std::string>& dev_speakers,
                                 double test_a_seconds, std::uint64_t seed) {
  if (test_speakers.empty())
    throw ValidationError("make_partitions_for: no test speakers");
  {
    std::string short_list;
    for (const std::string& sp : test_speakers)
      if (corpus.speaker_duration(sp) < test_a_seconds) short_list += " " + sp;
    if (!short_list.empty())
      throw ValidationError(
          "make_partitions_for: insufficient duration for test speakers:" +
          short_list);
  }
  std::set<std::string> test_set(test_speakers.begin(), test_speakers.end());
  std::set<std::string> dev_set(dev_speakers.begin(), dev_speakers.end());

  PartitionSet parts;
  parts.test_a_target_seconds = test_a_seconds;
  for (const std::string& sp : corpus.speaker_ids()) {
    if (test_set.count(sp)) continue;
    auto& bucket = dev_set.count(sp) ? parts.dev : parts.train;
    for (std::size_t k : corpus.segments_of_speaker(sp))
      bucket.push_back(corpus.segments()[k].id);
  }

  // Greedy seeded fill: add whole segments while the cumulative duration is
  // below the target, always leaving at least one segment for test-B.
  for (const std::string& sp : test_speakers) {
    std::vector<std::size_t> order(corpus.segments_of_speaker(sp));
    Rng fill_rng(derive_seed(seed, "test_a_fill", sp));
    fill_rng.shuffle(order);
    double cumulative = 0.0;
    std::size_t taken = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Segment& s = corpus.segments()[order[pos]];
      const bool would_empty_test_b =
          (pos + 1 == order.size()) && taken == pos;
      if (cumulative < test_a_seconds && !would_empty_test_b) {
        parts.test_a.push_back(s.id);
        cumulative += s.duration_s;
        ++taken;
      } else {
        parts.test_b.push_back(s.id);
      }
    }
  }

  parts.validate(corpus);
  return parts;
}

PartitionSet make_partitions(const Corpus& corpus, int n_test, int n_dev,
                             double test_a_seconds, std::uint64_t seed) {
  if (n_test <= 0 || n_dev < 0)
    throw ValidationError("make_partitions: counts must be positive");
  std::vector<std::string> speakers = corpus.speaker_ids();
  if (static_cast<int>(speakers.size()) < n_test + n_dev + 1)
    throw ValidationError("make_partitions: not enough speakers");

  Rng rng(derive_seed(seed, "partition"));
  rng.shuffle(speakers);

  // Test speakers must carry at least the test-A target so that test-B keeps
  // at least one segment per speaker.
  std::vector<std::string> test_speakers;
  std::vector<std::string> rest;
  for (const std::string& sp : speakers) {
    if (static_cast<int>(test_speakers.size()) < n_test &&
        corpus.speaker_duration(sp) >= test_a_seconds) {
      test_speakers.push_back(sp);
    } else {
      rest.push_back(sp);
    }
  }
  if (static_cast<int>(test_speakers.size()) < n_test) {
    std::string msg = "make_partitions: insufficient duration for speakers:";
    for (const std::string& sp : speakers)
      if (corpus.speaker_duration(sp) < test_a_seconds) msg += " " + sp;
    throw ValidationError(msg);
  }

  const std::vector<std::string> dev_speakers(rest.begin(),
                                              rest.begin() + n_dev);
  return make_partitions_for(corpus, test_speakers, dev_speakers,
                             test_a_seconds, seed);
}

// --- Normalization -----------------------------------------------------------

NormStats compute_norm_stats(const Corpus& corpus,
                             const std::vector<std::string>& train_ids,
                             double clip_sigma) {
  if (train_ids.size() < 2)
    throw ValidationError("compute_norm_stats: need at least 2 segments");
  const int d = corpus.dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const std::string& id : train_ids) mean += corpus.by_id(id).features;
  mean /= static_cast<double>(train_ids.size());

  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  for (const std::string& id : train_ids) {
    Eigen::VectorXd c = corpus.by_id(id).features - mean;
    var += c.cwiseProduct(c);
  }
  var /= static_cast<double>(train_ids.size());  // population variance

  NormStats stats;
  stats.mean = std::move(mean);
  stats.stddev = var.cwiseSqrt();
  stats.clip_sigma = clip_sigma;
  for (int i = 0; i < d; ++i) {
    if (stats.stddev[i] < NormStats::kStdFloor) {
      stats.stddev[i] = NormStats::kStdFloor;
      stats.floored_dims.push_back(i);
    }
  }
  if (!stats.floored_dims.empty())
    std::cerr << "[valadapt] warning: " << stats.floored_dims.size()
              << " zero-variance feature dimension(s), std floored\n";
  return stats;
}

Corpus apply_normalization(const Corpus& corpus, const NormStats& stats) {
  if (stats.mean.size() != corpus.dim())
    throw ValidationError("apply_normalization: dimension mismatch");
  std::vector<Segment> out = corpus.segments();
  for (Segment& s : out) {
    s.features = (s.features - stats.mean).cwiseQuotient(stats.stddev);
    s.features = s.features.cwiseMax(-stats.clip_sigma).cwiseMin(stats.clip_sigma);
  }
  Corpus result(std::move(out), corpus.dim());
  result.set_attribute_range(corpus.attribute_range());
  return result;
}

void NormStats::save_json(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os << "{\n  \"clip_sigma\": " << format_double(clip_sigma) << ",\n";
  os << "  \"mean\": [";
  for (int i = 0; i < mean.size(); ++i)
    os << (i ? "," : "") << format_double(mean[i]);
  os << "],\n  \"stddev\": [";
  for (int i = 0; i < stddev.size(); ++i)
    os << (i ? "," : "") << format_double(stddev[i]);
  os << "]\n}\n";
}

NormStats NormStats::load_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ValidationError(path.string() + ": bad JSON: " + e.what());
  }
  NormStats stats;
  stats.clip_sigma = j.at("clip_sigma").get<double>();
  const auto& m = j.at("mean");
  const auto& sd = j.at("stddev");
  if (m.size() != sd.size())
    throw ValidationError(path.string() + ": mean/stddev size mismatch");
  stats.mean.resize(static_cast<long>(m.size()));
  stats.stddev.resize(static_cast<long>(sd.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    stats.mean[static_cast<long>(i)] = m[i].get<double>();
    stats.stddev[static_cast<long>(i)] = sd[i].get<double>();
  }
  return stats;
}

// --- Synthetic generator -----------------------------------------------------

void SynthConfig::validate() const {
  if (n_train_speakers <= 0 || n_test_speakers <= 0 || n_dev_speakers <= 0)
    throw ValidationError("SynthConfig: speaker counts must be > 0");
  if (segments_per_speaker <= 0)
    throw ValidationError("SynthConfig: segments_per_speaker must be > 0");
  if (dim <= 0) throw ValidationError("SynthConfig: dim must be > 0");
  if (speaker_valence_coupling < 0.0 || speaker_valence_coupling > 1.0)
    throw ValidationError("SynthConfig: coupling must be in [0,1]");
  if (style_clusters <= 0)
    throw ValidationError("SynthConfig: style_clusters must be > 0");
  if (noise_scale < 0.0)
    throw ValidationError("SynthConfig: noise_scale must be >= 0");
  if (!cluster_weights.empty()) {
    if (static_cast<int>(cluster_weights.size()) != style_clusters)
      throw ValidationError("SynthConfig: cluster_weights size mismatch");
    for (double w : cluster_weights)
      if (!(w > 0.0)) throw ValidationError("SynthConfig: cluster_weights must be > 0");
  }
  if (min_duration_s <= 0.0 || max_duration_s < min_duration_s)
    throw ValidationError("SynthConfig: bad duration range");
}

int SynthLatents::cluster_of(const std::string& speaker_id) const {
  for (std::size_t i = 0; i < speaker_ids.size(); ++i)
    if (speaker_ids[i] == speaker_id) return cluster_of_speaker[i];
  throw ValidationError("unknown speaker in latents: " + speaker_id);
}

Eigen::VectorXd SynthLatents::valence_direction_of(
    const std::string& speaker_id) const {
  for (std::size_t i = 0; i < speaker_ids.size(); ++i)
    if (speaker_ids[i] == speaker_id)
      return valence_direction.row(static_cast<long>(i)).transpose();
  throw ValidationError("unknown speaker in latents: " + speaker_id);
}

namespace {

Eigen::VectorXd random_unit_vector(Rng& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v / v.norm();
}

// Deterministic largest-remainder apportionment of n speakers to clusters.
std::vector<int> cluster_counts(int n, int clusters,
                                const std::vector<double>& weights) {
  std::vector<double> w(clusters, 1.0);
  if (!weights.empty()) w = weights;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<int> counts(clusters, 0);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int c = 0; c < clusters; ++c) {
    const double exact = n * w[c] / total;
    counts[c] = static_cast<int>(std::floor(exact));
    assigned += counts[c];
    remainders.push_back({exact - counts[c], c});
  }
  std::sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int i = 0; i < n - assigned; ++i) counts[remainders[i].second] += 1;
  return counts;
}

double clip(double v, double lo, double hi) {
  return std::min(hi, std::max(lo, v));
}

}  // namespace

SyntheticCorpus generate_synthetic_with_latents(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "synth"));
  const int d = cfg.dim;
  const int n_speakers = cfg.total_speakers();

  // Global attribute directions, orthogonalized for clean channels.
  Eigen::MatrixXd globals(3, d);
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd v = random_unit_vector(rng, d);
    for (int j = 0; j < i; ++j)
      v -= v.dot(globals.row(j)) * globals.row(j).transpose();
    globals.row(i) = (v / v.norm()).transpose();
  }
  const Eigen::VectorXd g_aro = globals.row(0).transpose();
  const Eigen::VectorXd g_val = globals.row(1).transpose();
  const Eigen::VectorXd g_dom = globals.row(2).transpose();

  // Cluster latents: a mean-offset direction and a valence direction each.
  Eigen::MatrixXd cluster_offset(cfg.style_clusters, d);
  Eigen::MatrixXd cluster_val_dir(cfg.style_clusters, d);
  for (int c = 0; c < cfg.style_clusters; ++c) {
    cluster_offset.row(c) = random_unit_vector(rng, d).transpose();
    cluster_val_dir.row(c) = random_unit_vector(rng, d).transpose();
  }

  // Speaker cluster assignment: apportioned counts, seeded order.
  std::vector<int> counts =
      cluster_counts(n_speakers, cfg.style_clusters, cfg.cluster_weights);
  std::vector<int> assignment;
  for (int c = 0; c < cfg.style_clusters; ++c)
    assignment.insert(assignment.end(), counts[c], c);
  rng.shuffle(assignment);

  SynthLatents latents;
  latents.cluster_of_speaker = assignment;
  latents.valence_direction.resize(n_speakers, d);
  latents.global_valence_dir = g_val;
  latents.global_arousal_dir = g_aro;
  latents.global_dominance_dir = g_dom;

  std::vector<Eigen::VectorXd> speaker_offset(n_speakers);
  std::vector<Eigen::VectorXd> speaker_style_axis(n_speakers);
  std::vector<Eigen::VectorXd> speaker_val_dir(n_speakers);
  int id_width = 1;
  for (int w = n_speakers; w >= 10; w /= 10) ++id_width;
  for (int s = 0; s < n_speakers; ++s) {
    std::string id = "spk";
    std::string num = std::to_string(s);
    id.append(id_width - num.size(), '0');
    id += num;
    latents.speaker_ids.push_back(id);

    const int c = assignment[s];
    // One shared per-speaker latent ties the offset jitter to the valence
    // direction jitter: speakers close in feature space also externalize
    // valence through similar directions.
    const Eigen::VectorXd eta = random_unit_vector(rng, d);
    Eigen::VectorXd style_axis =
        cluster_offset.row(c).transpose() + cfg.offset_jitter * eta;
    style_axis /= style_axis.norm();
    speaker_style_axis[s] = style_axis;
    speaker_offset[s] = cfg.offset_scale * style_axis;

    Eigen::VectorXd style_dir =
        cluster_val_dir.row(c).transpose() + cfg.direction_jitter * eta;
    style_dir /= style_dir.norm();
    Eigen::VectorXd dir = (1.0 - cfg.speaker_valence_coupling) * g_val +
                          cfg.speaker_valence_coupling * style_dir;
    dir /= dir.norm();
    speaker_val_dir[s] = dir;
    latents.valence_direction.row(s) = dir.transpose();
  }

  std::vector<Segment> segments;
  segments.reserve(static_cast<std::size_t>(n_speakers) *
                   cfg.segments_per_speaker);
  for (int s = 0; s < n_speakers; ++s) {
    for (int t = 0; t < cfg.segments_per_speaker; ++t) {
      Segment seg;
      seg.speaker_id = latents.speaker_ids[s];
      seg.id = seg.speaker_id + "_" + std::to_string(t);
      seg.duration_s = rng.uniform(cfg.min_duration_s, cfg.max_duration_s);

      const double a = clip(rng.normal(0.0, cfg.label_sigma), -3.0, 3.0);
      const double v = clip(rng.normal(0.0, cfg.label_sigma), -3.0, 3.0);
      const double dm = clip(rng.normal(0.0, cfg.label_sigma), -3.0, 3.0);

      Eigen::VectorXd noise(d);
      for (int i = 0; i < d; ++i) noise[i] = rng.normal();
      // Per-segment variability along the speaker's style axis: the axis
      // shows up in the speaker's own principal directions, so speakers with
      // similar style axes project onto each other's spaces consistently.
      const double wobble = cfg.style_wobble * rng.normal();
      seg.features = speaker_offset[s] + wobble * speaker_style_axis[s] +
                     cfg.signal_gain * (a * g_aro + dm * g_dom +
                                        v * speaker_val_dir[s]) +
                     cfg.noise_scale * noise;

      seg.labels = {clip(a + rng.normal(0.0, cfg.label_noise), -3.0, 3.0),
                    clip(v + rng.normal(0.0, cfg.label_noise), -3.0, 3.0),
                    clip(dm + rng.normal(0.0, cfg.label_noise), -3.0, 3.0)};
      segments.push_back(std::move(seg));
    }
  }

  SyntheticCorpus out{Corpus(std::move(segments), d), std::move(latents)};
  return out;
}

Corpus generate_synthetic(const SynthConfig& cfg) {
  return generate_synthetic_with_latents(cfg).corpus;
}

// --- Manifest / sidecar I/O --------------------------------------------------

namespace {

constexpr char kSidecarMagic[4] = {'V', 'A', 'F', 'T'};

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw ValidationError("sidecar: unexpected end of file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

std::unordered_map<std::string, Eigen::VectorXd> load_sidecar(
    const std::filesystem::path& path, int* dim_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open sidecar " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kSidecarMagic, 4) != 0)
    throw ValidationError("sidecar " + path.string() + ": bad magic");
  const auto version = read_le<std::uint32_t>(is);
  if (version != 1)
    throw ValidationError("sidecar " + path.string() + ": unsupported version");
  const auto d = read_le<std::uint32_t>(is);
  const auto count = read_le<std::uint64_t>(is);
  std::unordered_map<std::string, Eigen::VectorXd> out;
  out.reserve(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id_len = read_le<std::uint32_t>(is);
    std::string id(id_len, '\0');
    is.read(id.data(), id_len);
    if (!is) throw ValidationError("sidecar: truncated record id");
    Eigen::VectorXd f(d);
    for (std::uint32_t i = 0; i < d; ++i)
      f[i] = static_cast<double>(read_le<float>(is));
    if (!out.emplace(std::move(id), std::move(f)).second)
      throw ValidationError("sidecar " + path.string() +
                            ": duplicate record id");
  }
  *dim_out = static_cast<int>(d);
  return out;
}

void save_sidecar(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingArtifactError("cannot write sidecar " + path.string());
  os.write(kSidecarMagic, 4);
  write_le<std::uint32_t>(os, 1);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(corpus.dim()));
  write_le<std::uint64_t>(os, corpus.size());
  for (const Segment& s : corpus.segments()) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.id.size()));
    os.write(s.id.data(), static_cast<std::streamsize>(s.id.size()));
    for (int i = 0; i < s.features.size(); ++i)
      write_le<float>(os, static_cast<float>(s.features[i]));
  }
  if (!os) throw MissingArtifactError("write failed for " + path.string());
}

const char* kManifestHeader =
    "segment_id,speaker_id,duration_s,arousal,valence,dominance,features_ref";

double parse_real(const std::string& s, std::size_t row, const char* what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ValidationError("manifest row " + std::to_string(row) + ": bad " +
                          what + " \"" + s + "\"");
  }
  if (pos != s.size())
    throw ValidationError("manifest row " + std::to_string(row) + ": bad " +
                          what + " \"" + s + "\"");
  if (!std::isfinite(v))
    throw ValidationError("manifest row " + std::to_string(row) +
                          ": non-finite " + what);
  return v;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is)
    throw MissingArtifactError("cannot open manifest " +
                               manifest_path.string());
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader)
    throw ValidationError(manifest_path.string() + ": bad manifest header");

  std::vector<Segment> segments;
  std::unordered_map<std::string, std::size_t> seen;
  std::unordered_map<std::string, Eigen::VectorXd> sidecar;
  std::filesystem::path sidecar_path;
  int dim = -1;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 7)
      throw ValidationError("manifest row " + std::to_string(row) +
                            ": expected 7 fields, got " +
                            std::to_string(fields.size()));
    Segment seg;
    seg.id = fields[0];
    seg.speaker_id = fields[1];
    seg.duration_s = parse_real(fields[2], row, "duration");
    seg.labels = {parse_real(fields[3], row, "arousal"),
                  parse_real(fields[4], row, "valence"),
                  parse_real(fields[5], row, "dominance")};
    if (!seen.emplace(seg.id, row).second)
      throw ValidationError("manifest row " + std::to_string(row) +
                            ": duplicate segment id \"" + seg.id + "\"");

    const std::string& ref = fields[6];
    if (looks_like_inline_features(ref)) {
      std::vector<double> vals;
      std::string tok;
      std::istringstream ts(ref);
      while (std::getline(ts, tok, ';'))
        vals.push_back(parse_real(tok, row, "feature"));
      seg.features = Eigen::Map<Eigen::VectorXd>(vals.data(),
                                                 static_cast<long>(vals.size()));
    } else {
      const std::filesystem::path p = manifest_path.parent_path() / ref;
      if (sidecar.empty()) {
        int side_dim = 0;
        sidecar = load_sidecar(p, &side_dim);
        sidecar_path = p;
        if (dim >= 0 && side_dim != dim)
          throw ValidationError("manifest row " + std::to_string(row) +
                                ": sidecar dimension mismatch");
        dim = side_dim;
      } else if (p != sidecar_path) {
        throw ValidationError("manifest row " + std::to_string(row) +
                              ": multiple sidecar files are not supported");
      }
      auto it = sidecar.find(seg.id);
      if (it == sidecar.end())
        throw ValidationError("manifest row " + std::to_string(row) +
                              ": id \"" + seg.id + "\" missing from sidecar");
      seg.features = it->second;
    }

    if (dim < 0) dim = static_cast<int>(seg.features.size());
    if (seg.features.size() != dim)
      throw ValidationError("manifest row " + std::to_string(row) +
                            ": feature dimension " +
                            std::to_string(seg.features.size()) +
                            " != expected " + std::to_string(dim));
    if (seg.duration_s <= 0.0)
      throw ValidationError("manifest row " + std::to_string(row) +
                            ": duration must be > 0");
    segments.push_back(std::move(seg));
  }
  if (segments.empty())
    throw ValidationError(manifest_path.string() + ": empty manifest");
  return Corpus(std::move(segments), dim);
}

void save_corpus(const Corpus& corpus,
                 const std::filesystem::path& manifest_path,
                 FeatureStorage storage) {
  std::ofstream os(manifest_path);
  if (!os)
    throw MissingArtifactError("cannot write manifest " +
                               manifest_path.string());
  std::string sidecar_name;
  if (storage == FeatureStorage::sidecar) {
    sidecar_name = manifest_path.stem().string() + ".vaft";
    save_sidecar(manifest_path.parent_path() / sidecar_name, corpus);
  }
  os << kManifestHeader << '\n';
  for (const Segment& s : corpus.segments()) {
    os << s.id << ',' << s.speaker_id << ',' << format_double(s.duration_s)
       << ',' << format_double(s.labels[0]) << ',' << format_double(s.labels[1])
       << ',' << format_double(s.labels[2]) << ',';
    if (storage == FeatureStorage::sidecar) {
      os << sidecar_name;
    } else {
      for (int i = 0; i < s.features.size(); ++i)
        os << (i ? ";" : "") << format_double(s.features[i]);
    }
    os << '\n';
  }
  os << std::flush;
  if (!os)
    throw MissingArtifactError("write failed for " + manifest_path.string());
}

}  // namespace valadapt
