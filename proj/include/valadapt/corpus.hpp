#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace valadapt {

// Exit-code-bearing error categories used across the pipeline (see tools/).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Attribute : int { arousal = 0, valence = 1, dominance = 2 };
inline constexpr std::array<Attribute, 3> kAttributes = {
    Attribute::arousal, Attribute::valence, Attribute::dominance};

const char* attribute_name(Attribute a);
Attribute attribute_from_name(const std::string& name);

/// One labeled speech segment: an utterance-level feature vector with its
/// speaker, duration and (arousal, valence, dominance) scores.
struct Segment {
  std::string id;
  std::string speaker_id;
  double duration_s = 0.0;
  Eigen::VectorXd features;
  std::array<double, 3> labels{};  // arousal, valence, dominance

  double label(Attribute a) const { return labels[static_cast<int>(a)]; }
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<Segment> segments, int dim);

  const std::vector<Segment>& segments() const { return segments_; }
  int dim() const { return dim_; }
  std::size_t size() const { return segments_.size(); }

  const std::array<std::pair<double, double>, 3>& attribute_range() const {
    return attribute_range_;
  }
  void set_attribute_range(std::array<std::pair<double, double>, 3> r) {
    attribute_range_ = r;
  }

  bool has_id(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;  // throws if missing
  const Segment& by_id(const std::string& id) const;

  /// Speaker ids in sorted order.
  std::vector<std::string> speaker_ids() const;
  /// Segment indices of one speaker, in corpus order.
  const std::vector<std::size_t>& segments_of_speaker(
      const std::string& speaker_id) const;
  double speaker_duration(const std::string& speaker_id) const;

  /// Enforces the structural invariants: unique ids, uniform dimension,
  /// positive durations, finite values.
  void validate() const;

 private:
  void rebuild_index();

  std::vector<Segment> segments_;
  int dim_ = 0;
  std::array<std::pair<double, double>, 3> attribute_range_ = {
      std::pair{-3.0, 3.0}, std::pair{-3.0, 3.0}, std::pair{-3.0, 3.0}};
  std::unordered_map<std::string, std::size_t> id_index_;
  std::map<std::string, std::vector<std::size_t>> speaker_index_;
};

enum class Split : int { train = 0, dev = 1, test_a = 2, test_b = 3 };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// Speaker-independent partition of a corpus. test_a holds roughly
/// `test_a_target_seconds` of speech per test speaker; test_b the remainder of
/// those speakers' data.
struct PartitionSet {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test_a;
  std::vector<std::string> test_b;
  double test_a_target_seconds = 200.0;

  const std::vector<std::string>& ids(Split s) const;
  std::vector<std::string> speakers_of(const Corpus& c, Split s) const;

  /// Disjointness, exhaustive coverage of partitioned speakers,
  /// speaker-independence and the per-speaker test-A duration bound.
  void validate(const Corpus& corpus) const;

  void save_csv(const std::filesystem::path& path) const;
  static PartitionSet load_csv(const std::filesystem::path& path);
};

PartitionSet make_partitions(const Corpus& corpus, int n_test, int n_dev,
                             double test_a_seconds, std::uint64_t seed);

/// Same split logic for explicitly chosen test and dev speakers (the k-fold
/// harness chooses them itself); all remaining speakers become train.
PartitionSet make_partitions_for(const Corpus& corpus,
                                 const std::vector<std::string>& test_speakers,
                                 const std::vector<std::string>& dev_speakers,
                                 double test_a_seconds, std::uint64_t seed);

/// Per-dimension z-normalization statistics estimated on the train split.
struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;  // floored at kStdFloor
  double clip_sigma = 3.0;
  std::vector<int> floored_dims;  // zero-variance dimensions

  static constexpr double kStdFloor = 1e-8;

  void save_json(const std::filesystem::path& path) const;
  static NormStats load_json(const std::filesystem::path& path);
};

NormStats compute_norm_stats(const Corpus& corpus,
                             const std::vector<std::string>& train_ids,
                             double clip_sigma = 3.0);

/// Returns a copy of the corpus with features centered, scaled and clipped to
/// [-clip_sigma, clip_sigma].
Corpus apply_normalization(const Corpus& corpus, const NormStats& stats);

/// Configuration of the synthetic corpus generator. Valence is mixed into the
/// features through per-speaker directions (tied to latent style clusters by
/// `speaker_valence_coupling`) while arousal and dominance use one global
/// direction each, so valence is the only attribute whose externalization is
/// speaker dependent.
struct SynthConfig {
  int n_train_speakers = 40;
  int n_test_speakers = 8;
  int n_dev_speakers = 4;
  int segments_per_speaker = 60;
  int dim = 64;
  double speaker_valence_coupling = 1.0;  // in [0, 1]
  int style_clusters = 4;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;

  // Secondary knobs with sensible defaults.
  std::vector<double> cluster_weights;  // empty = uniform cluster sizes
  double min_duration_s = 2.75;
  double max_duration_s = 11.0;
  double label_sigma = 1.2;       // latent attribute scale (clipped to range)
  double label_noise = 0.25;      // annotator-style noise on labels
  double signal_gain = 3.0;       // feature-space gain of attribute signals
  double offset_scale = 4.0;      // speaker mean offset magnitude
  double offset_jitter = 0.35;    // within-cluster offset spread
  double direction_jitter = 0.35; // within-cluster valence direction spread
  double style_wobble = 2.0;      // per-segment spread along the style axis

  int total_speakers() const {
    return n_train_speakers + n_test_speakers + n_dev_speakers;
  }
  void validate() const;
};

/// Ground-truth latents kept by the generator so tests can verify planted
/// structure directly.
struct SynthLatents {
  std::vector<std::string> speaker_ids;        // generation order
  std::vector<int> cluster_of_speaker;         // by speaker index
  Eigen::MatrixXd valence_direction;           // n_speakers x dim (unit rows)
  Eigen::VectorXd global_valence_dir;
  Eigen::VectorXd global_arousal_dir;
  Eigen::VectorXd global_dominance_dir;

  int cluster_of(const std::string& speaker_id) const;
  Eigen::VectorXd valence_direction_of(const std::string& speaker_id) const;
};

struct SyntheticCorpus {
  Corpus corpus;
  SynthLatents latents;
};

SyntheticCorpus generate_synthetic_with_latents(const SynthConfig& cfg);
Corpus generate_synthetic(const SynthConfig& cfg);

// --- Manifest and sidecar I/O ----------------------------------------------
//
// Manifest: CSV with header
//   segment_id,speaker_id,duration_s,arousal,valence,dominance,features_ref
// where features_ref is either the semicolon-separated feature values or the
// path (relative to the manifest) of a binary sidecar.
//
// Sidecar: little-endian, header magic "VAFT", u32 version=1, u32 D,
// u64 count, then per record u32 id_len, id bytes, D float32.

Corpus load_corpus(const std::filesystem::path& manifest_path);

enum class FeatureStorage { inline_csv, sidecar };
void save_corpus(const Corpus& corpus, const std::filesystem::path& manifest_path,
                 FeatureStorage storage = FeatureStorage::sidecar);

}  // namespace valadapt
