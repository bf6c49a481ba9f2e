#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "valadapt/corpus.hpp"
#include "valadapt/rng.hpp"

using namespace valadapt;
namespace fs = std::filesystem;

namespace {

fs::path test_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "valadapt_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Segment make_segment(const std::string& id, const std::string& speaker,
                     double duration, std::vector<double> feats,
                     std::array<double, 3> labels = {0, 0, 0}) {
  Segment s;
  s.id = id;
  s.speaker_id = speaker;
  s.duration_s = duration;
  s.features = Eigen::Map<Eigen::VectorXd>(feats.data(),
                                           static_cast<long>(feats.size()));
  s.labels = labels;
  return s;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Ridge probe used as an independent oracle for the planted valence structure.
struct RidgeProbe {
  Eigen::VectorXd w;
  Eigen::VectorXd mean_x;
  double mean_y = 0.0;

  static RidgeProbe fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        double reg) {
    RidgeProbe p;
    p.mean_x = X.colwise().mean();
    p.mean_y = y.mean();
    Eigen::MatrixXd Xc = X.rowwise() - p.mean_x.transpose();
    Eigen::VectorXd yc = y.array() - p.mean_y;
    Eigen::MatrixXd A = Xc.transpose() * Xc +
                        reg * Eigen::MatrixXd::Identity(X.cols(), X.cols());
    p.w = A.ldlt().solve(Xc.transpose() * yc);
    return p;
  }
  double mse(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) const {
    Eigen::VectorXd pred =
        ((X.rowwise() - mean_x.transpose()) * w).array() + mean_y;
    return (pred - y).squaredNorm() / static_cast<double>(y.size());
  }
};

}  // namespace

TEST_CASE("manifest ingestion: 3 rows, inline features, D=4") {
  const fs::path dir = test_dir("manifest_basic");
  const fs::path manifest = dir / "corpus.csv";
  {
    std::ofstream os(manifest);
    os << "segment_id,speaker_id,duration_s,arousal,valence,dominance,"
          "features_ref\n";
    os << "s1,spkA,3.5,0.1,0.2,0.3,1;2;3;4\n";
    os << "s2,spkA,4.0,0.4,0.5,0.6,5;6;7;8\n";
    os << "s3,spkB,2.75,-1,-2,-3,0.5;0.25;0;1e-3\n";
  }
  Corpus c = load_corpus(manifest);
  CHECK(c.size() == 3);
  CHECK(c.dim() == 4);
  CHECK(c.by_id("s3").features[3] == doctest::Approx(1e-3));
  CHECK(c.by_id("s2").speaker_id == "spkA");
  CHECK(c.by_id("s1").label(Attribute::valence) == doctest::Approx(0.2));
}

TEST_CASE("manifest ingestion: duplicate id names the offender") {
  const fs::path dir = test_dir("manifest_dup");
  const fs::path manifest = dir / "corpus.csv";
  {
    std::ofstream os(manifest);
    os << "segment_id,speaker_id,duration_s,arousal,valence,dominance,"
          "features_ref\n";
    os << "s1,spkA,3.5,0,0,0,1;2\n";
    os << "s1,spkA,4.0,0,0,0,3;4\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(manifest),
                       doctest::Contains("\"s1\""), ValidationError);
}

TEST_CASE("manifest ingestion: dimension mismatch reports the row") {
  const fs::path dir = test_dir("manifest_dim");
  const fs::path manifest = dir / "corpus.csv";
  {
    std::ofstream os(manifest);
    os << "segment_id,speaker_id,duration_s,arousal,valence,dominance,"
          "features_ref\n";
    os << "s1,spkA,3.5,0,0,0,1;2;3;4\n";
    os << "s2,spkA,4.0,0,0,0,1;2;3;4;5\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(manifest), doctest::Contains("row 3"),
                       ValidationError);
}

TEST_CASE("manifest ingestion: missing file and non-finite value") {
  const fs::path dir = test_dir("manifest_missing");
  CHECK_THROWS_AS(load_corpus(dir / "nope.csv"), MissingArtifactError);

  const fs::path manifest = dir / "bad.csv";
  {
    std::ofstream os(manifest);
    os << "segment_id,speaker_id,duration_s,arousal,valence,dominance,"
          "features_ref\n";
    os << "s1,spkA,3.5,0,nan,0,1;2\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(manifest), doctest::Contains("row 2"),
                       ValidationError);
}

TEST_CASE("sidecar round trip preserves float32 features and ids") {
  const fs::path dir = test_dir("sidecar");
  SynthConfig cfg;
  cfg.n_train_speakers = 3;
  cfg.n_test_speakers = 1;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 4;
  cfg.dim = 6;
  cfg.seed = 11;
  Corpus c = generate_synthetic(cfg);

  save_corpus(c, dir / "m.csv", FeatureStorage::sidecar);
  Corpus back = load_corpus(dir / "m.csv");
  REQUIRE(back.size() == c.size());
  for (const Segment& s : c.segments()) {
    const Segment& b = back.by_id(s.id);
    CHECK(b.speaker_id == s.speaker_id);
    CHECK(b.duration_s == doctest::Approx(s.duration_s));
    for (int i = 0; i < c.dim(); ++i)
      CHECK(b.features[i] ==
            doctest::Approx(static_cast<double>(static_cast<float>(s.features[i]))));
  }
}

TEST_CASE("inline storage round trips doubles exactly") {
  const fs::path dir = test_dir("inline_exact");
  SynthConfig cfg;
  cfg.n_train_speakers = 2;
  cfg.n_test_speakers = 1;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 3;
  cfg.dim = 5;
  cfg.seed = 3;
  Corpus c = generate_synthetic(cfg);
  save_corpus(c, dir / "m.csv", FeatureStorage::inline_csv);
  Corpus back = load_corpus(dir / "m.csv");
  for (const Segment& s : c.segments()) {
    const Segment& b = back.by_id(s.id);
    for (int i = 0; i < c.dim(); ++i) CHECK(b.features[i] == s.features[i]);
    for (int i = 0; i < 3; ++i) CHECK(b.labels[i] == s.labels[i]);
  }
}

TEST_CASE("synthetic generation is deterministic, byte-for-byte") {
  const fs::path dir = test_dir("synth_det");
  SynthConfig cfg;
  cfg.n_train_speakers = 5;
  cfg.n_test_speakers = 2;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 6;
  cfg.dim = 12;
  cfg.seed = 99;
  Corpus a = generate_synthetic(cfg);
  Corpus b = generate_synthetic(cfg);
  fs::create_directories(dir / "run1");
  fs::create_directories(dir / "run2");
  save_corpus(a, dir / "run1" / "m.csv", FeatureStorage::sidecar);
  save_corpus(b, dir / "run2" / "m.csv", FeatureStorage::sidecar);
  CHECK(file_bytes(dir / "run1" / "m.csv") == file_bytes(dir / "run2" / "m.csv"));
  CHECK(file_bytes(dir / "run1" / "m.vaft") == file_bytes(dir / "run2" / "m.vaft"));
}

TEST_CASE("coupling=0 makes every valence projection the global one") {
  SynthConfig cfg;
  cfg.n_train_speakers = 4;
  cfg.n_test_speakers = 2;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 3;
  cfg.dim = 16;
  cfg.speaker_valence_coupling = 0.0;
  cfg.seed = 5;
  SyntheticCorpus sc = generate_synthetic_with_latents(cfg);
  for (long s = 0; s < sc.latents.valence_direction.rows(); ++s) {
    const double cos = sc.latents.valence_direction.row(s).transpose().dot(
        sc.latents.global_valence_dir);
    CHECK(cos == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("coupling=1 with 2 clusters: within-cluster projection similarity "
          "dominates") {
  SynthConfig cfg;
  cfg.n_train_speakers = 8;
  cfg.n_test_speakers = 2;
  cfg.n_dev_speakers = 2;
  cfg.segments_per_speaker = 3;
  cfg.dim = 32;
  cfg.style_clusters = 2;
  cfg.speaker_valence_coupling = 1.0;
  cfg.seed = 17;
  SyntheticCorpus sc = generate_synthetic_with_latents(cfg);
  const auto& L = sc.latents;
  const int n = static_cast<int>(L.speaker_ids.size());
  double min_within = 1.0, max_cross = -1.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double cos =
          L.valence_direction.row(i).dot(L.valence_direction.row(j));
      if (L.cluster_of_speaker[i] == L.cluster_of_speaker[j])
        min_within = std::min(min_within, cos);
      else
        max_cross = std::max(max_cross, cos);
    }
  }
  CHECK(min_within > max_cross);
}

TEST_CASE("make_partitions: greedy fill stays within one segment of target") {
  std::vector<Segment> segs;
  // One rich speaker plus two ordinary ones.
  segs.push_back(make_segment("a1", "spkA", 120.0, {0.0}));
  segs.push_back(make_segment("a2", "spkA", 90.0, {0.0}));
  segs.push_back(make_segment("a3", "spkA", 100.0, {0.0}));
  for (int i = 0; i < 4; ++i)
    segs.push_back(make_segment("b" + std::to_string(i), "spkB", 80.0, {0.0}));
  for (int i = 0; i < 4; ++i)
    segs.push_back(make_segment("c" + std::to_string(i), "spkC", 80.0, {0.0}));
  Corpus c(segs, 1);

  PartitionSet parts = make_partitions(c, /*n_test=*/1, /*n_dev=*/1,
                                       /*test_a_seconds=*/200.0, /*seed=*/4);
  parts.validate(c);
  double ta = 0.0;
  for (const auto& id : parts.test_a) ta += c.by_id(id).duration_s;
  const auto test_speakers = parts.speakers_of(c, Split::test_a);
  REQUIRE(test_speakers.size() == 1);
  double max_seg = 0.0;
  for (std::size_t i : c.segments_of_speaker(test_speakers[0]))
    max_seg = std::max(max_seg, c.segments()[i].duration_s);
  CHECK(std::abs(ta - 200.0) <= max_seg);
  CHECK(!parts.test_b.empty());
}

TEST_CASE("make_partitions: insufficient duration lists the speaker") {
  std::vector<Segment> segs;
  segs.push_back(make_segment("a1", "spkA", 50.0, {0.0}));
  segs.push_back(make_segment("b1", "spkB", 50.0, {0.0}));
  segs.push_back(make_segment("c1", "spkC", 50.0, {0.0}));
  Corpus c(segs, 1);
  CHECK_THROWS_WITH_AS(make_partitions(c, 1, 1, 200.0, 0),
                       doctest::Contains("spk"), ValidationError);
}

TEST_CASE("partition invariants hold over random corpora and seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthConfig cfg;
    Rng rng(derive_seed(seed, "prop"));
    cfg.n_train_speakers = 3 + static_cast<int>(rng.uniform_index(5));
    cfg.n_test_speakers = 1 + static_cast<int>(rng.uniform_index(3));
    cfg.n_dev_speakers = 1 + static_cast<int>(rng.uniform_index(2));
    cfg.segments_per_speaker = 30 + static_cast<int>(rng.uniform_index(20));
    cfg.dim = 4;
    cfg.seed = seed;
    Corpus c = generate_synthetic(cfg);
    PartitionSet parts = make_partitions(c, cfg.n_test_speakers,
                                         cfg.n_dev_speakers, 150.0, seed * 7);
    CHECK_NOTHROW(parts.validate(c));
    // Summed per-speaker bound on total test-A duration.
    double ta = 0.0, max_seg = 0.0;
    for (const auto& id : parts.test_a) {
      ta += c.by_id(id).duration_s;
      max_seg = std::max(max_seg, c.by_id(id).duration_s);
    }
    const double target = 150.0 * cfg.n_test_speakers;
    CHECK(std::abs(ta - target) <= cfg.n_test_speakers * cfg.max_duration_s);
  }
}

TEST_CASE("partition CSV round trip") {
  const fs::path dir = test_dir("parts_csv");
  SynthConfig cfg;
  cfg.n_train_speakers = 4;
  cfg.n_test_speakers = 2;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 40;
  cfg.dim = 4;
  cfg.seed = 2;
  Corpus c = generate_synthetic(cfg);
  PartitionSet parts = make_partitions(c, 2, 1, 150.0, 3);
  parts.save_csv(dir / "p.csv");
  PartitionSet back = PartitionSet::load_csv(dir / "p.csv");
  CHECK(back.train == parts.train);
  CHECK(back.dev == parts.dev);
  CHECK(back.test_a == parts.test_a);
  CHECK(back.test_b == parts.test_b);
}

TEST_CASE("normalization: centering, clipping and degenerate variance") {
  std::vector<Segment> segs;
  segs.push_back(make_segment("s1", "a", 1.0, {1.0, 7.0, 5.0}));
  segs.push_back(make_segment("s2", "a", 1.0, {2.0, 7.0, 5.0}));
  segs.push_back(make_segment("s3", "b", 1.0, {3.0, 7.0, 5.0 + 1e-15}));
  Corpus c(segs, 3);
  NormStats stats = compute_norm_stats(c, {"s1", "s2", "s3"});

  CHECK(stats.mean[0] == doctest::Approx(2.0));
  CHECK(stats.stddev[0] == doctest::Approx(0.81649658092772603));
  // Constant dimension: floored std, recorded.
  CHECK(stats.stddev[1] == NormStats::kStdFloor);
  REQUIRE(!stats.floored_dims.empty());
  CHECK(stats.floored_dims[0] == 1);

  Corpus normed = apply_normalization(c, stats);
  CHECK(normed.by_id("s2").features[0] == doctest::Approx(0.0));
  CHECK(normed.by_id("s1").features[1] == doctest::Approx(0.0));

  // Train-set mean 0 / std 1 per non-degenerate dimension (before clipping).
  double mean = 0.0, var = 0.0;
  for (const Segment& s : normed.segments()) mean += s.features[0];
  mean /= 3.0;
  for (const Segment& s : normed.segments())
    var += (s.features[0] - mean) * (s.features[0] - mean);
  var /= 3.0;
  CHECK(mean == doctest::Approx(0.0));
  CHECK(var == doctest::Approx(1.0));
}

TEST_CASE("normalization clips at +/- clip_sigma") {
  std::vector<Segment> segs;
  // Values chosen so one point sits 5.7 sigmas out after normalization.
  segs.push_back(make_segment("s1", "a", 1.0, {0.0}));
  segs.push_back(make_segment("s2", "a", 1.0, {1.0}));
  segs.push_back(make_segment("s3", "b", 1.0, {2.0}));
  Corpus c(segs, 1);
  NormStats stats = compute_norm_stats(c, {"s1", "s2", "s3"});
  std::vector<Segment> far;
  far.push_back(make_segment("far", "z", 1.0,
                             {stats.mean[0] + 5.7 * stats.stddev[0]}));
  Corpus outlier(far, 1);
  Corpus normed = apply_normalization(outlier, stats);
  CHECK(normed.by_id("far").features[0] == doctest::Approx(3.0));
}

TEST_CASE("normalization idempotence on unclipped data") {
  SynthConfig cfg;
  cfg.n_train_speakers = 4;
  cfg.n_test_speakers = 1;
  cfg.n_dev_speakers = 1;
  cfg.segments_per_speaker = 10;
  cfg.dim = 8;
  cfg.seed = 21;
  Corpus c = generate_synthetic(cfg);
  std::vector<std::string> all_ids;
  for (const Segment& s : c.segments()) all_ids.push_back(s.id);

  NormStats s1 = compute_norm_stats(c, all_ids, /*clip_sigma=*/1e18);
  Corpus c1 = apply_normalization(c, s1);
  NormStats s2 = compute_norm_stats(c1, all_ids, /*clip_sigma=*/1e18);
  Corpus c2 = apply_normalization(c1, s2);
  double max_delta = 0.0;
  for (std::size_t i = 0; i < c1.size(); ++i)
    max_delta = std::max(max_delta, (c1.segments()[i].features -
                                     c2.segments()[i].features)
                                        .cwiseAbs()
                                        .maxCoeff());
  CHECK(max_delta < 1e-10);
}

TEST_CASE("planted speaker-dependent valence: per-speaker probe beats a "
          "capacity-matched global probe iff coupling=1") {
  auto wins_over_seeds = [](double coupling) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SynthConfig cfg;
      cfg.n_train_speakers = 8;
      cfg.n_test_speakers = 2;
      cfg.n_dev_speakers = 2;
      cfg.segments_per_speaker = 40;
      cfg.dim = 24;
      cfg.style_clusters = 4;
      cfg.speaker_valence_coupling = coupling;
      // Probe the valence mechanism in isolation: no speaker mean offsets.
      cfg.offset_scale = 0.0;
      cfg.seed = derive_seed(seed, "probe");
      Corpus c = generate_synthetic(cfg);

      const auto speakers = c.speaker_ids();
      // Assemble per-speaker fit/eval halves.
      double per_speaker_mse = 0.0, global_mse = 0.0;
      // Pool of fit rows for the capacity-matched global sample.
      std::vector<std::pair<Eigen::VectorXd, double>> pool;
      struct Half {
        Eigen::MatrixXd fit_x, eval_x;
        Eigen::VectorXd fit_y, eval_y;
      };
      std::vector<Half> halves;
      for (const auto& sp : speakers) {
        const auto& idx = c.segments_of_speaker(sp);
        const std::size_t n_fit = idx.size() / 2;
        Half h;
        h.fit_x.resize(n_fit, c.dim());
        h.fit_y.resize(n_fit);
        h.eval_x.resize(idx.size() - n_fit, c.dim());
        h.eval_y.resize(idx.size() - n_fit);
        for (std::size_t k = 0; k < idx.size(); ++k) {
          const Segment& s = c.segments()[idx[k]];
          if (k < n_fit) {
            h.fit_x.row(k) = s.features.transpose();
            h.fit_y[k] = s.label(Attribute::valence);
            pool.push_back({s.features, h.fit_y[k]});
          } else {
            h.eval_x.row(k - n_fit) = s.features.transpose();
            h.eval_y[k - n_fit] = s.label(Attribute::valence);
          }
        }
        halves.push_back(std::move(h));
      }
      const double reg = 1.0;
      // Capacity-matched global probe: same fit-set size as one speaker.
      Rng rng(derive_seed(seed, "probe-sample", static_cast<int>(coupling * 100)));
      std::vector<std::size_t> order(pool.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      const std::size_t n_match = halves.front().fit_x.rows();
      Eigen::MatrixXd gx(n_match, c.dim());
      Eigen::VectorXd gy(n_match);
      for (std::size_t i = 0; i < n_match; ++i) {
        gx.row(i) = pool[order[i]].first.transpose();
        gy[i] = pool[order[i]].second;
      }
      RidgeProbe global = RidgeProbe::fit(gx, gy, reg);
      for (const Half& h : halves) {
        RidgeProbe local = RidgeProbe::fit(h.fit_x, h.fit_y, reg);
        per_speaker_mse += local.mse(h.eval_x, h.eval_y);
        global_mse += global.mse(h.eval_x, h.eval_y);
      }
      if (per_speaker_mse < global_mse) ++wins;
    }
    return wins;
  };

  const int wins_coupled = wins_over_seeds(1.0);
  const int wins_uncoupled = wins_over_seeds(0.0);
  // Sign test at n=10: >= 9 wins rejects "no difference"; [2, 8] does not.
  CHECK(wins_coupled >= 9);
  CHECK(wins_uncoupled >= 2);
  CHECK(wins_uncoupled <= 8);
}

TEST_CASE("norm stats JSON round trip") {
  const fs::path dir = test_dir("norm_json");
  NormStats s;
  s.mean = Eigen::Vector3d(1.0, -2.5, 3.25);
  s.stddev = Eigen::Vector3d(0.5, 1.0, 2.0);
  s.clip_sigma = 3.0;
  s.save_json(dir / "stats.json");
  NormStats back = NormStats::load_json(dir / "stats.json");
  CHECK((back.mean - s.mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.stddev - s.stddev).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.clip_sigma == 3.0);
}
