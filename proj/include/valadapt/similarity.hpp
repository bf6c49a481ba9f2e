#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "valadapt/corpus.hpp"

namespace valadapt {

/// Speaker-dependent PCA transform: mean vector plus the top-k principal
/// directions of that speaker's sample covariance.
struct PcaProjection {
  Eigen::VectorXd mean;                // D
  Eigen::MatrixXd basis;               // k x D, orthonormal rows
  Eigen::VectorXd explained_variance;  // k, non-increasing

  int k() const { return static_cast<int>(basis.rows()); }
  int dim() const { return static_cast<int>(basis.cols()); }

  Eigen::VectorXd project(const Eigen::VectorXd& x) const;
  /// Projects each row of `rows` (one observation per row, M x D) to M x k.
  Eigen::MatrixXd project_rows(const Eigen::MatrixXd& rows) const;

  void validate() const;
};

/// Fits the top-k principal components of the sample covariance
/// Q = F F^T / (M - 1). For M < D the eigenproblem is solved on the M x M
/// Gram matrix, which has the same nonzero spectrum. If the data rank is
/// below k the basis is completed with orthonormal fill directions of zero
/// explained variance and a warning is emitted.
PcaProjection fit_pca(const Eigen::MatrixXd& rows, int k);

/// Diagonal-covariance Gaussian mixture over the reduced space.
struct GmmModel {
  Eigen::VectorXd weights;      // m, sums to 1
  Eigen::MatrixXd means;        // m x k
  Eigen::MatrixXd covariances;  // m x k (diagonal entries, >= kCovFloor)

  static constexpr double kCovFloor = 1e-6;

  int mixtures() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }

  double log_density(const Eigen::VectorXd& x) const;
  Eigen::VectorXd sample(class Rng& rng) const;
  void validate() const;
};

struct GmmFitInfo {
  std::vector<double> log_likelihood;  // mean per-point LL after each E step
  int reseeded_components = 0;
};

/// EM from seeded k-means++ initialization. Stops when the mean
/// log-likelihood improves by less than 1e-4 or after 200 iterations.
GmmModel fit_gmm(const Eigen::MatrixXd& points, int m, std::uint64_t seed,
                 GmmFitInfo* info = nullptr);

double gmm_log_density(const GmmModel& g, const Eigen::VectorXd& x);

struct KldEstimate {
  double value = 0.0;
  double std_err = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

/// Monte-Carlo estimate of KLD(p || q) by sampling from p. Negative values
/// (noise around zero) are reported as-is.
KldEstimate kld_mc(const GmmModel& p, const GmmModel& q, int n_samples,
                   std::uint64_t seed);

struct SimilarityConfig {
  int pca_k = 10;
  int gmm_mixtures = 10;
  int kld_samples = 50000;
  std::uint64_t seed = 0;
};

/// Train-speaker x test-speaker KLD matrix with the per-pair sampling
/// metadata needed to reproduce any entry.
class SimilarityMatrix {
 public:
  void set(const std::string& train_speaker, const std::string& test_speaker,
           const KldEstimate& e);
  const KldEstimate& at(const std::string& train_speaker,
                        const std::string& test_speaker) const;
  bool complete_for(const std::string& test_speaker,
                    const std::vector<std::string>& train_speakers) const;

  std::vector<std::string> train_speakers() const;
  std::vector<std::string> test_speakers() const;

  void save_csv(const std::filesystem::path& path) const;
  static SimilarityMatrix load_csv(const std::filesystem::path& path);

 private:
  std::map<std::pair<std::string, std::string>, KldEstimate> entries_;
};

/// d(i, j) for one (train speaker, test speaker) pair: project both speakers
/// into j's PCA space (fit on j's test-A segments), fit one GMM each, then
/// estimate KLD(train || test) by Monte Carlo.
KldEstimate speaker_distance(const Corpus& corpus, const PartitionSet& parts,
                             const std::string& train_speaker,
                             const std::string& test_speaker,
                             const SimilarityConfig& cfg);

SimilarityMatrix compute_similarity_matrix(const Corpus& corpus,
                                           const PartitionSet& parts,
                                           const SimilarityConfig& cfg);

/// The N closest train speakers to `test_speaker`, ascending by KLD with
/// lexicographic tie-break.
std::vector<std::string> rank_speakers(const SimilarityMatrix& matrix,
                                       const std::string& test_speaker,
                                       int n);

/// Ranked closest-speaker list per test speaker, in sorted test-speaker
/// order. This is the input of the adaptation planners.
using ClosestLists =
    std::vector<std::pair<std::string, std::vector<std::string>>>;

ClosestLists closest_lists(const SimilarityMatrix& matrix, int n);

/// Gathers one row per segment of a speaker restricted to `allowed` ids
/// (pass the relevant partition), in corpus order.
Eigen::MatrixXd speaker_feature_rows(const Corpus& corpus,
                                     const std::string& speaker_id,
                                     const std::vector<std::string>& allowed);

}  // namespace valadapt
