#include "valadapt/similarity.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "valadapt/rng.hpp"

namespace valadapt {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

// Fixes the sign of each basis row so the entry of largest magnitude is
// positive, making eigenvector output reproducible.
void canonicalize_rows(Eigen::MatrixXd& basis) {
  for (long r = 0; r < basis.rows(); ++r) {
    long imax = 0;
    basis.row(r).cwiseAbs().maxCoeff(&imax);
    if (basis(r, imax) < 0.0) basis.row(r) = -basis.row(r);
  }
}

// Completes `basis` (first `have` orthonormal rows) to k rows using
// Gram-Schmidt over the canonical directions.
void pad_basis(Eigen::MatrixXd& basis, long have) {
  const long k = basis.rows();
  const long d = basis.cols();
  long next_axis = 0;
  for (long r = have; r < k; ++r) {
    Eigen::VectorXd v;
    double norm = 0.0;
    while (next_axis < d) {
      v = Eigen::VectorXd::Unit(d, next_axis++);
      for (long j = 0; j < r; ++j) v -= v.dot(basis.row(j)) * basis.row(j).transpose();
      norm = v.norm();
      if (norm > 1e-6) break;
    }
    if (norm <= 1e-6)
      throw NumericalError("fit_pca: cannot complete an orthonormal basis");
    basis.row(r) = (v / norm).transpose();
  }
}

}  // namespace

// --- PCA ----------------------------------------------------------------------

Eigen::VectorXd PcaProjection::project(const Eigen::VectorXd& x) const {
  if (x.size() != basis.cols())
    throw ValidationError("PcaProjection::project: dimension mismatch");
  return basis * (x - mean);
}

Eigen::MatrixXd PcaProjection::project_rows(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != basis.cols())
    throw ValidationError("PcaProjection::project_rows: dimension mismatch");
  return (rows.rowwise() - mean.transpose()) * basis.transpose();
}

void PcaProjection::validate() const {
  const Eigen::MatrixXd gram = basis * basis.transpose();
  const double err =
      (gram - Eigen::MatrixXd::Identity(k(), k())).cwiseAbs().maxCoeff();
  if (err > 1e-8)
    throw NumericalError("PcaProjection: basis not orthonormal");
  for (int i = 0; i + 1 < k(); ++i)
    if (explained_variance[i] + 1e-12 < explained_variance[i + 1])
      throw NumericalError("PcaProjection: eigenvalues not sorted");
  if (k() > 0 && explained_variance[k() - 1] < -1e-12)
    throw NumericalError("PcaProjection: negative eigenvalue");
}

PcaProjection fit_pca(const Eigen::MatrixXd& rows, int k) {
  const long m = rows.rows();
  const long d = rows.cols();
  if (m < 2) throw ValidationError("fit_pca: need at least 2 segments");
  if (k < 1 || k > std::min<long>(d, m - 1))
    throw ValidationError("fit_pca: k=" + std::to_string(k) +
                          " exceeds min(D, M-1)=" +
                          std::to_string(std::min<long>(d, m - 1)));

  PcaProjection p;
  p.mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - p.mean.transpose();

  p.basis.resize(k, d);
  p.explained_variance.resize(k);
  long rank = 0;
  if (m < d) {
    // Gram-matrix route: centered * centered^T shares the nonzero spectrum of
    // the D x D covariance scatter.
    const Eigen::MatrixXd gram = centered * centered.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const Eigen::VectorXd& evals = eig.eigenvalues();  // ascending
    const double tol = std::max(evals[m - 1], 0.0) * 1e-12 + 1e-300;
    for (long i = 0; i < k; ++i) {
      const long src = m - 1 - i;  // descending
      const double lam = evals[src];
      if (lam <= tol) break;
      p.basis.row(i) =
          (centered.transpose() * eig.eigenvectors().col(src) / std::sqrt(lam))
              .transpose();
      p.explained_variance[i] = lam / static_cast<double>(m - 1);
      ++rank;
    }
  } else {
    const Eigen::MatrixXd cov =
        centered.transpose() * centered / static_cast<double>(m - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd& evals = eig.eigenvalues();
    const double tol = std::max(evals[d - 1], 0.0) * 1e-12 + 1e-300;
    for (long i = 0; i < k; ++i) {
      const long src = d - 1 - i;
      const double lam = evals[src];
      if (lam <= tol) break;
      p.basis.row(i) = eig.eigenvectors().col(src).transpose();
      p.explained_variance[i] = lam;
      ++rank;
    }
  }

  if (rank < k) {
    std::cerr << "[valadapt] warning: fit_pca rank " << rank << " < k " << k
              << ", padding basis with zero-variance directions\n";
    pad_basis(p.basis, rank);
    for (long i = rank; i < k; ++i) p.explained_variance[i] = 0.0;
  }
  canonicalize_rows(p.basis);
  p.validate();
  return p;
}

// --- GMM ----------------------------------------------------------------------

void GmmModel::validate() const {
  if (weights.minCoeff() < 0.0)
    throw NumericalError("GmmModel: negative weight");
  if (std::abs(weights.sum() - 1.0) > 1e-9)
    throw NumericalError("GmmModel: weights do not sum to 1");
  if (covariances.minCoeff() < kCovFloor - 1e-15)
    throw NumericalError("GmmModel: covariance below floor");
  if (means.rows() != weights.size() || covariances.rows() != weights.size())
    throw NumericalError("GmmModel: inconsistent shapes");
}

double GmmModel::log_density(const Eigen::VectorXd& x) const {
  if (x.size() != dim())
    throw ValidationError("GmmModel::log_density: dimension mismatch");
  const int m = mixtures();
  double max_term = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd terms(m);
  for (int c = 0; c < m; ++c) {
    double quad = 0.0, logdet = 0.0;
    for (int i = 0; i < dim(); ++i) {
      const double diff = x[i] - means(c, i);
      quad += diff * diff / covariances(c, i);
      logdet += std::log(covariances(c, i));
    }
    terms[c] = std::log(weights[c]) - 0.5 * (dim() * kLog2Pi + logdet + quad);
    max_term = std::max(max_term, terms[c]);
  }
  if (!std::isfinite(max_term)) return max_term;
  double acc = 0.0;
  for (int c = 0; c < m; ++c) acc += std::exp(terms[c] - max_term);
  return max_term + std::log(acc);
}

double gmm_log_density(const GmmModel& g, const Eigen::VectorXd& x) {
  return g.log_density(x);
}

Eigen::VectorXd GmmModel::sample(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  int comp = mixtures() - 1;
  for (int c = 0; c < mixtures(); ++c) {
    acc += weights[c];
    if (u < acc) {
      comp = c;
      break;
    }
  }
  Eigen::VectorXd x(dim());
  for (int i = 0; i < dim(); ++i)
    x[i] = means(comp, i) + std::sqrt(covariances(comp, i)) * rng.normal();
  return x;
}

namespace {

// Seeded k-means++ center selection.
std::vector<long> kmeanspp_centers(const Eigen::MatrixXd& points, int m,
                                   Rng& rng) {
  const long n = points.rows();
  std::vector<long> centers;
  centers.push_back(static_cast<long>(rng.uniform_index(n)));
  Eigen::VectorXd d2 =
      (points.rowwise() - points.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < m) {
    const double total = d2.sum();
    long pick = -1;
    if (total <= 0.0) {
      pick = static_cast<long>(rng.uniform_index(n));
    } else {
      double u = rng.uniform() * total;
      for (long i = 0; i < n; ++i) {
        u -= d2[i];
        if (u <= 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    }
    centers.push_back(pick);
    d2 = d2.cwiseMin(
        (points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }
  return centers;
}

}  // namespace

GmmModel fit_gmm(const Eigen::MatrixXd& points, int m, std::uint64_t seed,
                 GmmFitInfo* info) {
  const long n = points.rows();
  const long k = points.cols();
  if (m < 1) throw ValidationError("fit_gmm: need at least one mixture");
  if (n < m)
    throw ValidationError("fit_gmm: " + std::to_string(n) +
                          " points for " + std::to_string(m) + " mixtures");

  Rng rng(derive_seed(seed, "gmm"));
  const Eigen::VectorXd global_mean = points.colwise().mean();
  Eigen::VectorXd global_var =
      (points.rowwise() - global_mean.transpose()).array().square().colwise().mean();
  global_var = global_var.cwiseMax(GmmModel::kCovFloor);

  // k-means++ seeding followed by a hard assignment for the initial moments.
  const std::vector<long> centers = kmeanspp_centers(points, m, rng);
  std::vector<int> assign(n, 0);
  for (long i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < m; ++c) {
      const double d2 = (points.row(i) - points.row(centers[c])).squaredNorm();
      if (d2 < best) {
        best = d2;
        assign[i] = c;
      }
    }
  }

  GmmModel g;
  g.weights.resize(m);
  g.means.resize(m, k);
  g.covariances.resize(m, k);
  for (int c = 0; c < m; ++c) {
    long count = 0;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(k);
    for (long i = 0; i < n; ++i)
      if (assign[i] == c) {
        mu += points.row(i).transpose();
        ++count;
      }
    if (count == 0) {
      g.means.row(c) = points.row(centers[c]);
      g.covariances.row(c) = global_var.transpose();
      g.weights[c] = 1.0 / static_cast<double>(n);
      continue;
    }
    mu /= static_cast<double>(count);
    Eigen::VectorXd var = Eigen::VectorXd::Zero(k);
    for (long i = 0; i < n; ++i)
      if (assign[i] == c)
        var += (points.row(i).transpose() - mu).array().square().matrix();
    var /= static_cast<double>(count);
    if (count < 2) var = global_var;
    g.means.row(c) = mu.transpose();
    g.covariances.row(c) = var.cwiseMax(GmmModel::kCovFloor).transpose();
    g.weights[c] = static_cast<double>(count) / static_cast<double>(n);
  }
  g.weights /= g.weights.sum();

  constexpr int kMaxIters = 200;
  constexpr double kTol = 1e-4;
  double prev_ll = -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd resp(n, m);
  for (int iter = 0; iter < kMaxIters; ++iter) {
    // E step with log-sum-exp.
    Eigen::VectorXd log_w = g.weights.array().log();
    Eigen::VectorXd comp_const(m);
    for (int c = 0; c < m; ++c) {
      double logdet = 0.0;
      for (long i = 0; i < k; ++i) logdet += std::log(g.covariances(c, i));
      comp_const[c] = log_w[c] - 0.5 * (k * kLog2Pi + logdet);
    }
    double ll = 0.0;
    for (long i = 0; i < n; ++i) {
      double max_term = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < m; ++c) {
        double quad = 0.0;
        for (long j = 0; j < k; ++j) {
          const double diff = points(i, j) - g.means(c, j);
          quad += diff * diff / g.covariances(c, j);
        }
        resp(i, c) = comp_const[c] - 0.5 * quad;
        max_term = std::max(max_term, resp(i, c));
      }
      double denom = 0.0;
      for (int c = 0; c < m; ++c) {
        resp(i, c) = std::exp(resp(i, c) - max_term);
        denom += resp(i, c);
      }
      resp.row(i) /= denom;
      ll += max_term + std::log(denom);
    }
    ll /= static_cast<double>(n);
    if (info) info->log_likelihood.push_back(ll);
    if (iter > 0 && ll - prev_ll < kTol) break;
    prev_ll = ll;

    // M step.
    for (int c = 0; c < m; ++c) {
      const double nc = resp.col(c).sum();
      if (nc < 1e-10) {
        // Re-seed a starved component from the point farthest from all means.
        long far = 0;
        double far_d = -1.0;
        for (long i = 0; i < n; ++i) {
          double dmin = std::numeric_limits<double>::infinity();
          for (int c2 = 0; c2 < m; ++c2)
            dmin = std::min(dmin,
                            (points.row(i) - g.means.row(c2)).squaredNorm());
          if (dmin > far_d) {
            far_d = dmin;
            far = i;
          }
        }
        g.means.row(c) = points.row(far);
        g.covariances.row(c) = global_var.transpose();
        g.weights[c] = 1.0 / static_cast<double>(n);
        if (info) ++info->reseeded_components;
        std::cerr << "[valadapt] warning: fit_gmm re-seeded an empty "
                     "component\n";
        continue;
      }
      const Eigen::VectorXd mu =
          (resp.col(c).transpose() * points).transpose() / nc;
      Eigen::VectorXd var = Eigen::VectorXd::Zero(k);
      for (long i = 0; i < n; ++i)
        var += resp(i, c) *
               (points.row(i).transpose() - mu).array().square().matrix();
      var /= nc;
      g.means.row(c) = mu.transpose();
      g.covariances.row(c) = var.cwiseMax(GmmModel::kCovFloor).transpose();
      g.weights[c] = nc / static_cast<double>(n);
    }
    g.weights /= g.weights.sum();
  }
  g.validate();
  return g;
}

// --- KLD ------------------------------------------------------------------------

KldEstimate kld_mc(const GmmModel& p, const GmmModel& q, int n_samples,
                   std::uint64_t seed) {
  if (p.dim() != q.dim())
    throw ValidationError("kld_mc: dimension mismatch between models");
  if (n_samples < 2) throw ValidationError("kld_mc: need at least 2 samples");
  Rng rng(derive_seed(seed, "kld"));
  double mean = 0.0, m2 = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const Eigen::VectorXd x = p.sample(rng);
    const double delta_ll = p.log_density(x) - q.log_density(x);
    const double d = delta_ll - mean;
    mean += d / static_cast<double>(s + 1);
    m2 += d * (delta_ll - mean);
  }
  KldEstimate e;
  e.value = mean;
  e.std_err = std::sqrt(m2 / static_cast<double>(n_samples - 1) /
                        static_cast<double>(n_samples));
  e.n_samples = n_samples;
  e.seed = seed;
  return e;
}

// --- Similarity matrix ------------------------------------------------------------

Eigen::MatrixXd speaker_feature_rows(const Corpus& corpus,
                                     const std::string& speaker_id,
                                     const std::vector<std::string>& allowed) {
  std::unordered_set<std::string> allow(allowed.begin(), allowed.end());
  std::vector<const Segment*> segs;
  for (std::size_t i : corpus.segments_of_speaker(speaker_id)) {
    const Segment& s = corpus.segments()[i];
    if (allow.count(s.id)) segs.push_back(&s);
  }
  Eigen::MatrixXd rows(segs.size(), corpus.dim());
  for (std::size_t i = 0; i < segs.size(); ++i)
    rows.row(static_cast<long>(i)) = segs[i]->features.transpose();
  return rows;
}

void SimilarityMatrix::set(const std::string& train_speaker,
                           const std::string& test_speaker,
                           const KldEstimate& e) {
  entries_[{train_speaker, test_speaker}] = e;
}

const KldEstimate& SimilarityMatrix::at(const std::string& train_speaker,
                                        const std::string& test_speaker) const {
  auto it = entries_.find({train_speaker, test_speaker});
  if (it == entries_.end())
    throw ValidationError("SimilarityMatrix: missing entry (" + train_speaker +
                          ", " + test_speaker + ")");
  return it->second;
}

bool SimilarityMatrix::complete_for(
    const std::string& test_speaker,
    const std::vector<std::string>& train_speakers) const {
  for (const std::string& tr : train_speakers)
    if (!entries_.count({tr, test_speaker})) return false;
  return true;
}

std::vector<std::string> SimilarityMatrix::train_speakers() const {
  std::set<std::string> s;
  for (const auto& [key, _] : entries_) s.insert(key.first);
  return {s.begin(), s.end()};
}

std::vector<std::string> SimilarityMatrix::test_speakers() const {
  std::set<std::string> s;
  for (const auto& [key, _] : entries_) s.insert(key.second);
  return {s.begin(), s.end()};
}

void SimilarityMatrix::save_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os << "train_speaker,test_speaker,kld,std_err,n_samples,seed\n";
  os.precision(17);
  for (const auto& [key, e] : entries_)
    os << key.first << ',' << key.second << ',' << e.value << ',' << e.std_err
       << ',' << e.n_samples << ',' << e.seed << '\n';
}

SimilarityMatrix SimilarityMatrix::load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) ||
      line != "train_speaker,test_speaker,kld,std_err,n_samples,seed")
    throw ValidationError(path.string() + ": bad similarity header");
  SimilarityMatrix m;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string tr, te, tok;
    KldEstimate e;
    try {
      std::getline(fields, tr, ',');
      std::getline(fields, te, ',');
      std::getline(fields, tok, ',');
      e.value = std::stod(tok);
      std::getline(fields, tok, ',');
      e.std_err = std::stod(tok);
      std::getline(fields, tok, ',');
      e.n_samples = std::stoi(tok);
      std::getline(fields, tok, ',');
      e.seed = std::stoull(tok);
    } catch (const std::exception&) {
      throw ValidationError(path.string() + " row " + std::to_string(row) +
                            ": malformed entry");
    }
    m.set(tr, te, e);
  }
  return m;
}

KldEstimate speaker_distance(const Corpus& corpus, const PartitionSet& parts,
                             const std::string& train_speaker,
                             const std::string& test_speaker,
                             const SimilarityConfig& cfg) {
  const Eigen::MatrixXd test_rows =
      speaker_feature_rows(corpus, test_speaker, parts.test_a);
  const Eigen::MatrixXd train_rows =
      speaker_feature_rows(corpus, train_speaker, parts.train);
  if (train_rows.rows() < cfg.gmm_mixtures)
    throw ValidationError("speaker_distance: train speaker " + train_speaker +
                          " has fewer segments than mixtures");

  const PcaProjection pca = fit_pca(test_rows, cfg.pca_k);
  const GmmModel q = fit_gmm(pca.project_rows(test_rows), cfg.gmm_mixtures,
                             derive_seed(cfg.seed, "gmm-test", test_speaker));
  const GmmModel p = fit_gmm(pca.project_rows(train_rows), cfg.gmm_mixtures,
                             derive_seed(cfg.seed, "gmm-train", train_speaker,
                                         test_speaker));
  return kld_mc(p, q, cfg.kld_samples,
                derive_seed(cfg.seed, "mc", train_speaker, test_speaker));
}

SimilarityMatrix compute_similarity_matrix(const Corpus& corpus,
                                           const PartitionSet& parts,
                                           const SimilarityConfig& cfg) {
  const auto test_speakers = parts.speakers_of(corpus, Split::test_a);
  const auto train_speakers = parts.speakers_of(corpus, Split::train);
  SimilarityMatrix matrix;
  for (const std::string& te : test_speakers) {
    // One PCA and one test GMM per test speaker, shared across pairs.
    const Eigen::MatrixXd test_rows =
        speaker_feature_rows(corpus, te, parts.test_a);
    const PcaProjection pca = fit_pca(test_rows, cfg.pca_k);
    const GmmModel q = fit_gmm(pca.project_rows(test_rows), cfg.gmm_mixtures,
                               derive_seed(cfg.seed, "gmm-test", te));
    for (const std::string& tr : train_speakers) {
      const Eigen::MatrixXd train_rows =
          speaker_feature_rows(corpus, tr, parts.train);
      if (train_rows.rows() < cfg.gmm_mixtures)
        throw ValidationError("compute_similarity_matrix: train speaker " +
                              tr + " has fewer segments than mixtures");
      const GmmModel p =
          fit_gmm(pca.project_rows(train_rows), cfg.gmm_mixtures,
                  derive_seed(cfg.seed, "gmm-train", tr, te));
      matrix.set(tr, te,
                 kld_mc(p, q, cfg.kld_samples,
                        derive_seed(cfg.seed, "mc", tr, te)));
    }
  }
  return matrix;
}

std::vector<std::string> rank_speakers(const SimilarityMatrix& matrix,
                                       const std::string& test_speaker,
                                       int n) {
  const auto train = matrix.train_speakers();
  if (n < 1 || n > static_cast<int>(train.size()))
    throw ValidationError("rank_speakers: N=" + std::to_string(n) +
                          " out of range for " + std::to_string(train.size()) +
                          " train speakers");
  std::vector<std::pair<double, std::string>> scored;
  scored.reserve(train.size());
  for (const std::string& tr : train)
    scored.push_back({matrix.at(tr, test_speaker).value, tr});
  std::sort(scored.begin(), scored.end());  // ties break lexicographically
  std::vector<std::string> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(scored[i].second);
  return out;
}

ClosestLists closest_lists(const SimilarityMatrix& matrix, int n) {
  ClosestLists lists;
  for (const std::string& te : matrix.test_speakers())
    lists.push_back({te, rank_speakers(matrix, te, n)});
  return lists;
}

}  // namespace valadapt
