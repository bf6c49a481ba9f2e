#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "valadapt/adaptation.hpp"
#include "valadapt/corpus.hpp"

namespace valadapt {

struct ModelConfig {
  int input_dim = 0;
  int n_hidden = 4;   // hidden dense layers, each `width` wide
  int width = 512;
  int out_dim = 1;    // 1 head (single task) or 3 heads (multi task)
  bool batch_norm = true;

  void validate() const;
};

enum class Monitor : int { dev = 0, adaptation = 1, train = 2 };
const char* monitor_name(Monitor m);
Monitor monitor_from_name(const std::string& name);

struct TrainConfig {
  double dropout_p = 0.7;
  double learning_rate = 0.001;
  double adapt_learning_rate = 0.0001;
  double momentum = 0.9;
  int epochs_pretrain = 200;
  int epochs_adapt = 100;
  int batch_size = 128;
  Monitor monitor = Monitor::dev;
  int patience = 10;
  std::uint64_t seed = 0;
  double mtl_alpha = 1.0 / 3.0;
  double mtl_beta = 1.0 / 3.0;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> monitor_loss;
  int best_epoch = -1;           // index into the loss vectors
  double best_monitor_ccc = 0.0; // 1 - best monitor loss
};

/// Dense regression network: `n_hidden` ReLU layers (with batch norm and
/// inverted dropout during training) and a linear output layer.
class MlpRegressor {
 public:
  struct Dense {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;
  };
  struct BatchNorm {
    Eigen::VectorXd gamma, beta, running_mean, running_var;
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.9;
  };

  MlpRegressor() = default;
  MlpRegressor(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }

  /// Evaluation mode: no dropout, batch norm uses running statistics. Output
  /// row order matches the input row order and is batch-size independent.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& inputs) const;

  /// Hidden representation in evaluation mode (input of the output layer).
  Eigen::MatrixXd eval_features(const Eigen::MatrixXd& inputs) const;

  /// FNV-1a over the raw bytes of all tensors; changes iff any parameter or
  /// running statistic changes.
  std::uint64_t parameter_hash() const;
  /// Hash of everything except the output layer (the frozen part during
  /// fine-tuning).
  std::uint64_t frozen_parameter_hash() const;

  void save_checkpoint(const std::filesystem::path& path,
                       const TrainConfig& train_cfg,
                       const std::string& norm_stats_ref) const;
  static MlpRegressor load_checkpoint(const std::filesystem::path& path);

  // Trainer-facing state.
  std::vector<Dense> hidden;
  std::vector<BatchNorm> bn;  // one per hidden layer when batch_norm is on
  Dense output;

 private:
  ModelConfig cfg_;
};

/// A dataset ready for training: one row per sample. `weights` is empty for
/// uniform weighting.
struct TrainData {
  Eigen::MatrixXd inputs;   // n x input_dim
  Eigen::MatrixXd targets;  // n x out_dim
  Eigen::VectorXd weights;  // n or empty

  long size() const { return inputs.rows(); }
  bool has_weights() const { return weights.size() > 0; }
};

TrainData make_train_data(const Corpus& corpus,
                          const std::vector<std::string>& ids, Attribute attr,
                          const WeightMap* weight_map = nullptr);
TrainData make_train_data_mtl(const Corpus& corpus,
                              const std::vector<std::string>& ids,
                              const WeightMap* weight_map = nullptr);
/// Expands plan entries by multiplicity into the sample stream.
TrainData make_adaptation_data(const Corpus& corpus, const AdaptationPlan& plan,
                               Attribute attr);

// --- Concordance correlation -------------------------------------------------

/// CCC with population variances. Degenerate conventions: both sides
/// constant -> 1 if the means agree else 0; exactly one side constant -> 0.
double ccc(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Weighted CCC used for monitoring weighted training runs; reduces to ccc()
/// for uniform weights.
double ccc_weighted(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                    const Eigen::VectorXd& w);

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;  // d loss / d pred
};

/// Batch loss 1 - CCC and its analytic gradient with respect to the
/// predictions (every prediction enters the batch mean, variance and
/// covariance). The denominator carries a 1e-12 guard so constant
/// predictions stay finite.
LossGrad ccc_loss_and_grad(const Eigen::VectorXd& pred,
                           const Eigen::VectorXd& truth);

/// alpha * L_aro + beta * L_val + (1 - alpha - beta) * L_dom, columns in
/// (arousal, valence, dominance) order.
double mtl_loss(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& truths,
                double alpha, double beta);

// --- Training ------------------------------------------------------------------

/// Mini-batch SGD with momentum, dropout and batch-norm in training mode,
/// early stopping on the monitor set with best-weights restore. Sample
/// weights scale each sample's gradient contribution, renormalized by the
/// batch's total weight. Deterministic given cfg.seed.
TrainHistory train(MlpRegressor& model, const TrainData& data,
                   const TrainConfig& cfg, const TrainData& monitor_data);

/// Updates only the output layer; every other parameter (batch-norm running
/// statistics included) is bitwise unchanged. The frozen feature extractor
/// runs in evaluation mode. Runs at the adaptation learning rate for at most
/// cfg.epochs_adapt epochs with early stopping on the monitor set.
TrainHistory fine_tune_last_layer(MlpRegressor& model,
                                  const TrainData& adapt_data,
                                  const TrainConfig& cfg,
                                  const TrainData& monitor_data);

/// Single-head convenience wrapper over predict().
Eigen::VectorXd predict_scores(const MlpRegressor& model, const Corpus& corpus,
                               const std::vector<std::string>& ids);

// --- Gradient-check scaffolding -----------------------------------------------

/// Parameter gradients in the same shapes as the model tensors.
struct ParamGrads {
  std::vector<MlpRegressor::Dense> hidden;
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> bn;  // gamma, beta
  MlpRegressor::Dense output;
};

/// One training-mode forward (and optional backward) pass over a batch.
/// Dropout masks are drawn from `mask_seed`, so the same seed fixes the
/// masks across repeated calls; with `update_running_stats` false the model
/// is left untouched, which is what central finite differences need.
double train_mode_loss(MlpRegressor& model, const Eigen::MatrixXd& batch_x,
                       const Eigen::MatrixXd& batch_y,
                       const Eigen::VectorXd& sample_weights,
                       double dropout_p, std::uint64_t mask_seed,
                       double mtl_alpha, double mtl_beta,
                       ParamGrads* grads = nullptr,
                       bool update_running_stats = false);

/// Training-mode forward pass (dropout active, batch-norm on batch
/// statistics) without touching the running statistics.
Eigen::MatrixXd train_mode_predict(const MlpRegressor& model,
                                   const Eigen::MatrixXd& batch_x,
                                   double dropout_p, std::uint64_t mask_seed);

}  // namespace valadapt
