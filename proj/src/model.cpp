#include "valadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "valadapt/rng.hpp"

namespace valadapt {

namespace {

constexpr double kCccEps = 1e-12;

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
  if (!is) throw ValidationError("checkpoint: unexpected end of file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void write_tensor_f32(std::ostream& os, const double* data, long count) {
  for (long i = 0; i < count; ++i)
    write_le<float>(os, static_cast<float>(data[i]));
}

void read_tensor_f32(std::istream& is, double* data, long count) {
  for (long i = 0; i < count; ++i)
    data[i] = static_cast<double>(read_le<float>(is));
}

void hash_bytes(std::uint64_t& h, const void* data, std::size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

void hash_tensor(std::uint64_t& h, const Eigen::MatrixXd& m) {
  hash_bytes(h, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}
void hash_tensor(std::uint64_t& h, const Eigen::VectorXd& v) {
  hash_bytes(h, v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

std::vector<double> head_weights(int out_dim, double alpha, double beta) {
  if (out_dim == 1) return {1.0};
  if (out_dim == 3) return {alpha, beta, 1.0 - alpha - beta};
  throw ValidationError("model: out_dim must be 1 or 3");
}

}  // namespace

void ModelConfig::validate() const {
  if (input_dim <= 0) throw ValidationError("ModelConfig: input_dim must be > 0");
  if (n_hidden < 1) throw ValidationError("ModelConfig: n_hidden must be >= 1");
  if (width < 1) throw ValidationError("ModelConfig: width must be >= 1");
  if (out_dim != 1 && out_dim != 3)
    throw ValidationError("ModelConfig: out_dim must be 1 or 3");
}

const char* monitor_name(Monitor m) {
  switch (m) {
    case Monitor::dev: return "dev";
    case Monitor::adaptation: return "adaptation";
    case Monitor::train: return "train";
  }
  return "?";
}

Monitor monitor_from_name(const std::string& name) {
  for (Monitor m : {Monitor::dev, Monitor::adaptation, Monitor::train})
    if (name == monitor_name(m)) return m;
  throw ValidationError("unknown monitor: " + name);
}

void TrainConfig::validate() const {
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw ValidationError("TrainConfig: dropout must be in [0, 1)");
  if (learning_rate <= 0.0 || adapt_learning_rate < 0.0)
    throw ValidationError("TrainConfig: learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ValidationError("TrainConfig: momentum must be in [0, 1)");
  if (epochs_pretrain < 1 || epochs_adapt < 1)
    throw ValidationError("TrainConfig: epoch counts must be >= 1");
  if (batch_size < 2)
    throw ValidationError("TrainConfig: batch size must be >= 2");
  if (patience < 1) throw ValidationError("TrainConfig: patience must be >= 1");
  if (mtl_alpha < 0.0 || mtl_alpha > 1.0 || mtl_beta < 0.0 || mtl_beta > 1.0 ||
      mtl_alpha + mtl_beta > 1.0 + 1e-12)
    throw ValidationError("TrainConfig: mtl weights must satisfy "
                          "alpha, beta in [0,1], alpha+beta <= 1");
}

// --- Model ----------------------------------------------------------------------

MlpRegressor::MlpRegressor(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg.validate();
  Rng rng(derive_seed(init_seed, "init"));
  auto he_uniform = [&rng](Dense& layer, int fan_out, int fan_in) {
    layer.weight.resize(fan_out, fan_in);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (int i = 0; i < fan_out; ++i)
      for (int j = 0; j < fan_in; ++j)
        layer.weight(i, j) = rng.uniform(-limit, limit);
    layer.bias = Eigen::VectorXd::Zero(fan_out);
  };
  int in = cfg.input_dim;
  for (int l = 0; l < cfg.n_hidden; ++l) {
    Dense d;
    he_uniform(d, cfg.width, in);
    hidden.push_back(std::move(d));
    if (cfg.batch_norm) {
      BatchNorm b;
      b.gamma = Eigen::VectorXd::Ones(cfg.width);
      b.beta = Eigen::VectorXd::Zero(cfg.width);
      b.running_mean = Eigen::VectorXd::Zero(cfg.width);
      b.running_var = Eigen::VectorXd::Ones(cfg.width);
      bn.push_back(std::move(b));
    }
    in = cfg.width;
  }
  he_uniform(output, cfg.out_dim, cfg.width);
}

Eigen::MatrixXd MlpRegressor::eval_features(const Eigen::MatrixXd& inputs) const {
  if (inputs.cols() != cfg_.input_dim)
    throw ValidationError("predict: input dimension mismatch");
  Eigen::MatrixXd cur = inputs;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    Eigen::MatrixXd z =
        (cur * hidden[l].weight.transpose()).rowwise() +
        hidden[l].bias.transpose();
    if (cfg_.batch_norm) {
      const BatchNorm& b = bn[l];
      const Eigen::ArrayXd inv_std =
          (b.running_var.array() + BatchNorm::kEps).sqrt().inverse();
      z = (((z.rowwise() - b.running_mean.transpose()).array().rowwise() *
            inv_std.transpose()).rowwise() *
               b.gamma.array().transpose())
              .rowwise() +
          b.beta.array().transpose();
    }
    cur = z.cwiseMax(0.0);
  }
  return cur;
}

Eigen::MatrixXd MlpRegressor::predict(const Eigen::MatrixXd& inputs) const {
  return (eval_features(inputs) * output.weight.transpose()).rowwise() +
         output.bias.transpose();
}

std::uint64_t MlpRegressor::frozen_parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Dense& d : hidden) {
    hash_tensor(h, d.weight);
    hash_tensor(h, d.bias);
  }
  for (const BatchNorm& b : bn) {
    hash_tensor(h, b.gamma);
    hash_tensor(h, b.beta);
    hash_tensor(h, b.running_mean);
    hash_tensor(h, b.running_var);
  }
  return h;
}

std::uint64_t MlpRegressor::parameter_hash() const {
  std::uint64_t h = frozen_parameter_hash();
  hash_tensor(h, output.weight);
  hash_tensor(h, output.bias);
  return h;
}

// --- Data assembly ---------------------------------------------------------------

TrainData make_train_data(const Corpus& corpus,
                          const std::vector<std::string>& ids, Attribute attr,
                          const WeightMap* weight_map) {
  TrainData d;
  d.inputs.resize(static_cast<long>(ids.size()), corpus.dim());
  d.targets.resize(static_cast<long>(ids.size()), 1);
  if (weight_map) d.weights.resize(static_cast<long>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Segment& s = corpus.by_id(ids[i]);
    d.inputs.row(static_cast<long>(i)) = s.features.transpose();
    d.targets(static_cast<long>(i), 0) = s.label(attr);
    if (weight_map)
      d.weights[static_cast<long>(i)] =
          weight_map->contains(ids[i]) ? weight_map->lambda : 1.0;
  }
  return d;
}

TrainData make_train_data_mtl(const Corpus& corpus,
                              const std::vector<std::string>& ids,
                              const WeightMap* weight_map) {
  TrainData d;
  d.inputs.resize(static_cast<long>(ids.size()), corpus.dim());
  d.targets.resize(static_cast<long>(ids.size()), 3);
  if (weight_map) d.weights.resize(static_cast<long>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Segment& s = corpus.by_id(ids[i]);
    d.inputs.row(static_cast<long>(i)) = s.features.transpose();
    for (int a = 0; a < 3; ++a) d.targets(static_cast<long>(i), a) = s.labels[a];
    if (weight_map)
      d.weights[static_cast<long>(i)] =
          weight_map->contains(ids[i]) ? weight_map->lambda : 1.0;
  }
  return d;
}

TrainData make_adaptation_data(const Corpus& corpus, const AdaptationPlan& plan,
                               Attribute attr) {
  if (plan.empty())
    throw ValidationError("make_adaptation_data: plan has no entries");
  std::vector<std::string> stream;
  for (const PlanEntry& e : plan.entries)
    for (int r = 0; r < e.multiplicity; ++r) stream.push_back(e.segment_id);
  return make_train_data(corpus, stream, attr);
}

// --- CCC --------------------------------------------------------------------------

double ccc_weighted(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                    const Eigen::VectorXd& w) {
  if (x.size() != y.size() || x.size() != w.size())
    throw ValidationError("ccc: length mismatch");
  if (x.size() < 2) throw ValidationError("ccc: need at least 2 values");
  const double sw = w.sum();
  const double mu_x = w.dot(x) / sw;
  const double mu_y = w.dot(y) / sw;
  const Eigen::ArrayXd cx = x.array() - mu_x;
  const Eigen::ArrayXd cy = y.array() - mu_y;
  const double var_x = (w.array() * cx.square()).sum() / sw;
  const double var_y = (w.array() * cy.square()).sum() / sw;
  const double cov = (w.array() * cx * cy).sum() / sw;
  if (var_x == 0.0 && var_y == 0.0) return mu_x == mu_y ? 1.0 : 0.0;
  if (var_x == 0.0 || var_y == 0.0) return 0.0;
  const double dmu = mu_x - mu_y;
  return 2.0 * cov / (var_x + var_y + dmu * dmu);
}

double ccc(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return ccc_weighted(x, y, Eigen::VectorXd::Ones(x.size()));
}

LossGrad ccc_loss_and_grad(const Eigen::VectorXd& pred,
                           const Eigen::VectorXd& truth) {
  if (pred.size() != truth.size())
    throw ValidationError("ccc_loss_and_grad: length mismatch");
  const long n = pred.size();
  if (n < 2) throw ValidationError("ccc_loss_and_grad: need at least 2 values");
  const double inv_n = 1.0 / static_cast<double>(n);
  const double mu_x = truth.mean();
  const double mu_y = pred.mean();
  const Eigen::ArrayXd cx = truth.array() - mu_x;
  const Eigen::ArrayXd cy = pred.array() - mu_y;
  const double var_y = cy.square().sum() * inv_n;
  const double var_x = cx.square().sum() * inv_n;
  const double cov = (cx * cy).sum() * inv_n;
  const double dmu = mu_x - mu_y;
  const double denom = var_x + var_y + dmu * dmu + kCccEps;

  LossGrad out;
  out.loss = 1.0 - 2.0 * cov / denom;
  // d cov / d y_b = cx_b / n ; d var_y / d y_b = 2 cy_b / n ;
  // d (dmu^2) / d y_b = -2 dmu / n.
  out.grad = (-(2.0 * cx * inv_n * denom -
                2.0 * cov * (2.0 * cy * inv_n - 2.0 * dmu * inv_n)) /
              (denom * denom))
                 .matrix();
  return out;
}

double mtl_loss(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& truths,
                double alpha, double beta) {
  if (alpha < 0.0 || alpha > 1.0 || beta < 0.0 || beta > 1.0 ||
      alpha + beta > 1.0 + 1e-12)
    throw ValidationError("mtl_loss: invalid weights");
  if (preds.rows() != truths.rows() || preds.cols() != 3 || truths.cols() != 3)
    throw ValidationError("mtl_loss: expected 3-column matrices");
  const std::vector<double> hw = {alpha, beta, 1.0 - alpha - beta};
  double total = 0.0;
  for (int c = 0; c < 3; ++c)
    total += hw[c] * (1.0 - ccc(truths.col(c), preds.col(c)));
  return total;
}

// --- Training-mode forward/backward ------------------------------------------------

namespace {

struct LayerCache {
  Eigen::MatrixXd input;       // dense input
  Eigen::MatrixXd z;           // dense output
  Eigen::VectorXd batch_mean, inv_std;
  Eigen::MatrixXd xhat;        // normalized activations
  Eigen::MatrixXd act_in;      // relu input (bn output or z)
  Eigen::MatrixXd mask;        // dropout mask, scaled; empty when p = 0
  Eigen::MatrixXd out;         // layer output
};

// Shared training-mode forward. `model` is only mutated when
// update_running_stats is set (batch-norm running moments).
Eigen::MatrixXd forward_train(MlpRegressor& model,
                              const Eigen::MatrixXd& batch_x, double dropout_p,
                              std::uint64_t mask_seed,
                              std::vector<LayerCache>& caches,
                              bool update_running_stats) {
  const ModelConfig& cfg = model.config();
  Rng mask_rng(derive_seed(mask_seed, "dropout"));
  const double keep = 1.0 - dropout_p;

  caches.assign(model.hidden.size(), LayerCache{});
  Eigen::MatrixXd cur = batch_x;
  for (std::size_t l = 0; l < model.hidden.size(); ++l) {
    LayerCache& c = caches[l];
    c.input = cur;
    c.z = (cur * model.hidden[l].weight.transpose()).rowwise() +
          model.hidden[l].bias.transpose();
    if (cfg.batch_norm) {
      MlpRegressor::BatchNorm& b = model.bn[l];
      c.batch_mean = c.z.colwise().mean();
      Eigen::MatrixXd centered = c.z.rowwise() - c.batch_mean.transpose();
      Eigen::VectorXd var = centered.array().square().colwise().mean();
      c.inv_std =
          (var.array() + MlpRegressor::BatchNorm::kEps).sqrt().inverse();
      c.xhat = centered.array().rowwise() * c.inv_std.array().transpose();
      c.act_in = (c.xhat.array().rowwise() * b.gamma.array().transpose())
                     .rowwise() +
                 b.beta.array().transpose();
      if (update_running_stats) {
        b.running_mean = MlpRegressor::BatchNorm::kMomentum * b.running_mean +
                         (1.0 - MlpRegressor::BatchNorm::kMomentum) *
                             c.batch_mean;
        b.running_var = MlpRegressor::BatchNorm::kMomentum * b.running_var +
                        (1.0 - MlpRegressor::BatchNorm::kMomentum) * var;
      }
    } else {
      c.act_in = c.z;
    }
    Eigen::MatrixXd relu = c.act_in.cwiseMax(0.0);
    if (dropout_p > 0.0) {
      c.mask.resize(relu.rows(), relu.cols());
      for (long i = 0; i < c.mask.rows(); ++i)
        for (long j = 0; j < c.mask.cols(); ++j)
          c.mask(i, j) = mask_rng.uniform() < keep ? 1.0 / keep : 0.0;
      c.out = relu.cwiseProduct(c.mask);
    } else {
      c.out = std::move(relu);
    }
    cur = c.out;
  }
  return (cur * model.output.weight.transpose()).rowwise() +
         model.output.bias.transpose();
}

}  // namespace

Eigen::MatrixXd train_mode_predict(const MlpRegressor& model,
                                   const Eigen::MatrixXd& batch_x,
                                   double dropout_p, std::uint64_t mask_seed) {
  std::vector<LayerCache> caches;
  MlpRegressor& mutable_model = const_cast<MlpRegressor&>(model);
  return forward_train(mutable_model, batch_x, dropout_p, mask_seed, caches,
                       /*update_running_stats=*/false);
}

double train_mode_loss(MlpRegressor& model, const Eigen::MatrixXd& batch_x,
                       const Eigen::MatrixXd& batch_y,
                       const Eigen::VectorXd& sample_weights, double dropout_p,
                       std::uint64_t mask_seed, double mtl_alpha,
                       double mtl_beta, ParamGrads* grads,
                       bool update_running_stats) {
  const ModelConfig& cfg = model.config();
  const long batch = batch_x.rows();
  if (batch < 2) throw ValidationError("train_mode_loss: batch must be >= 2");
  if (batch_x.cols() != cfg.input_dim || batch_y.cols() != cfg.out_dim)
    throw ValidationError("train_mode_loss: dimension mismatch");
  if (sample_weights.size() != batch)
    throw ValidationError("train_mode_loss: weight vector mismatch");

  const std::vector<double> hw = head_weights(cfg.out_dim, mtl_alpha, mtl_beta);
  std::vector<LayerCache> caches;
  Eigen::MatrixXd pred = forward_train(model, batch_x, dropout_p, mask_seed,
                                       caches, update_running_stats);
  const Eigen::MatrixXd& cur =
      caches.empty() ? batch_x : caches.back().out;

  double loss = 0.0;
  Eigen::MatrixXd dpred(batch, cfg.out_dim);
  for (int h = 0; h < cfg.out_dim; ++h) {
    LossGrad lg = ccc_loss_and_grad(pred.col(h), batch_y.col(h));
    loss += hw[h] * lg.loss;
    dpred.col(h) = hw[h] * lg.grad;
  }
  if (!grads) return loss;

  // Per-sample gradient weighting, renormalized by the batch's total weight.
  const double wsum = sample_weights.sum();
  const double scale = static_cast<double>(batch) / wsum;
  for (long i = 0; i < batch; ++i)
    dpred.row(i) *= sample_weights[i] * scale;

  grads->hidden.resize(model.hidden.size());
  grads->bn.resize(model.bn.size());
  grads->output.weight = dpred.transpose() * cur;
  grads->output.bias = dpred.colwise().sum();
  Eigen::MatrixXd dcur = dpred * model.output.weight;
  for (long l = static_cast<long>(model.hidden.size()) - 1; l >= 0; --l) {
    LayerCache& c = caches[l];
    if (dropout_p > 0.0) dcur = dcur.cwiseProduct(c.mask);
    dcur = (c.act_in.array() > 0.0).select(dcur, 0.0);
    Eigen::MatrixXd dz;
    if (cfg.batch_norm) {
      const MlpRegressor::BatchNorm& b = model.bn[l];
      grads->bn[l].first = (dcur.array() * c.xhat.array()).colwise().sum();
      grads->bn[l].second = dcur.colwise().sum();
      Eigen::MatrixXd dxhat =
          dcur.array().rowwise() * b.gamma.array().transpose();
      const Eigen::RowVectorXd mean_dxhat = dxhat.colwise().mean();
      const Eigen::RowVectorXd mean_dxhat_xhat =
          (dxhat.array() * c.xhat.array()).colwise().mean();
      dz = ((dxhat.rowwise() - mean_dxhat).array() -
            c.xhat.array().rowwise() * mean_dxhat_xhat.array())
               .rowwise() *
           c.inv_std.array().transpose();
    } else {
      dz = std::move(dcur);
    }
    grads->hidden[l].weight = dz.transpose() * c.input;
    grads->hidden[l].bias = dz.colwise().sum();
    if (l > 0) dcur = dz * model.hidden[l].weight;
  }
  return loss;
}

// --- Trainer ------------------------------------------------------------------------

namespace {

struct Velocities {
  std::vector<MlpRegressor::Dense> hidden;
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> bn;
  MlpRegressor::Dense output;

  static Velocities zeros_like(const MlpRegressor& m) {
    Velocities v;
    for (const auto& d : m.hidden)
      v.hidden.push_back({Eigen::MatrixXd::Zero(d.weight.rows(),
                                                d.weight.cols()),
                          Eigen::VectorXd::Zero(d.bias.size())});
    for (const auto& b : m.bn)
      v.bn.push_back({Eigen::VectorXd::Zero(b.gamma.size()),
                      Eigen::VectorXd::Zero(b.beta.size())});
    v.output = {Eigen::MatrixXd::Zero(m.output.weight.rows(),
                                      m.output.weight.cols()),
                Eigen::VectorXd::Zero(m.output.bias.size())};
    return v;
  }
};

void momentum_step(Eigen::MatrixXd& velocity, Eigen::MatrixXd& param,
                   const Eigen::MatrixXd& grad, double momentum, double lr) {
  velocity = momentum * velocity + grad;
  param -= lr * velocity;
}

void momentum_step(Eigen::VectorXd& velocity, Eigen::VectorXd& param,
                   const Eigen::VectorXd& grad, double momentum, double lr) {
  velocity = momentum * velocity + grad;
  param -= lr * velocity;
}

// Consecutive index chunks of `batch_size` over a shuffled order; a trailing
// single sample joins the previous batch since the batch CCC needs >= 2.
std::vector<std::vector<long>> make_batches(std::vector<long> order,
                                            int batch_size) {
  std::vector<std::vector<long>> batches;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(end));
  }
  if (batches.size() > 1 && batches.back().size() < 2) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  if (!batches.empty() && batches.back().size() < 2)
    throw ValidationError("train: need at least 2 samples");
  return batches;
}

void gather_batch(const TrainData& d, const std::vector<long>& idx,
                  Eigen::MatrixXd& x, Eigen::MatrixXd& y, Eigen::VectorXd& w) {
  const long n = static_cast<long>(idx.size());
  x.resize(n, d.inputs.cols());
  y.resize(n, d.targets.cols());
  w.resize(n);
  for (long i = 0; i < n; ++i) {
    x.row(i) = d.inputs.row(idx[i]);
    y.row(i) = d.targets.row(idx[i]);
    w[i] = d.has_weights() ? d.weights[idx[i]] : 1.0;
  }
}

double monitor_loss_eval(const MlpRegressor& model, const TrainData& monitor,
                         const TrainConfig& cfg) {
  const Eigen::MatrixXd pred = model.predict(monitor.inputs);
  const std::vector<double> hw =
      head_weights(model.config().out_dim, cfg.mtl_alpha, cfg.mtl_beta);
  const Eigen::VectorXd w = monitor.has_weights()
                                ? monitor.weights
                                : Eigen::VectorXd::Ones(monitor.size());
  double loss = 0.0;
  for (int h = 0; h < model.config().out_dim; ++h)
    loss += hw[h] * (1.0 - ccc_weighted(monitor.targets.col(h), pred.col(h), w));
  return loss;
}

TrainHistory run_sgd(MlpRegressor& model, const TrainData& data,
                     const TrainConfig& cfg, const TrainData& monitor,
                     int max_epochs, double lr) {
  cfg.validate();
  if (data.size() < 2) throw ValidationError("train: need at least 2 samples");
  if (monitor.size() < 2)
    throw ValidationError("train: monitor set must have at least 2 samples");

  Velocities vel = Velocities::zeros_like(model);
  TrainHistory history;
  MlpRegressor best = model;
  double best_loss = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  std::vector<long> order(data.size());
  for (long i = 0; i < data.size(); ++i) order[i] = i;

  Eigen::MatrixXd bx, by;
  Eigen::VectorXd bw;
  ParamGrads grads;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);
    const auto batches = make_batches(order, cfg.batch_size);

    double loss_acc = 0.0, weight_acc = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      gather_batch(data, batches[b], bx, by, bw);
      const double loss = train_mode_loss(
          model, bx, by, bw, cfg.dropout_p,
          derive_seed(cfg.seed, "mask", epoch, b), cfg.mtl_alpha, cfg.mtl_beta,
          &grads, /*update_running_stats=*/true);
      if (!std::isfinite(loss))
        throw NumericalError("train: non-finite loss at epoch " +
                             std::to_string(epoch) + " batch " +
                             std::to_string(b));
      for (std::size_t l = 0; l < model.hidden.size(); ++l) {
        momentum_step(vel.hidden[l].weight, model.hidden[l].weight,
                      grads.hidden[l].weight, cfg.momentum, lr);
        momentum_step(vel.hidden[l].bias, model.hidden[l].bias,
                      grads.hidden[l].bias, cfg.momentum, lr);
      }
      for (std::size_t l = 0; l < model.bn.size(); ++l) {
        momentum_step(vel.bn[l].first, model.bn[l].gamma, grads.bn[l].first,
                      cfg.momentum, lr);
        momentum_step(vel.bn[l].second, model.bn[l].beta, grads.bn[l].second,
                      cfg.momentum, lr);
      }
      momentum_step(vel.output.weight, model.output.weight,
                    grads.output.weight, cfg.momentum, lr);
      momentum_step(vel.output.bias, model.output.bias, grads.output.bias,
                    cfg.momentum, lr);
      const double bweight = bw.sum();
      loss_acc += loss * bweight;
      weight_acc += bweight;
    }
    history.train_loss.push_back(loss_acc / weight_acc);

    const double mloss = monitor_loss_eval(model, monitor, cfg);
    history.monitor_loss.push_back(mloss);
    if (mloss < best_loss) {
      best_loss = mloss;
      history.best_epoch = epoch;
      best = model;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= cfg.patience) break;
    }
  }
  model = best;
  history.best_monitor_ccc = 1.0 - best_loss;
  return history;
}

}  // namespace

TrainHistory train(MlpRegressor& model, const TrainData& data,
                   const TrainConfig& cfg, const TrainData& monitor_data) {
  return run_sgd(model, data, cfg, monitor_data, cfg.epochs_pretrain,
                 cfg.learning_rate);
}

TrainHistory fine_tune_last_layer(MlpRegressor& model,
                                  const TrainData& adapt_data,
                                  const TrainConfig& cfg,
                                  const TrainData& monitor_data) {
  cfg.validate();
  if (adapt_data.size() < 2)
    throw ValidationError("fine_tune_last_layer: adaptation set is empty or "
                          "too small");
  if (monitor_data.size() < 2)
    throw ValidationError("fine_tune_last_layer: monitor set too small");
  const ModelConfig& mcfg = model.config();
  const std::vector<double> hw =
      head_weights(mcfg.out_dim, cfg.mtl_alpha, cfg.mtl_beta);

  // The frozen extractor runs in evaluation mode, so hidden features are
  // constant across the fine-tuning loop and can be computed once.
  const Eigen::MatrixXd feats = model.eval_features(adapt_data.inputs);
  const Eigen::MatrixXd monitor_feats =
      model.eval_features(monitor_data.inputs);
  const Eigen::VectorXd monitor_w =
      monitor_data.has_weights() ? monitor_data.weights
                                 : Eigen::VectorXd::Ones(monitor_data.size());

  MlpRegressor::Dense vel{
      Eigen::MatrixXd::Zero(model.output.weight.rows(),
                            model.output.weight.cols()),
      Eigen::VectorXd::Zero(model.output.bias.size())};
  TrainHistory history;
  MlpRegressor::Dense best = model.output;
  double best_loss = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  std::vector<long> order(adapt_data.size());
  for (long i = 0; i < adapt_data.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs_adapt; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "adapt-shuffle", epoch));
    shuffle_rng.shuffle(order);
    const auto batches = make_batches(order, cfg.batch_size);

    double loss_acc = 0.0, weight_acc = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const long n = static_cast<long>(batches[b].size());
      Eigen::MatrixXd hb(n, feats.cols());
      Eigen::MatrixXd yb(n, adapt_data.targets.cols());
      Eigen::VectorXd wb(n);
      for (long i = 0; i < n; ++i) {
        hb.row(i) = feats.row(batches[b][i]);
        yb.row(i) = adapt_data.targets.row(batches[b][i]);
        wb[i] = adapt_data.has_weights() ? adapt_data.weights[batches[b][i]]
                                         : 1.0;
      }
      Eigen::MatrixXd pred =
          (hb * model.output.weight.transpose()).rowwise() +
          model.output.bias.transpose();
      double loss = 0.0;
      Eigen::MatrixXd dpred(n, mcfg.out_dim);
      for (int h = 0; h < mcfg.out_dim; ++h) {
        LossGrad lg = ccc_loss_and_grad(pred.col(h), yb.col(h));
        loss += hw[h] * lg.loss;
        dpred.col(h) = hw[h] * lg.grad;
      }
      if (!std::isfinite(loss))
        throw NumericalError("fine_tune: non-finite loss at epoch " +
                             std::to_string(epoch) + " batch " +
                             std::to_string(b));
      const double wsum = wb.sum();
      const double scale = static_cast<double>(n) / wsum;
      for (long i = 0; i < n; ++i) dpred.row(i) *= wb[i] * scale;

      momentum_step(vel.weight, model.output.weight,
                    Eigen::MatrixXd(dpred.transpose() * hb), cfg.momentum,
                    cfg.adapt_learning_rate);
      momentum_step(vel.bias, model.output.bias,
                    Eigen::VectorXd(dpred.colwise().sum()), cfg.momentum,
                    cfg.adapt_learning_rate);
      loss_acc += loss * wsum;
      weight_acc += wsum;
    }
    history.train_loss.push_back(loss_acc / weight_acc);

    const Eigen::MatrixXd mpred =
        (monitor_feats * model.output.weight.transpose()).rowwise() +
        model.output.bias.transpose();
    double mloss = 0.0;
    for (int h = 0; h < mcfg.out_dim; ++h)
      mloss += hw[h] * (1.0 - ccc_weighted(monitor_data.targets.col(h),
                                           mpred.col(h), monitor_w));
    history.monitor_loss.push_back(mloss);
    if (mloss < best_loss) {
      best_loss = mloss;
      history.best_epoch = epoch;
      best = model.output;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= cfg.patience) break;
    }
  }
  model.output = best;
  history.best_monitor_ccc = 1.0 - best_loss;
  return history;
}

Eigen::VectorXd predict_scores(const MlpRegressor& model, const Corpus& corpus,
                               const std::vector<std::string>& ids) {
  Eigen::MatrixXd x(static_cast<long>(ids.size()), corpus.dim());
  for (std::size_t i = 0; i < ids.size(); ++i)
    x.row(static_cast<long>(i)) = corpus.by_id(ids[i]).features.transpose();
  return model.predict(x).col(0);
}

// --- Checkpoints -------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'V', 'A', 'M', 'D'};

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {{"dropout_p", cfg.dropout_p},
          {"learning_rate", cfg.learning_rate},
          {"adapt_learning_rate", cfg.adapt_learning_rate},
          {"momentum", cfg.momentum},
          {"epochs_pretrain", cfg.epochs_pretrain},
          {"epochs_adapt", cfg.epochs_adapt},
          {"batch_size", cfg.batch_size},
          {"monitor", monitor_name(cfg.monitor)},
          {"patience", cfg.patience},
          {"seed", cfg.seed},
          {"mtl_alpha", cfg.mtl_alpha},
          {"mtl_beta", cfg.mtl_beta}};
}

}  // namespace

void MlpRegressor::save_checkpoint(const std::filesystem::path& path,
                                   const TrainConfig& train_cfg,
                                   const std::string& norm_stats_ref) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingArtifactError("cannot write " + path.string());
  os.write(kCheckpointMagic, 4);
  write_le<std::uint32_t>(os, 1);  // version
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.n_hidden));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.width));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.input_dim));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_.out_dim));
  for (const Dense& d : hidden) {
    write_tensor_f32(os, d.weight.data(), d.weight.size());
    write_tensor_f32(os, d.bias.data(), d.bias.size());
  }
  write_tensor_f32(os, output.weight.data(), output.weight.size());
  write_tensor_f32(os, output.bias.data(), output.bias.size());
  for (const BatchNorm& b : bn) {
    write_tensor_f32(os, b.gamma.data(), b.gamma.size());
    write_tensor_f32(os, b.beta.data(), b.beta.size());
    write_tensor_f32(os, b.running_mean.data(), b.running_mean.size());
    write_tensor_f32(os, b.running_var.data(), b.running_var.size());
  }
  if (!os) throw MissingArtifactError("write failed for " + path.string());

  nlohmann::json j;
  j["version"] = 1;
  j["train_config"] = train_config_to_json(train_cfg);
  j["norm_stats"] = norm_stats_ref;
  j["batch_norm"] = cfg_.batch_norm;
  std::ofstream js(path.string() + ".json");
  if (!js)
    throw MissingArtifactError("cannot write " + path.string() + ".json");
  js << j.dump(2) << '\n';
}

MlpRegressor MlpRegressor::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ValidationError(path.string() + ": bad checkpoint magic");
  if (read_le<std::uint32_t>(is) != 1)
    throw ValidationError(path.string() + ": unsupported checkpoint version");

  ModelConfig cfg;
  cfg.n_hidden = static_cast<int>(read_le<std::uint32_t>(is));
  cfg.width = static_cast<int>(read_le<std::uint32_t>(is));
  cfg.input_dim = static_cast<int>(read_le<std::uint32_t>(is));
  cfg.out_dim = static_cast<int>(read_le<std::uint32_t>(is));

  std::ifstream js(path.string() + ".json");
  if (!js)
    throw MissingArtifactError("missing checkpoint sidecar " + path.string() +
                               ".json");
  nlohmann::json j;
  js >> j;
  cfg.batch_norm = j.at("batch_norm").get<bool>();

  MlpRegressor m(cfg, 0);
  for (Dense& d : m.hidden) {
    read_tensor_f32(is, d.weight.data(), d.weight.size());
    read_tensor_f32(is, d.bias.data(), d.bias.size());
  }
  read_tensor_f32(is, m.output.weight.data(), m.output.weight.size());
  read_tensor_f32(is, m.output.bias.data(), m.output.bias.size());
  for (BatchNorm& b : m.bn) {
    read_tensor_f32(is, b.gamma.data(), b.gamma.size());
    read_tensor_f32(is, b.beta.data(), b.beta.size());
    read_tensor_f32(is, b.running_mean.data(), b.running_mean.size());
    read_tensor_f32(is, b.running_var.data(), b.running_var.size());
  }
  return m;
}

}  // namespace valadapt
