#include "densflow/classifier.hpp"

#include "densflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace densflow {

void ClassifierConfig::validate() const {
  if (width_factor < 1) throw ConfigError("classifier width_factor must be >= 1");
  if (hidden_layers < 2) throw ConfigError("classifier needs at least two hidden layers");
  if (!(learning_rate > 0.0)) throw ConfigError("classifier learning rate must be positive");
  if (batch_size < 1 || max_epochs < 1 || patience < 1) throw ConfigError("classifier batch/epochs/patience must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("classifier val_fraction must lie in (0,1)");
}

namespace {

// Mean binary cross-entropy on logits; d_logits receives dL/dz.
double bce(const MatrixF& logits, const Eigen::VectorXi& labels, const std::vector<Eigen::Index>& idx,
           MatrixF* d_logits) {
  const double n = double(idx.size());
  double loss = 0.0;
  if (d_logits) d_logits->resize(1, Eigen::Index(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double z = logits(0, Eigen::Index(k));
    const double y = labels(idx[k]);
    // softplus(z) - y z, computed stably
    loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
    if (d_logits) (*d_logits)(0, Eigen::Index(k)) = float((1.0 / (1.0 + std::exp(-z)) - y) / n);
  }
  return loss / n;
}

MatrixF gather_cols(const MatrixF& m, const std::vector<Eigen::Index>& idx, std::size_t begin, std::size_t end) {
  MatrixF out(m.rows(), Eigen::Index(end - begin));
  for (std::size_t k = begin; k < end; ++k) out.col(Eigen::Index(k - begin)) = m.col(idx[k]);
  return out;
}

}  // namespace

void BinaryClassifier::fit(const Matrix& features, const Eigen::VectorXi& labels, Rng& rng) {
  cfg_.validate();
  const Eigen::Index n = features.cols();
  if (labels.size() != n) throw ShapeError("classifier: label count differs from sample count");
  if (n < 4) throw ConfigError("classifier needs at least 4 samples");

  MlpConfig mc;
  mc.input_dim = int(features.rows());
  mc.output_dim = 1;
  mc.width = cfg_.width_factor * int(features.rows());
  mc.depth = cfg_.hidden_layers - 1;
  mc.activation = cfg_.activation;
  mc.residual = false;
  mc.layer_norm = false;
  mc.zero_output = false;
  layout_ = ParamLayout();
  mlp_ = Mlp<float>(mc, layout_);
  params_ = ParamStore<float>(layout_);
  mlp_.init(params_, rng);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_val = std::clamp<std::size_t>(std::size_t(std::llround(cfg_.val_fraction * double(n))), 1, order.size() - 1);
  std::vector<Eigen::Index> val(order.begin(), order.begin() + std::ptrdiff_t(n_val));
  std::vector<Eigen::Index> train(order.begin() + std::ptrdiff_t(n_val), order.end());

  const MatrixF x = features.cast<float>();
  const MatrixF x_val = gather_cols(x, val, 0, val.size());

  TrainConfig opt;
  opt.beta1 = 0.9;
  opt.beta2 = 0.999;
  opt.adam_eps = 1e-8;
  opt.weight_decay = 0.0;
  AdamWState adam;
  ParamStore<float> grad(layout_);
  ParamStore<float> best = params_;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  MlpCache<float> cache;
  MatrixF d_logits;

  epochs_ = 0;
  for (int epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
    ++epochs_;
    std::shuffle(train.begin(), train.end(), rng.engine());
    for (std::size_t b = 0; b < train.size(); b += std::size_t(cfg_.batch_size)) {
      const std::size_t e = std::min(train.size(), b + std::size_t(cfg_.batch_size));
      const std::vector<Eigen::Index> idx(train.begin() + std::ptrdiff_t(b), train.begin() + std::ptrdiff_t(e));
      const MatrixF xb = gather_cols(x, train, b, e);
      const MatrixF logits = mlp_.forward(params_, xb, &cache);
      bce(logits, labels, idx, &d_logits);
      grad.set_zero();
      mlp_.backward(params_, cache, d_logits, grad);
      adamw_update(params_, grad, adam, opt, cfg_.learning_rate);
    }
    const double v = bce(mlp_.forward(params_, x_val), labels, val, nullptr);
    if (!std::isfinite(v)) throw Error("classifier training diverged");
    if (v < best_val - cfg_.tolerance) {
      best_val = v;
      best = params_;
      stale = 0;
    } else if (++stale >= cfg_.patience) {
      break;
    }
  }
  params_ = std::move(best);
  fitted_ = true;
}

Vector BinaryClassifier::predict_proba(const Matrix& features) const {
  if (!fitted_) throw Error("classifier used before fit");
  const MatrixF logits = mlp_.forward(params_, features.cast<float>());
  Vector p(logits.cols());
  for (Eigen::Index j = 0; j < p.size(); ++j) p(j) = 1.0 / (1.0 + std::exp(-double(logits(0, j))));
  return p;
}

double BinaryClassifier::accuracy(const Matrix& features, const Eigen::VectorXi& labels) const {
  const Vector p = predict_proba(features);
  if (labels.size() != p.size()) throw ShapeError("classifier: label count differs from sample count");
  long correct = 0;
  for (Eigen::Index j = 0; j < p.size(); ++j) correct += ((p(j) > 0.5 ? 1 : 0) == labels(j)) ? 1 : 0;
  return double(correct) / double(p.size());
}

}  // namespace densflow
