#pragma once

// Small MLP binary classifier used by the two-sample tests.

#include "densflow/model.hpp"

namespace densflow {

struct ClassifierConfig {
  int width_factor = 10;     // hidden width = width_factor * input dim
  int hidden_layers = 2;
  Activation activation = Activation::silu;
  double learning_rate = 1e-3;
  int batch_size = 128;
  int max_epochs = 300;
  int patience = 10;         // epochs without validation improvement
  double tolerance = 1e-4;
  double val_fraction = 0.2;

  void validate() const;
};

class BinaryClassifier {
 public:
  explicit BinaryClassifier(ClassifierConfig cfg = {}) : cfg_(cfg) {}

  /// features: d x n; labels: n entries in {0, 1}. Keeps the parameters with
  /// the best validation loss.
  void fit(const Matrix& features, const Eigen::VectorXi& labels, Rng& rng);
  /// P(label = 1) per column.
  Vector predict_proba(const Matrix& features) const;
  double accuracy(const Matrix& features, const Eigen::VectorXi& labels) const;
  int epochs_run() const { return epochs_; }

 private:
  ClassifierConfig cfg_;
  ParamLayout layout_;
  Mlp<float> mlp_;
  ParamStore<float> params_;
  int epochs_ = 0;
  bool fitted_ = false;
};

}  // namespace densflow
