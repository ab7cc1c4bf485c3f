#pragma once

// Loss construction for flow matching, denoising score matching and EDM,
// condition-mask randomisation, and the AdamW / EMA optimisation loop.

#include "densflow/model.hpp"
#include "densflow/paths.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace densflow {

enum class Method { flow_matching, score_matching, diffusion_edm };
enum class Pipeline { conditional, joint, unconditional };
enum class DsmWeighting { sigma2, likelihood };

std::string to_string(Method m);
std::string to_string(Pipeline p);
std::string to_string(DsmWeighting w);
Method method_from_string(const std::string& s);
Pipeline pipeline_from_string(const std::string& s);
DsmWeighting weighting_from_string(const std::string& s);

struct MethodConfig {
  Method method = Method::flow_matching;
  paths::Sde sde;                        // score matching
  DsmWeighting weighting = DsmWeighting::sigma2;
  paths::EDMPreconditioner edm;          // EDM
  bool estimate_sigma_data = true;       // EDM: sigma_data from the training data

  void validate() const;
};

// ---------------------------------------------------------------- data

/// Per-column z-scoring. Columns with zero spread pass through (std := 1).
struct Standardizer {
  Vector mean;
  Vector std;

  static Standardizer fit(const Matrix& samples);
  static Standardizer identity(Eigen::Index dim);
  Matrix apply(const Matrix& samples) const;
  Matrix invert(const Matrix& samples) const;
  Eigen::Index dim() const { return mean.size(); }
  /// log|d standardized / d raw|, added to a density of standardized values.
  double log_jacobian() const;
};

/// Simulated pairs, one per column: thetas (d_theta x n), xs (d_x x n).
struct Dataset {
  Matrix thetas;
  Matrix xs;

  Eigen::Index size() const { return thetas.cols(); }
  Eigen::Index theta_dim() const { return thetas.rows(); }
  Eigen::Index x_dim() const { return xs.rows(); }
  void validate() const;
};

Dataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const std::string& path, const Dataset& data);

// ---------------------------------------------------------------- masks

/// Mixture over joint / posterior / likelihood / Bernoulli(rho ~ U(0,1)) masks
/// for the joint vector z = (theta, x). 1 marks an observed coordinate.
struct ConditionMaskPolicy {
  double joint = 0.1;
  double posterior = 0.35;
  double likelihood = 0.2;
  double bernoulli = 0.35;

  void validate() const;
  Vector draw(Eigen::Index d_theta, Eigen::Index d_x, Rng& rng) const;
  Matrix draw_batch(Eigen::Index d_theta, Eigen::Index d_x, Eigen::Index n, Rng& rng) const;
};

Vector posterior_mask(Eigen::Index d_theta, Eigen::Index d_x);
Vector likelihood_mask(Eigen::Index d_theta, Eigen::Index d_x);

// ---------------------------------------------------------------- losses

/// A noised batch. For network output `out` the prediction is
///   pred = out_scale(j) * out(:, j) + offset(:, j)
/// and the loss is mean_j weight(j) * || keep(:, j) .* (pred - target) ||^2
/// where keep = 1 - mask (all ones outside joint mode).
struct NoisyBatch {
  FieldInput<double> input;
  Matrix target;
  Vector out_scale;
  Matrix offset;
  Vector weight;
  Matrix keep;

  Matrix noise;   // x0 for flow matching, epsilon for DSM / EDM
  Vector time;    // t (flow matching, unified), tau (DSM) or sigma (EDM)
  Vector sigma;   // DSM marginal std or EDM noise level
};

/// clean: data (d x n); context: condition (conditional) or empty;
/// mask: joint-mode masks (d x n) or nullptr.
NoisyBatch prepare_batch(const MethodConfig& method, const Matrix& clean, const Matrix& context, const Matrix* mask,
                         Rng& rng);

/// Loss value for a given network output; writes dL/dout when requested.
double batch_loss(const NoisyBatch& batch, const Matrix& out, Matrix* d_out = nullptr);

template <typename Scalar>
double evaluate_loss(const FieldModel<Scalar>& model, const ParamStore<Scalar>& params, const NoisyBatch& batch,
                     ParamStore<Scalar>* grad = nullptr);

double cfm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& x1,
                const Matrix& cond, Rng& rng);
double dsm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& x1,
                const Matrix& cond, const paths::Sde& sde, DsmWeighting weighting, Rng& rng);
double edm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& y,
                const Matrix& cond, const paths::EDMPreconditioner& p, Rng& rng);
double joint_masked_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& z1,
                         Eigen::Index d_theta, const ConditionMaskPolicy& policy, const MethodConfig& method,
                         Rng& rng);

// ---------------------------------------------------------------- optimisation

struct TrainConfig {
  int batch_size = 256;
  int total_steps = 10000;
  double peak_lr = 1e-4;
  double min_lr = 1e-6;
  int warmup_steps = 500;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.999;
  double val_fraction = 0.1;
  double early_stop_ratio = 1.5;
  int patience = 5;
  int eval_interval = 500;
  int max_val_samples = 4096;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Linear warmup 0 -> peak, then cosine peak -> min.
double lr_schedule(const TrainConfig& cfg, int step);

struct AdamWState {
  VectorF m;
  VectorF v;
  int step = 0;
};

void adamw_update(ParamStore<float>& params, const ParamStore<float>& grad, AdamWState& state,
                  const TrainConfig& cfg, double lr);

struct EMAState {
  ParamStore<float> shadow;
  double decay = 0.999;

  void update(const ParamStore<float>& params);
};

struct HistoryRow {
  int step;
  double train_loss;
  double val_loss;
  double lr;
};

struct TrainState {
  ParamStore<float> params;
  EMAState ema;
  AdamWState adam;
  int step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_evals = 0;
  std::vector<HistoryRow> history;
};

struct TrainProblem {
  const FieldModel<float>* model = nullptr;
  MethodConfig method;
  Pipeline pipeline = Pipeline::conditional;
  Matrix targets;   // standardized data the model generates (d x n)
  Matrix context;   // standardized condition (conditional pipeline) or empty
  Eigen::Index d_theta = 0;  // joint pipeline: leading block of `targets`
  ConditionMaskPolicy mask_policy;
};

struct TrainResult {
  TrainState state;
  bool early_stopped = false;
};

/// Called after each evaluation; `best` marks a new best validation loss.
using CheckpointHook = std::function<void(const TrainState& state, bool best)>;

TrainResult train(const TrainProblem& problem, const TrainConfig& cfg, std::optional<TrainState> resume = {},
                  const CheckpointHook& hook = {});

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history);

}  // namespace densflow
