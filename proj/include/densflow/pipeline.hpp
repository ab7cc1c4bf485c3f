#pragma once

// Trained artifacts and the glue between models, solvers and data units:
// standardisation, method-tagged field adapters, sampling and log densities
// in raw parameter units, and run-directory checkpoints.

#include "densflow/checkpoint.hpp"
#include "densflow/config.hpp"
#include "densflow/solvers.hpp"
#include "densflow/training.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace densflow {

/// A trained network together with everything needed to use it. The
/// `method` tag decides which solvers accept it.
struct TrainedModel {
  Method method = Method::flow_matching;
  Pipeline pipeline = Pipeline::conditional;
  MethodConfig method_config;
  FieldModelConfig model_config;
  Standardizer theta_std;
  Standardizer x_std;
  Eigen::Index d_theta = 0;
  Eigen::Index d_x = 0;
  ParamStore<float> params;  // EMA weights used for inference
  int step = 0;
  std::string task;

  /// Dimension of the vector the network generates.
  Eigen::Index generated_dim() const { return pipeline == Pipeline::joint ? d_theta + d_x : d_theta; }
};

// ---------------------------------------------------------------- adapters

/// Network wrapper shared by the method-specific adapters. `context` is the
/// condition (conditional) or mask (joint) with one or n columns.
class NetworkView {
 public:
  NetworkView(const TrainedModel& m, Matrix context);
  Matrix forward(const Matrix& x, double net_time) const;
  Matrix jvp(const Matrix& x, double net_time, const Matrix& direction) const;

 private:
  FieldInput<float> input(const Matrix& x, double net_time) const;
  FieldModel<float> model_;
  const ParamStore<float>& params_;
  MatrixF context_;
};

class FlowModelField : public VelocityField {
 public:
  FlowModelField(const TrainedModel& m, Matrix context);
  Matrix velocity(const Matrix& x, double t) const override;
  Matrix jvp(const Matrix& x, double t, const Matrix& direction) const override;

 private:
  NetworkView net_;
};

/// score = network output / marginal std (noise-prediction parameterisation).
class ScoreModelField : public ScoreField {
 public:
  ScoreModelField(const TrainedModel& m, Matrix context);
  Matrix score(const Matrix& x, double tau) const override;
  Matrix jvp(const Matrix& x, double tau, const Matrix& direction) const override;

 private:
  NetworkView net_;
  paths::Sde sde_;
};

/// D(x, sigma) = c_skip x + c_out F(c_in x, c_noise).
class EdmModelDenoiser : public Denoiser {
 public:
  EdmModelDenoiser(const TrainedModel& m, Matrix context);
  Matrix denoise(const Matrix& x, double sigma) const override;

 private:
  NetworkView net_;
  paths::EDMPreconditioner edm_;
};

/// Typed accessors: throw CompatibilityError naming the method tag when the
/// artifact was trained by a different method.
std::unique_ptr<FlowModelField> as_flow(const TrainedModel& m, Matrix context);
std::unique_ptr<ScoreModelField> as_score(const TrainedModel& m, Matrix context);
std::unique_ptr<EdmModelDenoiser> as_edm(const TrainedModel& m, Matrix context);

/// Restricts a field on the joint vector to its free coordinates, with the
/// others pinned to given values (one or n columns).
class FreeCoordinateField : public VelocityField {
 public:
  FreeCoordinateField(const VelocityField& full, Vector mask, Matrix values);
  Matrix velocity(const Matrix& x, double t) const override;
  Matrix jvp(const Matrix& x, double t, const Matrix& direction) const override;
  Eigen::Index free_dim() const { return Eigen::Index(free_.size()); }

 private:
  Matrix embed(const Matrix& x, bool zero_pinned) const;
  Matrix restrict(const Matrix& z) const;
  const VelocityField& full_;
  Vector mask_;
  Matrix values_;
  std::vector<Eigen::Index> free_;
};

// ---------------------------------------------------------------- inference

enum class SampleMode { posterior, likelihood, joint };
std::string to_string(SampleMode m);
SampleMode sample_mode_from_string(const std::string& s);

/// Draws in raw units. `given` holds one conditioning vector per column
/// (x for posterior mode, theta for likelihood mode; ignored for joint /
/// unconditional); n_per draws are produced per column, blocked per column.
/// Posterior mode returns theta draws, likelihood mode x draws, joint mode
/// full (theta, x) vectors.
Matrix sample(const TrainedModel& m, const SolverConfig& solver, SampleMode mode, const Matrix& given,
              Eigen::Index n_per, Rng& rng, Trajectory* trajectory = nullptr);

struct LogProbOptions {
  Divergence divergence = Divergence::exact;
  int n_probes = 64;
  int n_steps = 200;
};

/// log q(theta | x) in raw units for every column of thetas; xs holds one
/// observation or one per theta (ignored for unconditional models).
LogProbResult log_prob(const TrainedModel& m, const Matrix& thetas, const Matrix& xs, const LogProbOptions& opt,
                       Rng& rng);

// ---------------------------------------------------------------- training

struct TrainingRun {
  TrainedModel model;
  TrainResult result;
};

/// Standardises the dataset, builds the model and trains it. When out_dir is
/// set, checkpoints (manifest.json / checkpoint.bin at the end,
/// manifest_best.json / checkpoint_best.bin at the best validation loss),
/// history.csv and config.json are written there. `resume` continues from a
/// checkpoint written by an earlier run with the same configuration.
TrainingRun train_model(const RunConfig& cfg, const Dataset& data, const std::optional<std::filesystem::path>& out_dir,
                        const std::optional<std::filesystem::path>& resume = {});

/// Dataset for a run: read from cfg.dataset or simulated from the task.
Dataset load_or_simulate(const RunConfig& cfg);

void save_trained(const std::filesystem::path& manifest, const TrainedModel& m, const TrainState* state = nullptr,
                  const std::string& blob_name = "checkpoint.bin");
/// Accepts a manifest path or a run directory (reads manifest.json).
TrainedModel load_trained(const std::filesystem::path& path);
TrainState load_train_state(const std::filesystem::path& path);

}  // namespace densflow
