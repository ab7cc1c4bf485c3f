#pragma once

// Inference-time integrators: flow ODE / SDE, reverse-time diffusion SDE,
// probability-flow ODE, the EDM Heun sampler and change-of-variables
// log densities. Every solver works on batches (one sample per column).

#include "densflow/paths.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace densflow {

// ---------------------------------------------------------------- fields

/// v(x, t) in unified time (t = 0 noise, t = 1 data).
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual Matrix velocity(const Matrix& x, double t) const = 0;
  /// (dv/dx) * direction, column by column. `direction` may stack k copies
  /// of the batch side by side, in which case x is stacked the same way.
  virtual Matrix jvp(const Matrix& x, double t, const Matrix& direction) const;
};

/// grad_x log p_tau(x) in diffusion time (tau = 0 data).
class ScoreField {
 public:
  virtual ~ScoreField() = default;
  virtual Matrix score(const Matrix& x, double tau) const = 0;
  virtual Matrix jvp(const Matrix& x, double tau, const Matrix& direction) const;
};

/// D(x, sigma): estimate of the clean sample.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Matrix denoise(const Matrix& x, double sigma) const = 0;
};

/// Lambda-backed fields, mostly for analytic stubs.
class FunctionVelocity : public VelocityField {
 public:
  using Fn = std::function<Matrix(const Matrix&, double)>;
  using JvpFn = std::function<Matrix(const Matrix&, double, const Matrix&)>;
  explicit FunctionVelocity(Fn v, JvpFn jvp = {}) : v_(std::move(v)), jvp_(std::move(jvp)) {}
  Matrix velocity(const Matrix& x, double t) const override { return v_(x, t); }
  Matrix jvp(const Matrix& x, double t, const Matrix& d) const override;

 private:
  Fn v_;
  JvpFn jvp_;
};

class FunctionScore : public ScoreField {
 public:
  using Fn = std::function<Matrix(const Matrix&, double)>;
  explicit FunctionScore(Fn s) : s_(std::move(s)) {}
  Matrix score(const Matrix& x, double tau) const override { return s_(x, tau); }

 private:
  Fn s_;
};

class FunctionDenoiser : public Denoiser {
 public:
  using Fn = std::function<Matrix(const Matrix&, double)>;
  explicit FunctionDenoiser(Fn d) : d_(std::move(d)) {}
  Matrix denoise(const Matrix& x, double sigma) const override { return d_(x, sigma); }

 private:
  Fn d_;
};

/// Probability-flow ODE of an SDE written as a velocity in unified time:
/// dx/dt = -(f(x, tau) - 1/2 g(tau)^2 s(x, tau)) with tau = 1 - t.
class ProbabilityFlowVelocity : public VelocityField {
 public:
  ProbabilityFlowVelocity(const ScoreField& score, paths::Sde sde) : score_(score), sde_(sde) {}
  Matrix velocity(const Matrix& x, double t) const override;
  Matrix jvp(const Matrix& x, double t, const Matrix& direction) const override;

 private:
  const ScoreField& score_;
  paths::Sde sde_;
};

/// Observed coordinates of the joint vector: where mask = 1 the state is
/// pinned to `values`. mask and values have one column (shared) or n columns.
struct Observed {
  Matrix mask;
  Matrix values;

  bool empty() const { return mask.size() == 0; }
  void apply(Matrix& x) const;
};

// ---------------------------------------------------------------- configs

enum class OdeMethod { euler, midpoint, heun };
std::string to_string(OdeMethod m);
OdeMethod ode_method_from_string(const std::string& s);

struct ODESolverConfig {
  OdeMethod method = OdeMethod::euler;
  int n_steps = 100;
  double t_start = 0.0;
  double t_end = 1.0;

  void validate() const;
};

enum class FmSdeVariant { zero_ends, non_singular };
std::string to_string(FmSdeVariant v);
FmSdeVariant fm_sde_variant_from_string(const std::string& s);

/// Diffusion scale g~(t) of the stochastic flow samplers.
double fm_sde_diffusion(FmSdeVariant variant, double alpha, double t);

struct ChurnParams {
  double s_churn = 0.0;
  double s_min = 0.0;
  double s_max = std::numeric_limits<double>::infinity();
  double s_noise = 1.0;

  void validate() const;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Matrix> states;
};

/// Columns `sample_id,step,t,x_0..`.
void write_trajectory_csv(const std::string& path, const Trajectory& traj);

// ---------------------------------------------------------------- samplers

Matrix integrate_fm_ode(const VelocityField& field, Matrix x0, const ODESolverConfig& cfg,
                        const Observed& observed = {}, Trajectory* trajectory = nullptr);

Matrix integrate_fm_sde(const VelocityField& field, Matrix x0, FmSdeVariant variant, double alpha, int n_steps,
                        Rng& rng, const Observed& observed = {}, Trajectory* trajectory = nullptr);

/// Drift coefficient f(tau) (f(x, tau) = f(tau) x) and diffusion g(tau).
struct ReverseDiffusion {
  std::function<double(double)> drift_coeff;
  std::function<double(double)> diffusion;
};

ReverseDiffusion reverse_diffusion(const paths::Sde& sde);

/// dx = [f - g^2 s] dtau + g dw, integrated from tau = 1 down to tau = eps by
/// Euler-Maruyama. The last step adds no noise.
Matrix integrate_reverse_sde(const ScoreField& score, Matrix xT, const ReverseDiffusion& sde, int n_steps, Rng& rng,
                             const Observed& observed = {}, Trajectory* trajectory = nullptr);

Matrix integrate_sm_reverse_sde(const ScoreField& score, Matrix xT, const paths::Sde& sde, int n_steps, Rng& rng,
                                const Observed& observed = {}, Trajectory* trajectory = nullptr);

/// Probability-flow ODE integrated from t = 0 to t = 1 - eps (tau = eps).
Matrix integrate_sm_pf_ode(const ScoreField& score, Matrix xT, const paths::Sde& sde, ODESolverConfig cfg,
                           const Observed& observed = {}, Trajectory* trajectory = nullptr);

/// Drifts in diffusion time, exposed for comparison.
Matrix reverse_sde_drift(const ScoreField& score, const paths::Sde& sde, const Matrix& x, double tau);
Matrix pf_ode_drift(const ScoreField& score, const paths::Sde& sde, const Matrix& x, double tau);

Matrix edm_sample(const Denoiser& denoiser, Matrix latents, const paths::EDMPreconditioner& p, int n_steps,
                  const ChurnParams& churn, Rng& rng, const Observed& observed = {},
                  Trajectory* trajectory = nullptr);

// ---------------------------------------------------------------- log density

enum class Divergence { exact, hutchinson };
std::string to_string(Divergence d);
Divergence divergence_from_string(const std::string& s);

struct LogProbConfig {
  int n_steps = 200;
  double t_data = 1.0;     // where x lives
  double t_source = 0.0;   // where the source density is known
  double source_std = 1.0; // isotropic Gaussian source N(0, source_std^2 I)
  Divergence divergence = Divergence::exact;
  int n_probes = 1;
};

/// Per sample: log_density = source_log_density - divergence_integral where
/// divergence_integral = int_{t_source}^{t_data} div v dt.
struct LogProbResult {
  Vector log_density;
  Vector divergence_integral;
  Vector source_log_density;
  Vector standard_error;  // Hutchinson only; zero for exact divergence
  long n_evals = 0;       // field / jvp evaluations (batched calls count once)
};

/// Euler integration backward from t_data to t_source, divergence evaluated
/// at the same nodes as the state update. Hutchinson probes are drawn once
/// per sample and reused at every step.
LogProbResult fm_log_prob(const VelocityField& field, const Matrix& x1, const LogProbConfig& cfg,
                          Rng* rng = nullptr);

double standard_normal_log_pdf(const Eigen::Ref<const Vector>& x, double std = 1.0);

}  // namespace densflow
