#pragma once

// Benchmark simulators with priors and reference posteriors.

#include "densflow/training.hpp"

#include <memory>
#include <string>
#include <vector>

namespace densflow {

enum class ReferenceKind { analytic, grid_oracle, rejection_oracle, none };
std::string to_string(ReferenceKind k);

struct Observation {
  Vector theta;
  Vector x;
};

class Task {
 public:
  virtual ~Task() = default;

  virtual std::string name() const = 0;
  virtual Eigen::Index theta_dim() const = 0;
  virtual Eigen::Index x_dim() const = 0;
  virtual ReferenceKind reference_kind() const = 0;

  virtual Vector sample_prior(Rng& rng) const = 0;
  virtual double prior_log_prob(const Vector& theta) const = 0;
  virtual Vector simulate(const Vector& theta, Rng& rng) const = 0;

  /// Draws from p(theta | x_obs). Throws ConfigError when the task has no reference.
  virtual Matrix reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const;

  /// Prior draws, one per column, each from its own split of the stream.
  Matrix sample_prior(Eigen::Index n, Rng& rng) const;
  /// Simulations for every column of thetas, each with its own split.
  Matrix simulate(const Matrix& thetas, Rng& rng) const;

  /// Fixed test observation `index` (theta drawn from the prior, then simulated).
  Observation observation(int index) const;
};

class TwoMoons : public Task {
 public:
  std::string name() const override { return "two_moons"; }
  Eigen::Index theta_dim() const override { return 2; }
  Eigen::Index x_dim() const override { return 2; }
  ReferenceKind reference_kind() const override { return ReferenceKind::rejection_oracle; }
  using Task::sample_prior;
  using Task::simulate;
  Vector sample_prior(Rng& rng) const override;
  double prior_log_prob(const Vector& theta) const override;
  Vector simulate(const Vector& theta, Rng& rng) const override;
  Matrix reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const override;

  /// Exact likelihood density p(x | theta).
  static double likelihood(const Vector& theta, const Vector& x);
  /// Upper bound of the likelihood over theta, used by the rejection sampler.
  static double likelihood_bound();

  static constexpr double kRadiusMean = 0.1;
  static constexpr double kRadiusStd = 0.01;
  static constexpr double kOffset = 0.25;
};

class GaussianLinear : public Task {
 public:
  explicit GaussianLinear(Eigen::Index dim = 10) : dim_(dim) {}
  std::string name() const override { return "gaussian_linear"; }
  Eigen::Index theta_dim() const override { return dim_; }
  Eigen::Index x_dim() const override { return dim_; }
  ReferenceKind reference_kind() const override { return ReferenceKind::analytic; }
  using Task::sample_prior;
  using Task::simulate;
  Vector sample_prior(Rng& rng) const override;
  double prior_log_prob(const Vector& theta) const override;
  Vector simulate(const Vector& theta, Rng& rng) const override;
  Matrix reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const override;

  struct Posterior {
    Vector mean;
    Matrix cov;
  };
  Posterior posterior(const Vector& x_obs) const;

  static constexpr double kPriorVar = 0.1;
  static constexpr double kNoiseVar = 0.1;

 private:
  Eigen::Index dim_;
};

class GaussianMixture : public Task {
 public:
  std::string name() const override { return "gaussian_mixture"; }
  Eigen::Index theta_dim() const override { return 2; }
  Eigen::Index x_dim() const override { return 2; }
  ReferenceKind reference_kind() const override { return ReferenceKind::grid_oracle; }
  using Task::sample_prior;
  using Task::simulate;
  Vector sample_prior(Rng& rng) const override;
  double prior_log_prob(const Vector& theta) const override;
  Vector simulate(const Vector& theta, Rng& rng) const override;
  Matrix reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const override;

  static double likelihood(const Vector& theta, const Vector& x);

  static constexpr double kBound = 10.0;
  static constexpr double kNarrowStd = 0.1;
  static constexpr int kGrid = 512;
  /// The grid covers the prior box intersected with x_obs +- kWindow.
  static constexpr double kWindow = 8.0;
};

/// Unconditional 4x4 checkerboard on [-2, 2]^2; cell (i, j) is valid when
/// i + j is even. A point on an interior cell edge belongs to the lower cell.
class Checkerboard : public Task {
 public:
  std::string name() const override { return "checkerboard"; }
  Eigen::Index theta_dim() const override { return 2; }
  Eigen::Index x_dim() const override { return 0; }
  ReferenceKind reference_kind() const override { return ReferenceKind::none; }
  using Task::sample_prior;
  using Task::simulate;
  Vector sample_prior(Rng& rng) const override;
  double prior_log_prob(const Vector& theta) const override;
  Vector simulate(const Vector& theta, Rng& rng) const override;

  static constexpr int kCells = 4;
  static constexpr double kExtent = 2.0;

  /// Cell index along one axis, or -1 outside [-2, 2].
  static int cell_index(double v);
  static bool indicator(double x, double y);
  static Matrix sample(Eigen::Index n, Rng& rng);
  /// Counts per valid cell, in row-major order of the valid cells.
  static std::vector<long> occupancy(const Matrix& samples);
};

std::unique_ptr<Task> make_task(const std::string& name);
std::vector<std::string> task_names();

Dataset generate_dataset(const Task& task, Eigen::Index n_sims, std::uint64_t seed);

}  // namespace densflow
