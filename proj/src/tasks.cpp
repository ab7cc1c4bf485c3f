#include "densflow/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace densflow {

namespace {

constexpr double kPi = std::numbers::pi;

double normal_pdf(double x, double mean, double std) {
  const double z = (x - mean) / std;
  return std::exp(-0.5 * z * z) / (std * std::sqrt(2.0 * kPi));
}

constexpr std::uint64_t kObservationSeed = 0x0b5e77a7105ULL;

}  // namespace

std::string to_string(ReferenceKind k) {
  switch (k) {
    case ReferenceKind::analytic: return "analytic";
    case ReferenceKind::grid_oracle: return "grid_oracle";
    case ReferenceKind::rejection_oracle: return "rejection_oracle";
    case ReferenceKind::none: return "none";
  }
  return "none";
}

Matrix Task::reference_posterior(const Vector&, Eigen::Index, Rng&) const {
  throw ConfigError("task '" + name() + "' has no reference posterior");
}

Matrix Task::sample_prior(Eigen::Index n, Rng& rng) const {
  const Rng base = rng.fork();
  Matrix out(theta_dim(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Rng r = base.split(static_cast<std::uint64_t>(j));
    out.col(j) = sample_prior(r);
  }
  return out;
}

Matrix Task::simulate(const Matrix& thetas, Rng& rng) const {
  if (thetas.rows() != theta_dim()) throw ShapeError("simulate: theta dimension mismatch");
  const Rng base = rng.fork();
  Matrix out(x_dim(), thetas.cols());
  for (Eigen::Index j = 0; j < thetas.cols(); ++j) {
    Rng r = base.split(static_cast<std::uint64_t>(j));
    out.col(j) = simulate(Vector(thetas.col(j)), r);
  }
  return out;
}

Observation Task::observation(int index) const {
  if (index < 0) throw ConfigError("observation index must be nonnegative");
  Rng r = Rng(kObservationSeed).split(static_cast<std::uint64_t>(index));
  Observation o;
  o.theta = sample_prior(r);
  o.x = simulate(o.theta, r);
  return o;
}

// ---------------------------------------------------------------- two moons

Vector TwoMoons::sample_prior(Rng& rng) const {
  Vector t(2);
  t << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
  return t;
}

double TwoMoons::prior_log_prob(const Vector& theta) const {
  if (theta.size() != 2) throw ShapeError("two_moons: theta must have 2 entries");
  return (theta.array().abs() <= 1.0).all() ? std::log(0.25) : -std::numeric_limits<double>::infinity();
}

Vector TwoMoons::simulate(const Vector& theta, Rng& rng) const {
  if (theta.size() != 2) throw ShapeError("two_moons: theta must have 2 entries");
  const double a = rng.uniform(-0.5 * kPi, 0.5 * kPi);
  const double r = kRadiusMean + kRadiusStd * rng.normal();
  Vector x(2);
  x(0) = r * std::cos(a) + kOffset - std::abs(theta(0) + theta(1)) / std::numbers::sqrt2;
  x(1) = r * std::sin(a) + (-theta(0) + theta(1)) / std::numbers::sqrt2;
  return x;
}

double TwoMoons::likelihood(const Vector& theta, const Vector& x) {
  // q = (r cos a, r sin a) with a uniform on (-pi/2, pi/2): polar change of
  // variables gives p(q) = f_r(|q|) / (pi |q|) on the half plane q_0 > 0.
  const double q0 = x(0) - kOffset + std::abs(theta(0) + theta(1)) / std::numbers::sqrt2;
  const double q1 = x(1) - (-theta(0) + theta(1)) / std::numbers::sqrt2;
  if (!(q0 > 0.0)) return 0.0;
  const double r = std::hypot(q0, q1);
  return normal_pdf(r, kRadiusMean, kRadiusStd) / (kPi * r);
}

double TwoMoons::likelihood_bound() {
  // f_r(r) / r peaks slightly below the radius mean; scan a fine grid and
  // keep a safety margin.
  double best = 0.0;
  for (int i = 1; i <= 20000; ++i) {
    const double r = kRadiusMean + kRadiusStd * (-10.0 + 20.0 * i / 20000.0);
    if (r <= 0.0) continue;
    best = std::max(best, normal_pdf(r, kRadiusMean, kRadiusStd) / (kPi * r));
  }
  return 1.01 * best;
}

Matrix TwoMoons::reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const {
  if (x_obs.size() != 2) throw ShapeError("two_moons: observation must have 2 entries");
  const double bound = likelihood_bound();
  Matrix out(2, n);
  Eigen::Index accepted = 0;
  long proposals = 0;
  const long max_proposals = 2000000000L;
  while (accepted < n) {
    if (++proposals > max_proposals) throw Error("two_moons reference: rejection sampler made no progress");
    const Vector theta = sample_prior(rng);
    if (rng.uniform() * bound < likelihood(theta, x_obs)) out.col(accepted++) = theta;
  }
  return out;
}

// ---------------------------------------------------------------- gaussian linear

Vector GaussianLinear::sample_prior(Rng& rng) const {
  Vector t(dim_);
  for (Eigen::Index i = 0; i < dim_; ++i) t(i) = std::sqrt(kPriorVar) * rng.normal();
  return t;
}

double GaussianLinear::prior_log_prob(const Vector& theta) const {
  if (theta.size() != dim_) throw ShapeError("gaussian_linear: theta dimension mismatch");
  const double d = double(dim_);
  return -0.5 * theta.squaredNorm() / kPriorVar - 0.5 * d * std::log(2.0 * kPi * kPriorVar);
}

Vector GaussianLinear::simulate(const Vector& theta, Rng& rng) const {
  if (theta.size() != dim_) throw ShapeError("gaussian_linear: theta dimension mismatch");
  Vector x(dim_);
  for (Eigen::Index i = 0; i < dim_; ++i) x(i) = theta(i) + std::sqrt(kNoiseVar) * rng.normal();
  return x;
}

GaussianLinear::Posterior GaussianLinear::posterior(const Vector& x_obs) const {
  if (x_obs.size() != dim_) throw ShapeError("gaussian_linear: observation dimension mismatch");
  const double var = 1.0 / (1.0 / kPriorVar + 1.0 / kNoiseVar);
  return {(var / kNoiseVar) * x_obs, var * Matrix::Identity(dim_, dim_)};
}

Matrix GaussianLinear::reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const {
  const Posterior p = posterior(x_obs);
  const double std = std::sqrt(p.cov(0, 0));
  return (std * rng.normal(dim_, n)).colwise() + p.mean;
}

// ---------------------------------------------------------------- gaussian mixture

Vector GaussianMixture::sample_prior(Rng& rng) const {
  Vector t(2);
  t << rng.uniform(-kBound, kBound), rng.uniform(-kBound, kBound);
  return t;
}

double GaussianMixture::prior_log_prob(const Vector& theta) const {
  if (theta.size() != 2) throw ShapeError("gaussian_mixture: theta must have 2 entries");
  return (theta.array().abs() <= kBound).all() ? -std::log(4.0 * kBound * kBound)
                                               : -std::numeric_limits<double>::infinity();
}

Vector GaussianMixture::simulate(const Vector& theta, Rng& rng) const {
  if (theta.size() != 2) throw ShapeError("gaussian_mixture: theta must have 2 entries");
  const double std = rng.uniform() < 0.5 ? 1.0 : kNarrowStd;
  Vector x(2);
  x(0) = theta(0) + std * rng.normal();
  x(1) = theta(1) + std * rng.normal();
  return x;
}

double GaussianMixture::likelihood(const Vector& theta, const Vector& x) {
  const double r2 = (x - theta).squaredNorm();
  const double s2 = kNarrowStd * kNarrowStd;
  return 0.5 * std::exp(-0.5 * r2) / (2.0 * kPi) + 0.5 * std::exp(-0.5 * r2 / s2) / (2.0 * kPi * s2);
}

Matrix GaussianMixture::reference_posterior(const Vector& x_obs, Eigen::Index n, Rng& rng) const {
  if (x_obs.size() != 2) throw ShapeError("gaussian_mixture: observation must have 2 entries");
  // Prior is flat on the box, so the posterior is the likelihood restricted to it.
  double lo[2], hi[2];
  for (int k = 0; k < 2; ++k) {
    lo[k] = std::max(-kBound, x_obs(k) - kWindow);
    hi[k] = std::min(kBound, x_obs(k) + kWindow);
    if (!(lo[k] < hi[k])) throw DomainError("gaussian_mixture reference: observation far outside the prior box");
  }
  const double cx = (hi[0] - lo[0]) / kGrid, cy = (hi[1] - lo[1]) / kGrid;
  std::vector<double> cdf(static_cast<std::size_t>(kGrid) * kGrid);
  double total = 0.0;
  Vector th(2);
  for (int i = 0; i < kGrid; ++i) {
    for (int j = 0; j < kGrid; ++j) {
      th << lo[0] + (i + 0.5) * cx, lo[1] + (j + 0.5) * cy;
      total += likelihood(th, x_obs);
      cdf[std::size_t(i) * kGrid + std::size_t(j)] = total;
    }
  }
  if (!(total > 0.0)) throw DomainError("gaussian_mixture reference: zero posterior mass on the grid");
  Matrix out(2, n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const double u = rng.uniform() * total;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const auto cell = std::size_t(std::min<std::ptrdiff_t>(it - cdf.begin(), std::ptrdiff_t(cdf.size()) - 1));
    const double i = double(cell / kGrid), j = double(cell % kGrid);
    out(0, s) = lo[0] + (i + rng.uniform()) * cx;
    out(1, s) = lo[1] + (j + rng.uniform()) * cy;
  }
  return out;
}

// ---------------------------------------------------------------- checkerboard

int Checkerboard::cell_index(double v) {
  if (!(v >= -kExtent && v <= kExtent)) return -1;
  // Cells are (k-2, k-1]; the left edge of the box belongs to cell 0.
  const int k = static_cast<int>(std::ceil(v + kExtent)) - 1;
  return std::clamp(k, 0, kCells - 1);
}

bool Checkerboard::indicator(double x, double y) {
  const int i = cell_index(x), j = cell_index(y);
  return i >= 0 && j >= 0 && (i + j) % 2 == 0;
}

Matrix Checkerboard::sample(Eigen::Index n, Rng& rng) {
  Matrix out(2, n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const int cell = static_cast<int>(rng.index(8));
    const int i = cell / 2;
    const int j = 2 * (cell % 2) + (i % 2);
    out(0, s) = -kExtent + i + rng.uniform();
    out(1, s) = -kExtent + j + rng.uniform();
  }
  return out;
}

std::vector<long> Checkerboard::occupancy(const Matrix& samples) {
  std::vector<long> counts(8, 0);
  for (Eigen::Index s = 0; s < samples.cols(); ++s) {
    const int i = cell_index(samples(0, s)), j = cell_index(samples(1, s));
    if (i < 0 || j < 0 || (i + j) % 2 != 0) continue;
    ++counts[std::size_t(i * 2 + j / 2)];
  }
  return counts;
}

Vector Checkerboard::sample_prior(Rng& rng) const { return sample(1, rng).col(0); }

double Checkerboard::prior_log_prob(const Vector& theta) const {
  if (theta.size() != 2) throw ShapeError("checkerboard: points have 2 entries");
  return indicator(theta(0), theta(1)) ? -std::log(8.0) : -std::numeric_limits<double>::infinity();
}

Vector Checkerboard::simulate(const Vector&, Rng&) const { return Vector(0); }

// ---------------------------------------------------------------- registry

std::vector<std::string> task_names() { return {"two_moons", "gaussian_linear", "gaussian_mixture", "checkerboard"}; }

std::unique_ptr<Task> make_task(const std::string& name) {
  if (name == "two_moons") return std::make_unique<TwoMoons>();
  if (name == "gaussian_linear") return std::make_unique<GaussianLinear>();
  if (name == "gaussian_mixture") return std::make_unique<GaussianMixture>();
  if (name == "checkerboard") return std::make_unique<Checkerboard>();
  std::string list;
  for (const auto& n : task_names()) list += (list.empty() ? "" : ", ") + n;
  throw ConfigError("unknown task '" + name + "' (available: " + list + ")");
}

Dataset generate_dataset(const Task& task, Eigen::Index n_sims, std::uint64_t seed) {
  if (n_sims < 1) throw ConfigError("n_sims must be >= 1");
  const Rng base(seed);
  Dataset d;
  d.thetas.resize(task.theta_dim(), n_sims);
  d.xs.resize(task.x_dim(), n_sims);
  for (Eigen::Index j = 0; j < n_sims; ++j) {
    Rng r = base.split(static_cast<std::uint64_t>(j));
    d.thetas.col(j) = task.sample_prior(r);
    if (task.x_dim() > 0) d.xs.col(j) = task.simulate(Vector(d.thetas.col(j)), r);
  }
  return d;
}

}  // namespace densflow
