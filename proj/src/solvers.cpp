#include "densflow/solvers.hpp"

#include "densflow/csv.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace densflow {

Matrix VelocityField::jvp(const Matrix&, double, const Matrix&) const {
  throw CompatibilityError("this velocity field does not provide input directional derivatives");
}

Matrix ScoreField::jvp(const Matrix&, double, const Matrix&) const {
  throw CompatibilityError("this score field does not provide input directional derivatives");
}

Matrix FunctionVelocity::jvp(const Matrix& x, double t, const Matrix& d) const {
  if (!jvp_) return VelocityField::jvp(x, t, d);
  return jvp_(x, t, d);
}

Matrix ProbabilityFlowVelocity::velocity(const Matrix& x, double t) const {
  return -pf_ode_drift(score_, sde_, x, paths::diffusion_time(t));
}

Matrix ProbabilityFlowVelocity::jvp(const Matrix& x, double t, const Matrix& direction) const {
  const double tau = paths::diffusion_time(t);
  const double g = sde_.diffusion(tau);
  return -(sde_.drift_coeff(tau) * direction - 0.5 * g * g * score_.jvp(x, tau, direction));
}

void Observed::apply(Matrix& x) const {
  if (empty()) return;
  if (mask.rows() != x.rows() || values.rows() != x.rows()) throw ShapeError("Observed: dimension mismatch");
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Eigen::Index mj = mask.cols() == 1 ? 0 : j;
    const Eigen::Index vj = values.cols() == 1 ? 0 : j;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (mask(i, mj) != 0.0) x(i, j) = values(i, vj);
  }
}

std::string to_string(OdeMethod m) {
  switch (m) {
    case OdeMethod::euler: return "euler";
    case OdeMethod::midpoint: return "midpoint";
    case OdeMethod::heun: return "heun";
  }
  return "euler";
}

OdeMethod ode_method_from_string(const std::string& s) {
  if (s == "euler") return OdeMethod::euler;
  if (s == "midpoint") return OdeMethod::midpoint;
  if (s == "heun") return OdeMethod::heun;
  throw ConfigError("unknown ODE method '" + s + "' (expected euler|midpoint|heun)");
}

void ODESolverConfig::validate() const {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  if (!(t_start >= 0.0 && t_end <= 1.0 && t_start < t_end))
    throw ConfigError("ODE solver requires 0 <= t_start < t_end <= 1");
}

std::string to_string(FmSdeVariant v) { return v == FmSdeVariant::zero_ends ? "zero_ends" : "non_singular"; }

FmSdeVariant fm_sde_variant_from_string(const std::string& s) {
  if (s == "zero_ends") return FmSdeVariant::zero_ends;
  if (s == "non_singular") return FmSdeVariant::non_singular;
  throw ConfigError("unknown SDE variant '" + s + "' (expected zero_ends|non_singular)");
}

double fm_sde_diffusion(FmSdeVariant variant, double alpha, double t) {
  if (variant == FmSdeVariant::zero_ends) return alpha * std::sqrt(std::max(0.0, t * (1.0 - t)));
  return alpha * std::sqrt(std::max(0.0, 1.0 - t));
}

void ChurnParams::validate() const {
  if (!(s_churn >= 0.0)) throw ConfigError("s_churn must be nonnegative");
  if (!(s_min <= s_max)) throw ConfigError("churn requires s_min <= s_max");
  if (!(s_noise >= 0.0)) throw ConfigError("s_noise must be nonnegative");
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  CsvTable t;
  const Eigen::Index d = traj.states.empty() ? 0 : traj.states.front().rows();
  const Eigen::Index n = traj.states.empty() ? 0 : traj.states.front().cols();
  t.header = {"sample_id", "step", "t"};
  const auto xn = indexed_names("x", d);
  t.header.insert(t.header.end(), xn.begin(), xn.end());
  t.values.resize(n * Eigen::Index(traj.states.size()), 3 + d);
  Eigen::Index row = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < traj.states.size(); ++k, ++row) {
      t.values(row, 0) = double(j);
      t.values(row, 1) = double(k);
      t.values(row, 2) = traj.times[k];
      t.values.row(row).tail(d) = traj.states[k].col(j).transpose();
    }
  }
  write_csv(path, t);
}

namespace {

void check_finite(const Matrix& x, int step, const char* solver) {
  if (!x.allFinite())
    throw IntegrationError(std::string(solver) + ": non-finite state at step " + std::to_string(step));
}

void record(Trajectory* traj, double t, const Matrix& x) {
  if (!traj) return;
  traj->times.push_back(t);
  traj->states.push_back(x);
}

std::vector<Rng> sample_streams(Rng& rng, Eigen::Index n) {
  const Rng base = rng.fork();
  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) streams.push_back(base.split(static_cast<std::uint64_t>(j)));
  return streams;
}

Matrix brownian(std::vector<Rng>& streams, Eigen::Index d) {
  Matrix out(d, Eigen::Index(streams.size()));
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < d; ++i) out(i, j) = streams[std::size_t(j)].normal();
  return out;
}

double clamp_time(double t) { return std::clamp(t, paths::kTimeEps, 1.0 - paths::kTimeEps); }

}  // namespace

// ---------------------------------------------------------------- flow ODE / SDE

Matrix integrate_fm_ode(const VelocityField& field, Matrix x, const ODESolverConfig& cfg, const Observed& observed,
                        Trajectory* trajectory) {
  cfg.validate();
  observed.apply(x);
  record(trajectory, cfg.t_start, x);
  const double h = (cfg.t_end - cfg.t_start) / cfg.n_steps;
  for (int k = 0; k < cfg.n_steps; ++k) {
    const double t = cfg.t_start + k * h;
    switch (cfg.method) {
      case OdeMethod::euler: {
        x += h * field.velocity(x, t);
        break;
      }
      case OdeMethod::midpoint: {
        Matrix mid = x + (0.5 * h) * field.velocity(x, t);
        observed.apply(mid);
        x += h * field.velocity(mid, t + 0.5 * h);
        break;
      }
      case OdeMethod::heun: {
        const Matrix v0 = field.velocity(x, t);
        Matrix pred = x + h * v0;
        observed.apply(pred);
        x += (0.5 * h) * (v0 + field.velocity(pred, t + h));
        break;
      }
    }
    observed.apply(x);
    check_finite(x, k, "flow ODE");
    record(trajectory, t + h, x);
  }
  return x;
}

Matrix integrate_fm_sde(const VelocityField& field, Matrix x, FmSdeVariant variant, double alpha, int n_steps,
                        Rng& rng, const Observed& observed, Trajectory* trajectory) {
  if (!(alpha >= 0.0)) throw ConfigError("SDE alpha must be nonnegative");
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  const auto path = paths::AffinePath::condot();
  auto streams = sample_streams(rng, x.cols());
  observed.apply(x);
  record(trajectory, 0.0, x);
  const double h = 1.0 / n_steps;
  const double sqrt_h = std::sqrt(h);
  for (int k = 0; k < n_steps; ++k) {
    const double t = k * h;
    const double g = fm_sde_diffusion(variant, alpha, t);
    const Matrix v = field.velocity(x, t);
    if (g == 0.0) {
      x += h * v;
    } else {
      const Matrix s = paths::score_from_velocity(path, clamp_time(t), x, v);
      x += h * (v + (0.5 * g * g) * s) + (g * sqrt_h) * brownian(streams, x.rows());
    }
    observed.apply(x);
    check_finite(x, k, "flow SDE");
    record(trajectory, t + h, x);
  }
  return x;
}

// ---------------------------------------------------------------- diffusion SDE

ReverseDiffusion reverse_diffusion(const paths::Sde& sde) {
  sde.validate();
  return {[sde](double tau) { return sde.drift_coeff(tau); }, [sde](double tau) { return sde.diffusion(tau); }};
}

Matrix integrate_reverse_sde(const ScoreField& score, Matrix x, const ReverseDiffusion& sde, int n_steps, Rng& rng,
                             const Observed& observed, Trajectory* trajectory) {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  auto streams = sample_streams(rng, x.cols());
  const double tau_end = paths::kTimeEps;
  const double h = (1.0 - tau_end) / n_steps;
  const double sqrt_h = std::sqrt(h);
  observed.apply(x);
  record(trajectory, 0.0, x);
  for (int k = 0; k < n_steps; ++k) {
    const double tau = 1.0 - k * h;
    const double g = sde.diffusion(tau);
    Matrix drift = sde.drift_coeff(tau) * x;
    if (g != 0.0) drift -= (g * g) * score.score(x, tau);
    x -= h * drift;
    if (g != 0.0 && k + 1 < n_steps) x += (g * sqrt_h) * brownian(streams, x.rows());
    observed.apply(x);
    check_finite(x, k, "reverse SDE");
    record(trajectory, paths::diffusion_time(tau - h), x);
  }
  return x;
}

Matrix integrate_sm_reverse_sde(const ScoreField& score, Matrix xT, const paths::Sde& sde, int n_steps, Rng& rng,
                                const Observed& observed, Trajectory* trajectory) {
  return integrate_reverse_sde(score, std::move(xT), reverse_diffusion(sde), n_steps, rng, observed, trajectory);
}

Matrix reverse_sde_drift(const ScoreField& score, const paths::Sde& sde, const Matrix& x, double tau) {
  const double g = sde.diffusion(tau);
  return sde.drift_coeff(tau) * x - (g * g) * score.score(x, tau);
}

Matrix pf_ode_drift(const ScoreField& score, const paths::Sde& sde, const Matrix& x, double tau) {
  const double g = sde.diffusion(tau);
  return sde.drift_coeff(tau) * x - (0.5 * g * g) * score.score(x, tau);
}

Matrix integrate_sm_pf_ode(const ScoreField& score, Matrix xT, const paths::Sde& sde, ODESolverConfig cfg,
                           const Observed& observed, Trajectory* trajectory) {
  sde.validate();
  cfg.t_end = std::min(cfg.t_end, 1.0 - paths::kTimeEps);
  const ProbabilityFlowVelocity field(score, sde);
  return integrate_fm_ode(field, std::move(xT), cfg, observed, trajectory);
}

// ---------------------------------------------------------------- EDM

Matrix edm_sample(const Denoiser& denoiser, Matrix x, const paths::EDMPreconditioner& p, int n_steps,
                  const ChurnParams& churn, Rng& rng, const Observed& observed, Trajectory* trajectory) {
  p.validate();
  churn.validate();
  const auto sigmas = paths::edm_sigma_schedule(n_steps, p);
  auto streams = sample_streams(rng, x.cols());
  const double gamma_cap = std::min(churn.s_churn / n_steps, std::numbers::sqrt2 - 1.0);
  observed.apply(x);
  record(trajectory, sigmas[0], x);
  for (int i = 0; i < n_steps; ++i) {
    const double s_cur = sigmas[std::size_t(i)];
    const double s_next = sigmas[std::size_t(i) + 1];
    const double gamma = (s_cur >= churn.s_min && s_cur <= churn.s_max) ? gamma_cap : 0.0;
    const double s_hat = s_cur * (1.0 + gamma);
    Matrix x_hat = x;
    if (gamma > 0.0) {
      x_hat += (std::sqrt(s_hat * s_hat - s_cur * s_cur) * churn.s_noise) * brownian(streams, x.rows());
      observed.apply(x_hat);
    }
    const Matrix d = (x_hat - denoiser.denoise(x_hat, s_hat)) / s_hat;
    x = x_hat + (s_next - s_hat) * d;
    if (s_next > 0.0) {
      observed.apply(x);
      const Matrix d2 = (x - denoiser.denoise(x, s_next)) / s_next;
      x = x_hat + (s_next - s_hat) * (0.5 * d + 0.5 * d2);
    }
    observed.apply(x);
    check_finite(x, i, "EDM sampler");
    record(trajectory, s_next, x);
  }
  return x;
}

// ---------------------------------------------------------------- log density

std::string to_string(Divergence d) { return d == Divergence::exact ? "exact" : "hutchinson"; }

Divergence divergence_from_string(const std::string& s) {
  if (s == "exact") return Divergence::exact;
  if (s == "hutchinson") return Divergence::hutchinson;
  throw ConfigError("unknown divergence mode '" + s + "' (expected exact|hutchinson)");
}

double standard_normal_log_pdf(const Eigen::Ref<const Vector>& x, double std) {
  const double d = double(x.size());
  return -0.5 * x.squaredNorm() / (std * std) - d * std::log(std) - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

LogProbResult fm_log_prob(const VelocityField& field, const Matrix& x1, const LogProbConfig& cfg, Rng* rng) {
  if (cfg.n_steps < 1) throw ConfigError("log-prob n_steps must be >= 1");
  if (!(cfg.source_std > 0.0)) throw ConfigError("source_std must be positive");
  const bool hutch = cfg.divergence == Divergence::hutchinson;
  if (hutch && !rng) throw ConfigError("Hutchinson divergence requires a random stream");
  if (hutch && cfg.n_probes < 1) throw ConfigError("n_probes must be >= 1");

  const Eigen::Index d = x1.rows();
  const Eigen::Index n = x1.cols();
  // Directions stacked as k blocks of n columns: unit vectors or probes.
  const Eigen::Index k = hutch ? cfg.n_probes : d;
  Matrix dirs(d, k * n);
  if (hutch) {
    auto streams = sample_streams(*rng, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index p = 0; p < k; ++p)
        for (Eigen::Index i = 0; i < d; ++i) dirs(i, p * n + j) = streams[std::size_t(j)].rademacher();
  } else {
    dirs.setZero();
    for (Eigen::Index i = 0; i < d; ++i) dirs.row(i).segment(i * n, n).setOnes();
  }

  LogProbResult res;
  Matrix per_dir = Matrix::Zero(k, n);  // integral of dir^T J dir per block
  Matrix x = x1;
  const double h = (cfg.t_data - cfg.t_source) / cfg.n_steps;
  for (int step = 0; step < cfg.n_steps; ++step) {
    const double t = cfg.t_data - step * h;
    const Matrix v = field.velocity(x, t);
    const Matrix jv = field.jvp(x.replicate(1, k), t, dirs);
    res.n_evals += 2;
    const Matrix q = (dirs.array() * jv.array()).colwise().sum();
    for (Eigen::Index p = 0; p < k; ++p) per_dir.row(p) += h * q.row(0).segment(p * n, n);
    x -= h * v;
    check_finite(x, step, "log-prob integration");
  }

  res.divergence_integral.resize(n);
  res.standard_error = Vector::Zero(n);
  if (hutch) {
    res.divergence_integral = per_dir.colwise().mean().transpose();
    if (k > 1) {
      const Matrix centered = per_dir.rowwise() - res.divergence_integral.transpose();
      const Vector var = centered.colwise().squaredNorm().transpose() / double(k - 1);
      res.standard_error = (var / double(k)).cwiseSqrt();
    }
  } else {
    res.divergence_integral = per_dir.colwise().sum().transpose();
  }
  res.source_log_density.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) res.source_log_density(j) = standard_normal_log_pdf(x.col(j), cfg.source_std);
  res.log_density = res.source_log_density - res.divergence_integral;
  return res;
}

}  // namespace densflow
