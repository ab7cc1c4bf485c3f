#pragma once

// Closed-form scheduler mathematics: affine probability paths, VP/VE SDE
// coefficients, EDM preconditioning and the velocity <-> score identity.
//
// Time convention: t = 0 is noise and t = 1 is data for every method. The
// VP/VE SDE helpers take the diffusion time tau = 1 - t, where tau = 0 is
// data, because that is how their coefficient formulas are written.

#include "densflow/types.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace densflow::paths {

/// Distance kept from any time endpoint where a formula divides by
/// sigma_t, alpha_t or t.
inline constexpr double kTimeEps = 1e-3;

inline double diffusion_time(double t) { return 1.0 - t; }

/// x_t = sigma(t) x0 + alpha(t) x1, x0 noise, x1 data.
struct AffinePath {
  std::function<double(double)> alpha;
  std::function<double(double)> sigma;
  std::function<double(double)> dalpha;
  std::function<double(double)> dsigma;

  static AffinePath condot() {
    return {[](double t) { return t; }, [](double t) { return 1.0 - t; }, [](double) { return 1.0; },
            [](double) { return -1.0; }};
  }
};

template <typename A, typename B>
typename A::PlainObject condot_point(double t, const Eigen::MatrixBase<A>& x0, const Eigen::MatrixBase<B>& x1) {
  require_same_shape(x0.rows(), x0.cols(), x1.rows(), x1.cols(), "condot_point");
  return (1.0 - t) * x0 + t * x1;
}

template <typename A, typename B>
typename A::PlainObject affine_point(const AffinePath& path, double t, const Eigen::MatrixBase<A>& x0,
                                     const Eigen::MatrixBase<B>& x1) {
  require_same_shape(x0.rows(), x0.cols(), x1.rows(), x1.cols(), "affine_point");
  return path.sigma(t) * x0 + path.alpha(t) * x1;
}

/// u_t(x | x1) = (sigma'/sigma)(x - alpha x1) + alpha' x1.
template <typename A, typename B>
typename A::PlainObject affine_conditional_velocity(const AffinePath& path, double t, const Eigen::MatrixBase<A>& x,
                                                    const Eigen::MatrixBase<B>& x1) {
  require_same_shape(x.rows(), x.cols(), x1.rows(), x1.cols(), "affine_conditional_velocity");
  const double s = path.sigma(t);
  if (!(s > 0.0)) throw SingularTimeError("affine_conditional_velocity: sigma_t = 0 at t = " + std::to_string(t));
  const double a = path.alpha(t);
  return (path.dsigma(t) / s) * (x - a * x1) + path.dalpha(t) * x1;
}

/// Marginal score implied by a velocity field under a Gaussian affine path:
///   s = (v - (a'/a) x) / (sigma^2 (a'/a - sigma'/sigma)).
template <typename A, typename B>
typename A::PlainObject score_from_velocity(const AffinePath& path, double t, const Eigen::MatrixBase<A>& x,
                                            const Eigen::MatrixBase<B>& v) {
  require_same_shape(x.rows(), x.cols(), v.rows(), v.cols(), "score_from_velocity");
  if (!(t > 0.0 && t < 1.0)) throw SingularTimeError("score_from_velocity: t must lie in (0,1), got " + std::to_string(t));
  const double a = path.alpha(t);
  const double s = path.sigma(t);
  if (a == 0.0 || s == 0.0) throw SingularTimeError("score_from_velocity: degenerate path coefficients");
  const double ra = path.dalpha(t) / a;
  const double scale = s * s * (ra - path.dsigma(t) / s);
  return (v - ra * x) / scale;
}

template <typename A, typename B>
typename A::PlainObject velocity_from_score(const AffinePath& path, double t, const Eigen::MatrixBase<A>& x,
                                            const Eigen::MatrixBase<B>& score) {
  require_same_shape(x.rows(), x.cols(), score.rows(), score.cols(), "velocity_from_score");
  if (!(t > 0.0 && t < 1.0)) throw SingularTimeError("velocity_from_score: t must lie in (0,1), got " + std::to_string(t));
  const double a = path.alpha(t);
  const double s = path.sigma(t);
  const double ra = path.dalpha(t) / a;
  return ra * x + (s * s * (ra - path.dsigma(t) / s)) * score;
}

/// grad_x log N(x; mu, sigma_t^2 I)
template <typename A, typename B>
typename A::PlainObject gaussian_conditional_score(const Eigen::MatrixBase<A>& mu, double sigma_t,
                                                   const Eigen::MatrixBase<B>& x) {
  require_same_shape(mu.rows(), mu.cols(), x.rows(), x.cols(), "gaussian_conditional_score");
  if (!(sigma_t > 0.0)) throw DomainError("gaussian_conditional_score: sigma_t must be positive");
  return -(x - mu) / (sigma_t * sigma_t);
}

// ---------------------------------------------------------------- VP / VE

struct VPCoefficients {
  double beta_min = 0.1;
  double beta_max = 20.0;

  void validate() const {
    if (!(beta_min > 0.0) || !(beta_max >= beta_min))
      throw ConfigError("VP schedule requires 0 < beta_min <= beta_max");
  }
  double beta(double tau) const { return beta_min + tau * (beta_max - beta_min); }
  double integrated_beta(double tau) const { return beta_min * tau + 0.5 * (beta_max - beta_min) * tau * tau; }
  // Transition kernel x_tau | x_0 ~ N(m x_0, s^2 I).
  double mean_coeff(double tau) const { return std::exp(-0.5 * integrated_beta(tau)); }
  double marginal_std(double tau) const { return std::sqrt(-std::expm1(-integrated_beta(tau))); }
  double diffusion(double tau) const { return std::sqrt(beta(tau)); }
};

struct VECoefficients {
  double sigma_min = 0.01;
  double sigma_max = 15.0;

  void validate() const {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
      throw ConfigError("VE schedule requires 0 < sigma_min < sigma_max");
  }
  double sigma(double tau) const { return sigma_min * std::pow(sigma_max / sigma_min, tau); }
  double mean_coeff(double) const { return 1.0; }
  // Perturbation std sigma(tau): the kernel already includes the sigma_min floor.
  double marginal_std(double tau) const { return sigma(tau); }
};

template <typename Derived>
struct DriftDiffusion {
  typename Derived::PlainObject drift;
  double diffusion;
};

/// dx = -1/2 beta(tau) x dtau + sqrt(beta(tau)) dw
template <typename Derived>
DriftDiffusion<Derived> vp_drift_diffusion(const VPCoefficients& c, double tau, const Eigen::MatrixBase<Derived>& x) {
  const double b = c.beta(tau);
  return {(-0.5 * b) * x, std::sqrt(b)};
}

/// sqrt(d sigma^2 / d tau) for the geometric schedule.
inline double ve_diffusion(const VECoefficients& c, double tau) {
  c.validate();
  return c.sigma(tau) * std::sqrt(2.0 * std::log(c.sigma_max / c.sigma_min));
}

enum class SdeKind { vp, ve };

inline std::string to_string(SdeKind k) { return k == SdeKind::vp ? "vp" : "ve"; }
inline SdeKind sde_kind_from_string(const std::string& s) {
  if (s == "vp") return SdeKind::vp;
  if (s == "ve") return SdeKind::ve;
  throw ConfigError("unknown SDE type '" + s + "' (expected vp|ve)");
}

/// Either SDE, evaluated in diffusion time.
struct Sde {
  SdeKind kind = SdeKind::vp;
  VPCoefficients vp;
  VECoefficients ve;

  void validate() const { kind == SdeKind::vp ? vp.validate() : ve.validate(); }

  // f(x, tau) = drift_coeff(tau) * x
  double drift_coeff(double tau) const { return kind == SdeKind::vp ? -0.5 * vp.beta(tau) : 0.0; }
  double diffusion(double tau) const { return kind == SdeKind::vp ? vp.diffusion(tau) : ve_diffusion(ve, tau); }
  double mean_coeff(double tau) const { return kind == SdeKind::vp ? vp.mean_coeff(tau) : 1.0; }
  double marginal_std(double tau) const { return kind == SdeKind::vp ? vp.marginal_std(tau) : ve.marginal_std(tau); }
  double prior_std() const { return kind == SdeKind::vp ? 1.0 : ve.sigma_max; }
};

// ---------------------------------------------------------------- EDM

struct EDMPreconditioner {
  double sigma_data = 0.5;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  double p_mean = -1.2;
  double p_std = 1.2;

  void validate() const {
    if (!(sigma_data > 0.0)) throw ConfigError("EDM sigma_data must be positive");
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) throw ConfigError("EDM requires 0 < sigma_min < sigma_max");
    if (!(rho > 0.0)) throw ConfigError("EDM rho must be positive");
    if (!(p_std >= 0.0)) throw ConfigError("EDM p_std must be nonnegative");
  }
};

struct EdmScalings {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

inline EdmScalings edm_precondition(const EDMPreconditioner& p, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("edm_precondition: sigma must be positive");
  const double sd2 = p.sigma_data * p.sigma_data;
  const double total = sigma * sigma + sd2;
  const double root = std::sqrt(total);
  return {sd2 / total, sigma * p.sigma_data / root, 1.0 / root, 0.25 * std::log(sigma)};
}

inline double edm_loss_weight(const EDMPreconditioner& p, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("edm_loss_weight: sigma must be positive");
  const double num = sigma * sigma + p.sigma_data * p.sigma_data;
  const double den = sigma * p.sigma_data;
  return num / (den * den);
}

/// sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho, i < N, then 0.
inline std::vector<double> edm_sigma_schedule(int n_steps, const EDMPreconditioner& p) {
  if (n_steps < 1) throw ConfigError("edm_sigma_schedule: n_steps must be >= 1");
  std::vector<double> out;
  out.reserve(n_steps + 1);
  if (n_steps == 1) {
    out.push_back(p.sigma_max);
  } else {
    const double hi = std::pow(p.sigma_max, 1.0 / p.rho);
    const double lo = std::pow(p.sigma_min, 1.0 / p.rho);
    for (int i = 0; i < n_steps; ++i)
      out.push_back(std::pow(hi + double(i) / double(n_steps - 1) * (lo - hi), p.rho));
  }
  out.push_back(0.0);
  return out;
}

inline double sample_training_sigma(const EDMPreconditioner& p, Rng& rng) {
  return std::exp(p.p_mean + p.p_std * rng.normal());
}

}  // namespace densflow::paths
