#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "densflow/diagnostics.hpp"
#include "densflow/solvers.hpp"

#include <cmath>

using namespace densflow;

namespace {

double normal_cdf(double x, double sd = 1.0) { return 0.5 * std::erfc(-x / (sd * std::sqrt(2.0))); }

double mean_of(const Matrix& x) { return x.mean(); }

double var_of(const Matrix& x) {
  const double m = x.mean();
  return (x.array() - m).square().sum() / double(x.size() - 1);
}

// Marginal velocity of the CondOT path from N(0,1) to N(mu, s^2) in 1-D.
struct GaussianFlow {
  double mu, s;
  Matrix velocity(const Matrix& x, double t) const {
    const double var = (1 - t) * (1 - t) + t * t * s * s;
    const double cov = t * s * s - (1 - t);
    return (mu + cov / var * (x.array() - t * mu)).matrix();
  }
};

double observed_order(const std::vector<double>& errors) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < errors.size(); ++i) total += std::log2(errors[i] / errors[i + 1]);
  return total / double(errors.size() - 1);
}

}  // namespace

TEST_CASE("flow ODE on trivial fields") {
  Rng rng(1);
  const Matrix x0 = rng.normal(3, 5);
  FunctionVelocity zero([](const Matrix& x, double) { return Matrix::Zero(x.rows(), x.cols()); });
  const Vector c = (Vector(3) << 0.5, -1.0, 2.0).finished();
  FunctionVelocity constant([&](const Matrix& x, double) { return c.replicate(1, x.cols()); });
  for (OdeMethod m : {OdeMethod::euler, OdeMethod::midpoint, OdeMethod::heun}) {
    for (int n : {1, 7, 100}) {
      ODESolverConfig cfg;
      cfg.method = m;
      cfg.n_steps = n;
      CHECK(integrate_fm_ode(zero, x0, cfg) == x0);
      cfg.t_start = 0.2;
      cfg.t_end = 0.9;
      const Matrix out = integrate_fm_ode(constant, x0, cfg);
      CHECK((out - x0 - 0.7 * c.replicate(1, 5)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("flow ODE convergence orders on a linear field") {
  FunctionVelocity linear([](const Matrix& x, double) { return Matrix(-x); });
  Matrix x0(1, 1);
  x0 << 1.5;
  const double exact = 1.5 * std::exp(-1.0);
  auto errors_for = [&](OdeMethod m) {
    std::vector<double> errs;
    for (int n : {10, 20, 40}) {
      ODESolverConfig cfg;
      cfg.method = m;
      cfg.n_steps = n;
      errs.push_back(std::abs(integrate_fm_ode(linear, x0, cfg)(0, 0) - exact));
    }
    return errs;
  };
  CHECK(observed_order(errors_for(OdeMethod::heun)) >= 1.8);
  CHECK(observed_order(errors_for(OdeMethod::midpoint)) >= 1.8);
  const double euler = observed_order(errors_for(OdeMethod::euler));
  CHECK(euler >= 0.9);
  CHECK(euler < 1.2);
}

TEST_CASE("flow ODE records trajectories and pins observed coordinates") {
  Rng rng(2);
  FunctionVelocity linear([](const Matrix& x, double) { return Matrix(-x); });
  Observed obs{(Matrix(2, 1) << 0, 1).finished(), (Matrix(2, 1) << 0, 3.5).finished()};
  ODESolverConfig cfg;
  cfg.n_steps = 10;
  Trajectory traj;
  const Matrix out = integrate_fm_ode(linear, rng.normal(2, 4), cfg, obs, &traj);
  CHECK((out.row(1).array() == 3.5).all());
  REQUIRE(traj.states.size() == 11);
  CHECK(traj.times.front() == 0.0);
  CHECK(traj.times.back() == doctest::Approx(1.0));
  for (const auto& s : traj.states) CHECK((s.row(1).array() == 3.5).all());

  FunctionVelocity blowup([](const Matrix& x, double) { return Matrix(x.array() * 1e300); });
  try {
    integrate_fm_ode(blowup, Matrix::Ones(1, 1), cfg);
    FAIL("expected IntegrationError");
  } catch (const IntegrationError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  ODESolverConfig bad;
  bad.n_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("stochastic flow sampler") {
  CHECK(fm_sde_diffusion(FmSdeVariant::zero_ends, 0.7, 0.0) == 0.0);
  CHECK(fm_sde_diffusion(FmSdeVariant::zero_ends, 0.7, 1.0) == 0.0);
  CHECK(fm_sde_diffusion(FmSdeVariant::non_singular, 0.7, 0.0) == doctest::Approx(0.7));

  const GaussianFlow g{0.5, 0.5};
  FunctionVelocity field([&](const Matrix& x, double t) { return g.velocity(x, t); });
  Rng rng(3);
  const Matrix x0 = rng.normal(1, 10000);

  // alpha = 0 reproduces the Euler ODE bit for bit.
  ODESolverConfig euler;
  euler.n_steps = 100;
  Rng r0(4);
  CHECK(integrate_fm_sde(field, x0, FmSdeVariant::zero_ends, 0.0, 100, r0) == integrate_fm_ode(field, x0, euler));

  // Marginal preservation.
  for (FmSdeVariant v : {FmSdeVariant::zero_ends, FmSdeVariant::non_singular}) {
    for (double alpha : {0.5, 1.0}) {
      Rng r(5);
      const Matrix out = integrate_fm_sde(field, x0, v, alpha, 400, r);
      const double n = double(out.size());
      const double target_var = g.s * g.s;
      CAPTURE(alpha);
      CHECK(std::abs(mean_of(out) - g.mu) < 3 * g.s / std::sqrt(n));
      CHECK(std::abs(var_of(out) - target_var) < 3 * target_var * std::sqrt(2 / (n - 1)));
    }
  }

  // A sample's path does not depend on the rest of the batch.
  Rng ra(6), rb(6);
  const Matrix full = integrate_fm_sde(field, x0.leftCols(50), FmSdeVariant::zero_ends, 1.0, 50, ra);
  const Matrix part = integrate_fm_sde(field, x0.leftCols(10), FmSdeVariant::zero_ends, 1.0, 50, rb);
  CHECK(full.leftCols(10) == part);
}

TEST_CASE("reverse diffusion SDE with an analytic score") {
  for (double data_sd : {1.0, 2.0}) {
    paths::Sde sde;  // VP
    // x_tau = m x_0 + s eps with x_0 ~ N(0, data_sd^2).
    FunctionScore score([&](const Matrix& x, double tau) {
      const double m = sde.mean_coeff(tau), s = sde.marginal_std(tau);
      return Matrix(-x / (m * m * data_sd * data_sd + s * s));
    });
    Rng rng(7);
    const Matrix xT = rng.normal(1, 5000);
    const Matrix out = integrate_sm_reverse_sde(score, xT, sde, 1000, rng);
    const KsResult ks = ks_test(out.row(0).transpose(), [&](double v) { return normal_cdf(v, data_sd); });
    CAPTURE(data_sd);
    CHECK(ks.p_value > 0.01);
  }
  // Without diffusion only the drift f remains: dx/dtau = c x, integrated
  // backwards from tau = 1 to eps.
  const double c = -0.8;
  FunctionScore unused([](const Matrix& x, double) { return Matrix(x * 1e9); });
  ReverseDiffusion drift_only{[&](double) { return c; }, [](double) { return 0.0; }};
  Matrix x(1, 1);
  x << 2.0;
  Rng rng(8);
  const Matrix out = integrate_reverse_sde(unused, x, drift_only, 2000, rng);
  CHECK(out(0, 0) == doctest::Approx(2.0 * std::exp(-c * (1 - paths::kTimeEps))).epsilon(1e-3));
}

TEST_CASE("probability-flow ODE") {
  for (auto kind : {paths::SdeKind::vp, paths::SdeKind::ve}) {
    paths::Sde sde;
    sde.kind = kind;
    FunctionScore score([&](const Matrix& x, double tau) {
      const double m = sde.mean_coeff(tau), s = sde.marginal_std(tau);
      return Matrix(-x / (m * m + s * s));
    });
    Rng rng(9);
    const Matrix xT = rng.normal(1, 5000) * sde.prior_std();
    ODESolverConfig cfg;
    cfg.method = OdeMethod::heun;
    cfg.n_steps = 200;
    const Matrix out = integrate_sm_pf_ode(score, xT, sde, cfg);
    // At tau = eps the marginal is N(0, m^2 + s^2) rather than exactly N(0, 1).
    const double sd = std::sqrt(std::pow(sde.mean_coeff(paths::kTimeEps), 2) + std::pow(sde.marginal_std(paths::kTimeEps), 2));
    const KsResult ks = ks_test(out.row(0).transpose(), [&](double v) { return normal_cdf(v, sd); });
    CAPTURE(paths::to_string(kind));
    CHECK(ks.p_value > 0.01);
    CHECK(integrate_sm_pf_ode(score, xT, sde, cfg) == out);

    const Matrix x = rng.normal(2, 3);
    const double tau = 0.37;
    const double g = sde.diffusion(tau);
    CHECK((pf_ode_drift(score, sde, x, tau) - reverse_sde_drift(score, sde, x, tau) -
           0.5 * g * g * score.score(x, tau))
              .norm() < 1e-12);
  }
}

TEST_CASE("EDM sampler") {
  paths::EDMPreconditioner p;
  Rng rng(10);
  const Matrix latents = rng.normal(2, 6) * p.sigma_max;
  ChurnParams none;
  FunctionDenoiser identity([](const Matrix& x, double) { return x; });
  CHECK(edm_sample(identity, latents, p, 18, none, rng) == latents);

  // D = 0 makes every step an exact scaling by sigma_next / sigma_cur.
  FunctionDenoiser zero([](const Matrix& x, double) { return Matrix::Zero(x.rows(), x.cols()); });
  Trajectory traj;
  const Matrix out = edm_sample(zero, latents, p, 18, none, rng, {}, &traj);
  const auto sig = paths::edm_sigma_schedule(18, p);
  double product = 1.0;
  for (std::size_t i = 0; i + 1 < sig.size(); ++i) {
    product *= sig[i + 1] / sig[i];
    CHECK((traj.states[i + 1] - product * latents).norm() < 1e-9 * latents.norm());
  }
  CHECK(out.norm() < 1e-12 * latents.norm());

  // Analytic denoiser for N(0, sd^2) data, with and without churn.
  const double sd = 0.8;
  FunctionDenoiser exact([&](const Matrix& x, double s) { return Matrix(x * (sd * sd / (sd * sd + s * s))); });
  for (double churn : {0.0, 40.0}) {
    ChurnParams cp;
    cp.s_churn = churn;
    Rng r(11);
    const Matrix z = r.normal(1, 5000) * p.sigma_max;
    const Matrix draws = edm_sample(exact, z, p, 40, cp, r);
    const KsResult ks = ks_test(draws.row(0).transpose(), [&](double v) { return normal_cdf(v, sd); });
    CAPTURE(churn);
    CHECK(ks.p_value > 0.01);
  }
}

TEST_CASE("change-of-variables log density") {
  Rng rng(12);
  const Matrix x1 = rng.normal(3, 10) * 1.3;
  FunctionVelocity zero([](const Matrix& x, double) { return Matrix::Zero(x.rows(), x.cols()); },
                        [](const Matrix& x, double, const Matrix&) { return Matrix::Zero(x.rows(), x.cols()); });
  const LogProbResult id = fm_log_prob(zero, x1, LogProbConfig{});
  for (Eigen::Index j = 0; j < 10; ++j) CHECK(id.log_density(j) == doctest::Approx(standard_normal_log_pdf(x1.col(j))));

  // v = a x: x1 = x0 e^a, log p(x1) = log N(x1 e^-a) - d a.
  const double a = 0.6;
  FunctionVelocity linear([&](const Matrix& x, double) { return Matrix(a * x); },
                          [&](const Matrix&, double, const Matrix& d) { return Matrix(a * d); });
  const LogProbResult lin = fm_log_prob(linear, x1, LogProbConfig{});
  for (Eigen::Index j = 0; j < 10; ++j) {
    const double expected = standard_normal_log_pdf(x1.col(j) * std::exp(-a)) - 3 * a;
    CHECK(std::abs(lin.log_density(j) - expected) < 1e-3 * std::abs(expected));
  }

  // Hutchinson converges to the exact divergence of a non-symmetric field.
  const Matrix A = rng.normal(3, 3);
  FunctionVelocity general([&](const Matrix& x, double) { return Matrix(A * x); },
                           [&](const Matrix&, double, const Matrix& d) { return Matrix(A * d); });
  LogProbConfig exact_cfg;
  exact_cfg.n_steps = 4;
  LogProbConfig hutch_cfg = exact_cfg;
  hutch_cfg.divergence = Divergence::hutchinson;
  hutch_cfg.n_probes = 10000;
  const Matrix pts = rng.normal(3, 2);
  const LogProbResult e = fm_log_prob(general, pts, exact_cfg);
  Rng probe_rng(13);
  const LogProbResult h = fm_log_prob(general, pts, hutch_cfg, &probe_rng);
  for (Eigen::Index j = 0; j < 2; ++j) {
    CHECK(h.standard_error(j) > 0.0);
    CHECK(std::abs(h.divergence_integral(j) - e.divergence_integral(j)) < 3 * h.standard_error(j));
  }
  CHECK(e.divergence_integral(0) == doctest::Approx(A.trace()));
  CHECK_THROWS_AS(fm_log_prob(general, pts, hutch_cfg), ConfigError);
}

TEST_CASE("fields without a Jacobian reject exact log densities") {
  FunctionVelocity no_jvp([](const Matrix& x, double) { return x; });
  CHECK_THROWS_AS(fm_log_prob(no_jvp, Matrix::Ones(2, 1), LogProbConfig{}), CompatibilityError);
}
