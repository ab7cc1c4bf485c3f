#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "densflow/diagnostics.hpp"
#include "densflow/tasks.hpp"

#include <cmath>
#include <numbers>

using namespace densflow;

namespace {

Vector vec2(double a, double b) { return (Vector(2) << a, b).finished(); }

double se_of_mean(const Eigen::RowVectorXd& v) {
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / double(v.size() - 1) / double(v.size()));
}

}  // namespace

TEST_CASE("two moons simulator moments") {
  TwoMoons task;
  Rng rng(1);
  const int n = 100000;
  const Matrix thetas = Vector::Zero(2).replicate(1, n);
  const Matrix xs = task.simulate(thetas, rng);
  CHECK(std::abs(xs.row(1).mean()) < 3 * se_of_mean(xs.row(1)));
  // E[r cos a] = E[r] E[cos a]; E[cos a] over U(-pi/2, pi/2) by trapezoid quadrature.
  const int m = 20000;
  double integral = 0.0;
  for (int i = 0; i <= m; ++i) {
    const double a = -0.5 * std::numbers::pi + std::numbers::pi * i / m;
    integral += (i == 0 || i == m ? 0.5 : 1.0) * std::cos(a);
  }
  const double e_cos = integral * (std::numbers::pi / m) / std::numbers::pi;
  const double expected = TwoMoons::kRadiusMean * e_cos + TwoMoons::kOffset;
  CHECK(std::abs(xs.row(0).mean() - expected) < 3 * se_of_mean(xs.row(0)));

  // theta_1 + theta_2 = 0 leaves the first coordinate unshifted.
  const Matrix anti = vec2(0.3, -0.3).replicate(1, n);
  const Matrix xa = task.simulate(anti, rng);
  CHECK(std::abs(xa.row(0).mean() - expected) < 3 * se_of_mean(xa.row(0)));
}

TEST_CASE("two moons observations stay inside the analytic bounds") {
  TwoMoons task;
  const Dataset d = generate_dataset(task, 10000, 3);
  const double r_max = TwoMoons::kRadiusMean + 8 * TwoMoons::kRadiusStd;
  const double shift = std::numbers::sqrt2;  // |theta_1 +- theta_2| / sqrt 2 on the prior box
  CHECK(d.xs.row(0).maxCoeff() <= r_max + TwoMoons::kOffset);
  CHECK(d.xs.row(0).minCoeff() >= TwoMoons::kOffset - r_max - shift);
  CHECK(d.xs.row(1).cwiseAbs().maxCoeff() <= r_max + shift);
  CHECK((d.thetas.array().abs() <= 1.0).all());
}

TEST_CASE("two moons likelihood integrates to one") {
  // Integrate over x for a fixed theta on a fine grid around the crescent.
  const Vector theta = vec2(0.2, 0.5);
  const double c0 = TwoMoons::kOffset - std::abs(0.7) / std::numbers::sqrt2;
  const double c1 = (0.5 - 0.2) / std::numbers::sqrt2;
  const int m = 1200;
  const double half = 0.2, h = 2 * half / m;
  double total = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      total += TwoMoons::likelihood(theta, vec2(c0 - half + (i + 0.5) * h, c1 - half + (j + 0.5) * h));
  CHECK(total * h * h == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("two moons reference posterior") {
  TwoMoons task;
  Rng sim(4);
  const Vector x = task.simulate(vec2(0.3, -0.1), sim);
  Rng rng(5);
  const Matrix post = task.reference_posterior(x, 2000, rng);
  CHECK((post.array().abs() <= 1.0).all());
  const Eigen::Index positive = ((post.row(0) + post.row(1)).array() > 0.0).count();
  CHECK(positive >= 200);
  CHECK(positive <= 1800);
  const Matrix other = task.reference_posterior(x, 2000, rng);
  CHECK(c2st(post, other, rng).accuracy <= 0.53);
}

TEST_CASE("gaussian linear posterior") {
  GaussianLinear task;
  CHECK(task.posterior(Vector::Zero(10)).mean.norm() == 0.0);
  const auto p = task.posterior(Vector::Ones(10));
  CHECK((p.mean.array() - 0.5).abs().maxCoeff() < 1e-12);
  CHECK((p.cov - 0.05 * Matrix::Identity(10, 10)).norm() < 1e-12);
  CHECK((p.cov.diagonal().array() < GaussianLinear::kPriorVar).all());

  // 1-D slice quadrature of prior x likelihood.
  const double x = 0.7;
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i <= 40000; ++i) {
    const double th = -4.0 + 8.0 * i / 40000.0;
    const double w = std::exp(-0.5 * th * th / 0.1 - 0.5 * (x - th) * (x - th) / 0.1);
    z += w;
    m1 += w * th;
    m2 += w * th * th;
  }
  const double mean = m1 / z, var = m2 / z - mean * mean;
  const auto px = task.posterior(Vector::Constant(10, x));
  CHECK(px.mean(3) == doctest::Approx(mean).epsilon(1e-8));
  CHECK(px.cov(3, 3) == doctest::Approx(var).epsilon(1e-6));

  Rng rng(6);
  const Matrix draws = task.reference_posterior(Vector::Constant(10, x), 20000, rng);
  for (int i = 0; i < 10; ++i) CHECK(std::abs(draws.row(i).mean() - 0.35) < 3 * se_of_mean(draws.row(i)));
}

TEST_CASE("gaussian mixture") {
  GaussianMixture task;
  const Vector th = vec2(1.0, -2.0);
  Rng rng(7);
  for (int k = 0; k < 50; ++k)
    CHECK(GaussianMixture::likelihood(th, th) >= GaussianMixture::likelihood(th, th + 0.3 * rng.normal(2, 1)));

  // Four mean checks, so 4 standard errors keeps the family-wise false alarm rate small.
  const Matrix at0 = task.reference_posterior(vec2(0, 0), 20000, rng);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(at0.row(i).mean()) < 4 * se_of_mean(at0.row(i)));
  // Far from the box edges the flat prior makes the posterior centred on x.
  const Matrix at = task.reference_posterior(vec2(1.5, -2.5), 20000, rng);
  CHECK(std::abs(at.row(0).mean() - 1.5) < 4 * se_of_mean(at.row(0)));
  CHECK(std::abs(at.row(1).mean() + 2.5) < 4 * se_of_mean(at.row(1)));
  // Near the edge the posterior is truncated to the prior box.
  const Matrix edge = task.reference_posterior(vec2(9.8, 0.0), 2000, rng);
  CHECK(edge.row(0).maxCoeff() <= GaussianMixture::kBound);

  const Vector x = task.observation(0).x;
  const Matrix a = task.reference_posterior(x, 2000, rng);
  const Matrix b = task.reference_posterior(x, 2000, rng);
  CHECK(c2st(a, b, rng).accuracy <= 0.53);
}

TEST_CASE("checkerboard") {
  Rng rng(8);
  const Matrix s = Checkerboard::sample(10000, rng);
  bool all_valid = true;
  for (Eigen::Index j = 0; j < s.cols(); ++j) all_valid = all_valid && Checkerboard::indicator(s(0, j), s(1, j));
  CHECK(all_valid);
  const auto counts = Checkerboard::occupancy(s);
  CHECK(counts.size() == 8);
  CHECK(chi_square_uniform_pvalue(counts) > 0.01);

  // Boundaries belong to the lower cell.
  CHECK(Checkerboard::cell_index(-1.0) == 0);
  CHECK(Checkerboard::cell_index(0.0) == 1);
  CHECK(Checkerboard::cell_index(1.0) == 2);
  CHECK(Checkerboard::cell_index(-2.0) == 0);
  CHECK(Checkerboard::cell_index(2.0) == 3);
  CHECK(Checkerboard::cell_index(2.5) == -1);
  CHECK(Checkerboard::indicator(-1.5, -1.5));
  CHECK_FALSE(Checkerboard::indicator(-0.5, -1.5));
  CHECK_FALSE(Checkerboard::indicator(3.0, 0.5));
}

TEST_CASE("task registry and datasets") {
  for (const auto& name : task_names()) CHECK(make_task(name)->name() == name);
  try {
    make_task("slcp");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("two_moons") != std::string::npos);
  }
  TwoMoons task;
  const Dataset a = generate_dataset(task, 500, 9), b = generate_dataset(task, 500, 9);
  CHECK(a.size() == 500);
  CHECK(a.thetas == b.thetas);
  CHECK(a.xs == b.xs);
  // Rows depend only on (seed, row): a larger dataset extends a smaller one.
  const Dataset c = generate_dataset(task, 800, 9);
  CHECK(c.thetas.leftCols(500) == a.thetas);
  CHECK(task.observation(3).x == task.observation(3).x);
  CHECK(task.observation(3).x != task.observation(4).x);
  Rng rng(1);
  CHECK_THROWS_AS(task.simulate(Vector(Vector::Zero(3)), rng), ShapeError);
  Checkerboard cb;
  CHECK_THROWS_AS(cb.reference_posterior(Vector(0), 10, rng), ConfigError);
}
