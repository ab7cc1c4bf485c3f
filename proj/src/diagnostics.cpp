#include "densflow/diagnostics.hpp"

#include "densflow/csv.hpp"

#include <boost/math/distributions/beta.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace densflow {

PosteriorSampler per_observation_sampler(std::function<Matrix(const Vector& x, Eigen::Index n, Rng& rng)> fn) {
  return [fn = std::move(fn)](const Matrix& xs, Eigen::Index n_per, Rng& rng) {
    Matrix out;
    for (Eigen::Index k = 0; k < xs.cols(); ++k) {
      Rng r = rng.fork();
      const Matrix draws = fn(Vector(xs.col(k)), n_per, r);
      if (draws.cols() != n_per) throw ShapeError("posterior sampler returned the wrong number of draws");
      if (k == 0) out.resize(draws.rows(), n_per * xs.cols());
      out.middleCols(k * n_per, n_per) = draws;
    }
    return out;
  };
}

// ---------------------------------------------------------------- tests

double kolmogorov_survival(double lambda) {
  if (!(lambda > 0.0)) return 1.0;
  if (lambda < 1.18) {
    // Theta-function form, fast for small lambda.
    const double c = std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double cdf = 0.0;
    for (int k = 1; k <= 50; ++k) cdf += std::exp(-double((2 * k - 1) * (2 * k - 1)) * c);
    cdf *= std::sqrt(2.0 * std::numbers::pi) / lambda;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    q += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-300) break;
  }
  return std::clamp(q, 0.0, 1.0);
}

KsResult ks_test(Vector samples, const std::function<double(double)>& cdf) {
  const Eigen::Index n = samples.size();
  if (n == 0) throw ShapeError("ks_test: no samples");
  std::sort(samples.data(), samples.data() + n);
  double d = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double f = cdf(samples(i));
    d = std::max({d, double(i + 1) / double(n) - f, f - double(i) / double(n)});
  }
  const double sn = std::sqrt(double(n));
  return {d, kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)};
}

std::pair<double, double> jeffreys_interval(long k, long n, double confidence) {
  if (n < 1 || k < 0 || k > n) throw DomainError("jeffreys_interval: need 0 <= k <= n, n >= 1");
  if (!(confidence > 0.0 && confidence < 1.0)) throw DomainError("jeffreys_interval: confidence must lie in (0,1)");
  const boost::math::beta_distribution<double> dist(double(k) + 0.5, double(n - k) + 0.5);
  const double lo = k == 0 ? 0.0 : boost::math::quantile(dist, 0.5 * (1.0 - confidence));
  const double hi = k == n ? 1.0 : boost::math::quantile(dist, 0.5 * (1.0 + confidence));
  return {lo, hi};
}

double chi_square_uniform_pvalue(const std::vector<long>& counts) {
  if (counts.size() < 2) throw DomainError("chi-square test needs at least two cells");
  const double total = double(std::accumulate(counts.begin(), counts.end(), 0L));
  if (!(total > 0.0)) throw DomainError("chi-square test on empty counts");
  const double expected = total / double(counts.size());
  double stat = 0.0;
  for (long c : counts) stat += (double(c) - expected) * (double(c) - expected) / expected;
  const boost::math::chi_squared_distribution<double> dist(double(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

// ---------------------------------------------------------------- SBC

RankStatistics sbc_ranks(const Matrix& thetas, const Matrix& draws, Eigen::Index n_post) {
  const Eigen::Index n = thetas.cols(), d = thetas.rows();
  require_same_shape(draws.rows(), draws.cols(), d, n * n_post, "sbc_ranks");
  RankStatistics r;
  r.n_post = n_post;
  r.ranks.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto block = draws.middleCols(i * n_post, n_post);
    for (Eigen::Index k = 0; k < d; ++k)
      r.ranks(i, k) = int((block.row(k).array() < thetas(k, i)).count());
  }
  return r;
}

RankStatistics run_sbc(const PosteriorSampler& sampler, const Task& task, Eigen::Index n_sbc, Eigen::Index n_post,
                       Rng& rng) {
  if (n_sbc < 1 || n_post < 1) throw ConfigError("SBC needs n_sbc >= 1 and n_post >= 1");
  const Matrix thetas = task.sample_prior(n_sbc, rng);
  const Matrix xs = task.simulate(thetas, rng);
  return sbc_ranks(thetas, sampler(xs, n_post, rng), n_post);
}

KsResult ks_uniformity(const Eigen::VectorXi& ranks, Eigen::Index n_post) {
  Vector u(ranks.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    if (ranks(i) < 0 || ranks(i) > n_post) throw DomainError("ks_uniformity: rank outside [0, n_post]");
    u(i) = (double(ranks(i)) + 0.5) / double(n_post + 1);
  }
  return ks_test(u, [](double v) { return std::clamp(v, 0.0, 1.0); });
}

// ---------------------------------------------------------------- TARP

double ECPCurve::fraction_within_band() const {
  if (alphas.size() == 0) return 0.0;
  Eigen::Index inside = 0;
  for (Eigen::Index i = 0; i < alphas.size(); ++i) inside += (alphas(i) >= lower(i) && alphas(i) <= upper(i)) ? 1 : 0;
  return double(inside) / double(alphas.size());
}

Vector uniform_alpha_grid(int n_points) {
  if (n_points < 1) throw ConfigError("alpha grid needs at least one point");
  Vector a(n_points);
  for (int i = 0; i < n_points; ++i) a(i) = (i + 1.0) / (n_points + 1.0);
  return a;
}

Matrix tarp_references(const Matrix& thetas, Rng& rng, double expand) {
  if (thetas.cols() == 0) throw ShapeError("tarp_references: no parameters");
  const Vector lo = thetas.rowwise().minCoeff(), hi = thetas.rowwise().maxCoeff();
  const Vector width = hi - lo;
  const Vector a = lo - expand * width, b = hi + expand * width;
  Matrix refs(thetas.rows(), thetas.cols());
  for (Eigen::Index j = 0; j < refs.cols(); ++j)
    for (Eigen::Index i = 0; i < refs.rows(); ++i) refs(i, j) = rng.uniform(a(i), b(i));
  return refs;
}

ECPCurve tarp_ecp(const Matrix& draws, Eigen::Index n_post, const Matrix& thetas, const Matrix& refs,
                  const Vector& alphas, double confidence) {
  const Eigen::Index n = thetas.cols(), d = thetas.rows();
  require_same_shape(draws.rows(), draws.cols(), d, n * n_post, "tarp_ecp draws");
  require_same_shape(refs.rows(), refs.cols(), d, n, "tarp_ecp refs");
  const Standardizer s = Standardizer::fit(thetas);
  const Matrix zd = s.apply(draws), zt = s.apply(thetas), zr = s.apply(refs);

  Vector f(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double true_dist = (zt.col(i) - zr.col(i)).squaredNorm();
    const auto block = zd.middleCols(i * n_post, n_post);
    const Eigen::Index closer = ((block.colwise() - zr.col(i)).colwise().squaredNorm().array() < true_dist).count();
    f(i) = double(closer) / double(n_post);
  }

  ECPCurve c;
  c.alphas = alphas;
  c.n = n;
  c.ecp.resize(alphas.size());
  c.lower.resize(alphas.size());
  c.upper.resize(alphas.size());
  for (Eigen::Index k = 0; k < alphas.size(); ++k) {
    const long hits = long((f.array() < alphas(k)).count());
    c.ecp(k) = double(hits) / double(n);
    const auto [lo, hi] = jeffreys_interval(hits, long(n), confidence);
    c.lower(k) = lo;
    c.upper(k) = hi;
  }
  return c;
}

// ---------------------------------------------------------------- C2ST

C2STResult c2st(const Matrix& a, const Matrix& b, Rng& rng, const C2STConfig& cfg) {
  if (a.rows() != b.rows()) throw ShapeError("c2st: sample dimensions differ");
  if (cfg.n_folds < 2) throw ConfigError("c2st needs at least 2 folds");
  const Eigen::Index m = std::min(a.cols(), b.cols());
  if (m < cfg.n_folds * 2) throw ConfigError("c2st: too few samples for the fold count");

  auto subsample = [&rng, m](const Matrix& s) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(s.cols()));
    std::iota(idx.begin(), idx.end(), Eigen::Index(0));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    Matrix out(s.rows(), m);
    for (Eigen::Index j = 0; j < m; ++j) out.col(j) = s.col(idx[std::size_t(j)]);
    return out;
  };
  Matrix pooled(a.rows(), 2 * m);
  pooled.leftCols(m) = subsample(a);
  pooled.rightCols(m) = subsample(b);
  pooled = Standardizer::fit(pooled).apply(pooled);
  Eigen::VectorXi labels(2 * m);
  labels.head(m).setZero();
  labels.tail(m).setOnes();

  // Stratified folds: shuffle within each class and deal round robin.
  std::vector<int> fold(static_cast<std::size_t>(2 * m));
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
    std::iota(idx.begin(), idx.end(), Eigen::Index(cls) * m);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t k = 0; k < idx.size(); ++k) fold[std::size_t(idx[k])] = int(k % std::size_t(cfg.n_folds));
  }

  C2STResult res;
  res.n_per_class = m;
  for (int k = 0; k < cfg.n_folds; ++k) {
    std::vector<Eigen::Index> tr, te;
    for (Eigen::Index j = 0; j < 2 * m; ++j) (fold[std::size_t(j)] == k ? te : tr).push_back(j);
    Matrix xtr(pooled.rows(), Eigen::Index(tr.size())), xte(pooled.rows(), Eigen::Index(te.size()));
    Eigen::VectorXi ytr(Eigen::Index(tr.size())), yte(Eigen::Index(te.size()));
    for (std::size_t i = 0; i < tr.size(); ++i) {
      xtr.col(Eigen::Index(i)) = pooled.col(tr[i]);
      ytr(Eigen::Index(i)) = labels(tr[i]);
    }
    for (std::size_t i = 0; i < te.size(); ++i) {
      xte.col(Eigen::Index(i)) = pooled.col(te[i]);
      yte(Eigen::Index(i)) = labels(te[i]);
    }
    BinaryClassifier clf(cfg.classifier);
    Rng r = rng.fork();
    clf.fit(xtr, ytr, r);
    res.fold_accuracies.push_back(clf.accuracy(xte, yte));
  }
  res.accuracy = std::accumulate(res.fold_accuracies.begin(), res.fold_accuracies.end(), 0.0) / cfg.n_folds;
  return res;
}

// ---------------------------------------------------------------- LC2ST

double lc2st_statistic(const Vector& p) {
  if (p.size() == 0) throw ShapeError("lc2st_statistic: no evaluation points");
  return (p.array() - 0.5).square().mean();
}

LC2STResult lc2st(const Matrix& cal_thetas, const Matrix& cal_xs, const Matrix& q_thetas, const Vector& x_obs,
                  const Matrix& obs_draws, Rng& rng, const LC2STConfig& cfg) {
  const Eigen::Index n = cal_thetas.cols();
  require_same_shape(q_thetas.rows(), q_thetas.cols(), cal_thetas.rows(), n, "lc2st q_thetas");
  if (cal_xs.cols() != n) throw ShapeError("lc2st: calibration theta/x counts differ");
  if (x_obs.size() != cal_xs.rows()) throw ShapeError("lc2st: observation dimension mismatch");
  if (obs_draws.rows() != cal_thetas.rows()) throw ShapeError("lc2st: posterior draw dimension mismatch");
  if (cfg.n_permutations < 1) throw ConfigError("lc2st needs at least one permutation");

  const Eigen::Index dt = cal_thetas.rows(), dx = cal_xs.rows();
  Matrix features(dt + dx, 2 * n);
  features.topLeftCorner(dt, n) = cal_thetas;
  features.topRightCorner(dt, n) = q_thetas;
  features.bottomLeftCorner(dx, n) = cal_xs;
  features.bottomRightCorner(dx, n) = cal_xs;
  const Standardizer s = Standardizer::fit(features);
  features = s.apply(features);
  Matrix eval(dt + dx, obs_draws.cols());
  eval.topRows(dt) = obs_draws;
  eval.bottomRows(dx) = x_obs.replicate(1, obs_draws.cols());
  eval = s.apply(eval);

  Eigen::VectorXi labels(2 * n);
  labels.head(n).setZero();
  labels.tail(n).setOnes();

  auto statistic = [&](const Eigen::VectorXi& y, Rng& r) {
    BinaryClassifier clf(cfg.classifier);
    clf.fit(features, y, r);
    // Probability of the joint-pair class.
    return lc2st_statistic((1.0 - clf.predict_proba(eval).array()).matrix());
  };

  LC2STResult res;
  Rng r0 = rng.fork();
  res.statistic = statistic(labels, r0);
  int exceed = 0;
  for (int p = 0; p < cfg.n_permutations; ++p) {
    Eigen::VectorXi perm = labels;
    std::shuffle(perm.data(), perm.data() + perm.size(), rng.engine());
    Rng r = rng.fork();
    const double null_stat = statistic(perm, r);
    res.null_statistics.push_back(null_stat);
    exceed += null_stat >= res.statistic ? 1 : 0;
  }
  res.p_value = double(exceed) / double(cfg.n_permutations);
  return res;
}

// ---------------------------------------------------------------- coverage

std::string to_string(IntervalMethod m) { return m == IntervalMethod::histogram ? "histogram" : "kde"; }

IntervalMethod interval_method_from_string(const std::string& s) {
  if (s == "histogram") return IntervalMethod::histogram;
  if (s == "kde") return IntervalMethod::kde;
  throw ConfigError("unknown interval method '" + s + "' (expected histogram|kde)");
}

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * double(v.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - double(lo);
  return (1.0 - w) * v[lo] + w * v[hi];
}

double silverman_bandwidth(const std::vector<double>& sorted) {
  const double n = double(sorted.size());
  double mean = 0.0;
  for (double v : sorted) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : sorted) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / std::max(1.0, n - 1.0));
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  if (!(spread > 0.0)) spread = 1e-12;
  return 0.9 * spread * std::pow(n, -0.2);
}

double kde_at(const std::vector<double>& samples, double h, double x) {
  double s = 0.0;
  for (double v : samples) {
    const double z = (x - v) / h;
    s += std::exp(-0.5 * z * z);
  }
  return s / (double(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace

bool in_credible_interval(const Vector& samples, double value, double alpha, IntervalMethod method) {
  if (samples.size() == 0) throw ShapeError("in_credible_interval: no samples");
  if (alpha >= 1.0) return true;
  if (alpha <= 0.0) return false;
  std::vector<double> v(samples.data(), samples.data() + samples.size());
  std::sort(v.begin(), v.end());
  if (method == IntervalMethod::histogram) {
    const double lo = quantile_sorted(v, 0.5 * (1.0 - alpha));
    const double hi = quantile_sorted(v, 0.5 * (1.0 + alpha));
    return value >= lo && value <= hi;
  }
  // Highest-density region of the KDE on a grid: the density level that
  // encloses mass alpha, compared against the density at the value.
  const double h = silverman_bandwidth(v);
  const int grid = 512;
  const double a = v.front() - 4.0 * h, b = v.back() + 4.0 * h;
  const double dx = (b - a) / (grid - 1);
  std::vector<double> dens(grid);
  for (int i = 0; i < grid; ++i) dens[std::size_t(i)] = kde_at(v, h, a + i * dx);
  std::vector<double> sorted = dens;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  double acc = 0.0, level = 0.0;
  for (double dv : sorted) {
    acc += dv;
    level = dv;
    if (acc >= alpha * total) break;
  }
  return kde_at(v, h, value) >= level;
}

std::vector<CoverageCurve> marginal_coverage(const Matrix& draws, Eigen::Index n_post, const Matrix& thetas,
                                             const Vector& alphas, IntervalMethod method, double confidence) {
  const Eigen::Index n = thetas.cols(), d = thetas.rows();
  require_same_shape(draws.rows(), draws.cols(), d, n * n_post, "marginal_coverage");
  std::vector<CoverageCurve> out;
  for (Eigen::Index k = 0; k < d; ++k) {
    CoverageCurve c;
    c.dim = k;
    c.n = n;
    c.alphas = alphas;
    c.coverage.resize(alphas.size());
    c.lower.resize(alphas.size());
    c.upper.resize(alphas.size());
    for (Eigen::Index a = 0; a < alphas.size(); ++a) {
      long hits = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Vector marg = draws.row(k).segment(i * n_post, n_post).transpose();
        hits += in_credible_interval(marg, thetas(k, i), alphas(a), method) ? 1 : 0;
      }
      c.coverage(a) = double(hits) / double(n);
      const auto [lo, hi] = jeffreys_interval(hits, long(n), confidence);
      c.lower(a) = lo;
      c.upper(a) = hi;
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------- output

void write_ecp_csv(const std::string& path, const ECPCurve& curve) {
  CsvTable t;
  t.header = {"alpha", "ecp", "lower", "upper"};
  t.values.resize(curve.alphas.size(), 4);
  t.values << curve.alphas, curve.ecp, curve.lower, curve.upper;
  write_csv(path, t);
}

void write_ranks_csv(const std::string& path, const RankStatistics& ranks) {
  CsvTable t;
  t.header = {"dim", "rank"};
  t.values.resize(ranks.ranks.size(), 2);
  Eigen::Index row = 0;
  for (Eigen::Index k = 0; k < ranks.ranks.cols(); ++k)
    for (Eigen::Index i = 0; i < ranks.ranks.rows(); ++i, ++row) t.values.row(row) << double(k), double(ranks.ranks(i, k));
  write_csv(path, t);
}

void write_c2st_csv(const std::string& path, const C2STResult& result) {
  CsvTable t;
  t.header = {"fold", "accuracy"};
  t.values.resize(Eigen::Index(result.fold_accuracies.size()), 2);
  for (std::size_t k = 0; k < result.fold_accuracies.size(); ++k)
    t.values.row(Eigen::Index(k)) << double(k), result.fold_accuracies[k];
  write_csv(path, t);
}

void write_coverage_csv(const std::string& path, const std::vector<CoverageCurve>& curves) {
  CsvTable t;
  t.header = {"dim", "alpha", "coverage", "lower", "upper"};
  Eigen::Index rows = 0;
  for (const auto& c : curves) rows += c.alphas.size();
  t.values.resize(rows, 5);
  Eigen::Index row = 0;
  for (const auto& c : curves)
    for (Eigen::Index a = 0; a < c.alphas.size(); ++a, ++row)
      t.values.row(row) << double(c.dim), c.alphas(a), c.coverage(a), c.lower(a), c.upper(a);
  write_csv(path, t);
}

}  // namespace densflow
