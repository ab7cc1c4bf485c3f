#pragma once

// Posterior validation: SBC ranks, TARP expected coverage, classifier
// two-sample tests (global and local) and marginal coverage.

#include "densflow/classifier.hpp"
#include "densflow/tasks.hpp"

#include <functional>
#include <string>
#include <vector>

namespace densflow {

/// Posterior draws for several observations at once. xs holds one
/// observation per column; the result holds n_per draws per observation,
/// observation k occupying columns [k * n_per, (k + 1) * n_per).
using PosteriorSampler = std::function<Matrix(const Matrix& xs, Eigen::Index n_per, Rng& rng)>;

/// Wraps a single-observation sampler.
PosteriorSampler per_observation_sampler(std::function<Matrix(const Vector& x, Eigen::Index n, Rng& rng)> fn);

// ---------------------------------------------------------------- tests

struct KsResult {
  double statistic;
  double p_value;
};

/// Asymptotic Kolmogorov survival function P(K > lambda).
double kolmogorov_survival(double lambda);

/// One-sample two-sided KS test against a continuous CDF.
KsResult ks_test(Vector samples, const std::function<double(double)>& cdf);

/// Binomial proportion confidence interval from Beta(k + 1/2, n - k + 1/2)
/// quantiles, with lower = 0 at k = 0 and upper = 1 at k = n.
std::pair<double, double> jeffreys_interval(long k, long n, double confidence = 0.95);

/// Pearson chi-square p-value of counts against equal cell probabilities.
double chi_square_uniform_pvalue(const std::vector<long>& counts);

// ---------------------------------------------------------------- SBC

struct RankStatistics {
  Eigen::MatrixXi ranks;  // n_sbc x d_theta, entries in [0, n_post]
  Eigen::Index n_post = 0;
};

RankStatistics run_sbc(const PosteriorSampler& sampler, const Task& task, Eigen::Index n_sbc, Eigen::Index n_post,
                       Rng& rng);

/// Ranks from given truths (d x n) and draws (d x n*n_post, blocked per truth).
RankStatistics sbc_ranks(const Matrix& thetas, const Matrix& draws, Eigen::Index n_post);

/// KS p-value of one rank column. Ranks are mapped to the midpoints
/// (rank + 1/2) / (n_post + 1) of n_post + 1 equal bins of [0, 1].
KsResult ks_uniformity(const Eigen::VectorXi& ranks, Eigen::Index n_post);

// ---------------------------------------------------------------- TARP

struct ECPCurve {
  Vector alphas;
  Vector ecp;
  Vector lower;
  Vector upper;
  Eigen::Index n = 0;

  /// Fraction of grid points whose nominal level lies inside [lower, upper].
  double fraction_within_band() const;
};

Vector uniform_alpha_grid(int n_points);

/// Uniform reference points over the bounding box of thetas, widened by
/// `expand` of the box width on every side.
Matrix tarp_references(const Matrix& thetas, Rng& rng, double expand = 0.1);

/// draws: d x (n_cal * n_post), blocked per calibration pair. Distances are
/// computed after standardising every dimension with the spread of thetas.
ECPCurve tarp_ecp(const Matrix& draws, Eigen::Index n_post, const Matrix& thetas, const Matrix& refs,
                  const Vector& alphas, double confidence = 0.95);

// ---------------------------------------------------------------- C2ST

struct C2STResult {
  double accuracy = 0.5;
  std::vector<double> fold_accuracies;
  Eigen::Index n_per_class = 0;
};

struct C2STConfig {
  int n_folds = 5;
  ClassifierConfig classifier;
};

/// a, b: d x n_a, d x n_b. The larger set is subsampled to equal size;
/// both are standardised with the pooled statistics.
C2STResult c2st(const Matrix& a, const Matrix& b, Rng& rng, const C2STConfig& cfg = {});

// ---------------------------------------------------------------- LC2ST

struct LC2STConfig {
  int n_permutations = 100;
  ClassifierConfig classifier;
};

struct LC2STResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::vector<double> null_statistics;
};

/// mean over evaluation points of (p - 1/2)^2.
double lc2st_statistic(const Vector& probabilities);

/// Class 0: joint pairs (cal_thetas, cal_xs). Class 1: (q_thetas, cal_xs)
/// with q_thetas drawn from the approximate posterior at each cal_xs.
/// The classifier is evaluated on (obs_draws, x_obs).
LC2STResult lc2st(const Matrix& cal_thetas, const Matrix& cal_xs, const Matrix& q_thetas, const Vector& x_obs,
                  const Matrix& obs_draws, Rng& rng, const LC2STConfig& cfg = {});

// ---------------------------------------------------------------- coverage

enum class IntervalMethod { histogram, kde };
std::string to_string(IntervalMethod m);
IntervalMethod interval_method_from_string(const std::string& s);

struct CoverageCurve {
  Eigen::Index dim = 0;
  Vector alphas;
  Vector coverage;
  Vector lower;
  Vector upper;
  Eigen::Index n = 0;
};

/// Whether `value` lies in the alpha-credible interval of the 1-D samples.
bool in_credible_interval(const Vector& samples, double value, double alpha, IntervalMethod method);

std::vector<CoverageCurve> marginal_coverage(const Matrix& draws, Eigen::Index n_post, const Matrix& thetas,
                                             const Vector& alphas, IntervalMethod method,
                                             double confidence = 0.95);

// ---------------------------------------------------------------- output

void write_ecp_csv(const std::string& path, const ECPCurve& curve);
void write_ranks_csv(const std::string& path, const RankStatistics& ranks);
void write_c2st_csv(const std::string& path, const C2STResult& result);
void write_coverage_csv(const std::string& path, const std::vector<CoverageCurve>& curves);

}  // namespace densflow
