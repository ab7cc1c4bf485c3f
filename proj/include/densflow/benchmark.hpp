#pragma once

// End-to-end evaluation helpers: posterior samplers from trained models,
// C2ST averaged over the fixed test observations, and the benchmark run.

#include "densflow/diagnostics.hpp"
#include "densflow/pipeline.hpp"
#include "densflow/tasks.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace densflow {

PosteriorSampler model_posterior_sampler(const TrainedModel& m, const SolverConfig& solver);
PosteriorSampler reference_posterior_sampler(const Task& task);

struct C2STSummary {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_observation;
};

/// C2ST of sampler draws against the task reference at observations
/// 0 .. n_obs-1, n_samples draws per side.
C2STSummary c2st_over_observations(const PosteriorSampler& sampler, const Task& task, int n_obs, Eigen::Index n_samples,
                                   Rng& rng, const C2STConfig& cfg = {});

struct BenchmarkOptions {
  std::string task = "two_moons";
  Eigen::Index budget = 10000;
  Method method = Method::flow_matching;
  Pipeline pipeline = Pipeline::conditional;
  std::uint64_t seed = 0;
  std::optional<int> total_steps;
  int n_obs = 10;
  Eigen::Index c2st_samples = 1000;
  Eigen::Index tarp_pairs = 200;
  Eigen::Index tarp_draws = 100;
};

struct BenchmarkRow {
  std::string task, method, pipeline;
  Eigen::Index budget = 0;
  std::uint64_t seed = 0;
  double c2st_mean = 0.0;
  double c2st_std = 0.0;
  double tarp_within_band = 0.0;
  int train_steps = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

RunConfig benchmark_run_config(const BenchmarkOptions& opt);
BenchmarkRow run_benchmark(const BenchmarkOptions& opt, const std::optional<std::filesystem::path>& out_dir);

}  // namespace densflow
