#include "densflow/benchmark.hpp"

#include "densflow/csv.hpp"

#include <cmath>
#include <numeric>

namespace densflow {

PosteriorSampler model_posterior_sampler(const TrainedModel& m, const SolverConfig& solver) {
  return [&m, solver](const Matrix& xs, Eigen::Index n_per, Rng& rng) {
    return sample(m, solver, SampleMode::posterior, xs, n_per, rng);
  };
}

PosteriorSampler reference_posterior_sampler(const Task& task) {
  return per_observation_sampler(
      [&task](const Vector& x, Eigen::Index n, Rng& rng) { return task.reference_posterior(x, n, rng); });
}

C2STSummary c2st_over_observations(const PosteriorSampler& sampler, const Task& task, int n_obs, Eigen::Index n_samples,
                                   Rng& rng, const C2STConfig& cfg) {
  if (task.reference_kind() == ReferenceKind::none)
    throw ConfigError("task '" + task.name() + "' has no reference posterior; C2ST is unavailable");
  if (n_obs < 1) throw ConfigError("C2ST needs at least one observation");
  Matrix xs(task.x_dim(), n_obs);
  for (int k = 0; k < n_obs; ++k) xs.col(k) = task.observation(k).x;
  const Matrix draws = sampler(xs, n_samples, rng);

  C2STSummary s;
  for (int k = 0; k < n_obs; ++k) {
    const Matrix ref = task.reference_posterior(xs.col(k), n_samples, rng);
    s.per_observation.push_back(c2st(draws.middleCols(k * n_samples, n_samples), ref, rng, cfg).accuracy);
  }
  const double n = double(n_obs);
  s.mean = std::accumulate(s.per_observation.begin(), s.per_observation.end(), 0.0) / n;
  double var = 0.0;
  for (double a : s.per_observation) var += (a - s.mean) * (a - s.mean);
  s.std = n_obs > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return s;
}

std::string BenchmarkRow::csv_header() {
  return "task,method,pipeline,budget,seed,train_steps,c2st_mean,c2st_std,tarp_within_band";
}

std::string BenchmarkRow::csv_row() const {
  return task + "," + method + "," + pipeline + "," + std::to_string(budget) + "," + std::to_string(seed) + "," +
         std::to_string(train_steps) + "," + format_number(c2st_mean) + "," + format_number(c2st_std) + "," +
         format_number(tarp_within_band);
}

RunConfig benchmark_run_config(const BenchmarkOptions& opt) {
  RunConfig cfg;
  cfg.task = opt.task;
  cfg.method = opt.method;
  cfg.method_config.method = opt.method;
  cfg.pipeline = opt.pipeline;
  cfg.n_sims = opt.budget;
  cfg.seed = opt.seed;
  cfg.train.seed = opt.seed;
  if (opt.total_steps) {
    cfg.train.total_steps = *opt.total_steps;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, std::max(0, *opt.total_steps / 10));
    cfg.train.eval_interval = std::min(cfg.train.eval_interval, std::max(1, *opt.total_steps / 10));
  }
  return cfg;
}

BenchmarkRow run_benchmark(const BenchmarkOptions& opt, const std::optional<std::filesystem::path>& out_dir) {
  const auto task = make_task(opt.task);
  if (task->reference_kind() == ReferenceKind::none)
    throw ConfigError("task '" + opt.task + "' has no reference posterior to benchmark against");
  const RunConfig cfg = benchmark_run_config(opt);
  const Dataset data = generate_dataset(*task, opt.budget, opt.seed);
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_dataset_csv((*out_dir / "dataset.csv").string(), data);
  }
  const TrainingRun run = train_model(cfg, data, out_dir);
  const SolverConfig solver = cfg.solver_or_default();
  const PosteriorSampler sampler = model_posterior_sampler(run.model, solver);

  Rng rng = Rng(opt.seed).split(0xbe7c4u);
  const C2STSummary c = c2st_over_observations(sampler, *task, opt.n_obs, opt.c2st_samples, rng);

  const Matrix thetas = task->sample_prior(opt.tarp_pairs, rng);
  const Matrix xs = task->simulate(thetas, rng);
  const Matrix draws = sampler(xs, opt.tarp_draws, rng);
  const Matrix refs = tarp_references(thetas, rng);
  const ECPCurve ecp = tarp_ecp(draws, opt.tarp_draws, thetas, refs, uniform_alpha_grid(50));

  BenchmarkRow row;
  row.task = opt.task;
  row.method = to_string(opt.method);
  row.pipeline = to_string(opt.pipeline);
  row.budget = opt.budget;
  row.seed = opt.seed;
  row.c2st_mean = c.mean;
  row.c2st_std = c.std;
  row.tarp_within_band = ecp.fraction_within_band();
  row.train_steps = run.result.state.step;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir / "diagnostics");
    write_ecp_csv((*out_dir / "diagnostics" / "tarp.csv").string(), ecp);
    write_file_atomic(*out_dir / "results.csv", BenchmarkRow::csv_header() + "\n" + row.csv_row() + "\n");
  }
  return row;
}

}  // namespace densflow
