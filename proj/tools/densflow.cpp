// densflow: simulate, train, sample, evaluate log densities, run posterior
// diagnostics and benchmarks from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include "densflow/benchmark.hpp"
#include "densflow/csv.hpp"
#include "densflow/diagnostics.hpp"
#include "densflow/pipeline.hpp"
#include "densflow/tasks.hpp"

#include "CLI11.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace densflow;

namespace {

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

Vector parse_vector(const std::string& text, const std::string& flag) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size() && item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a number");
    }
  }
  if (values.empty()) throw UsageError(flag + " is empty");
  return Eigen::Map<const Vector>(values.data(), Eigen::Index(values.size()));
}

void apply_thread_cap() {
  if (const char* env = std::getenv("DENSFLOW_THREADS")) {
    int n = 0;
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw UsageError("DENSFLOW_THREADS must be a positive integer");
    }
    if (n < 1) throw UsageError("DENSFLOW_THREADS must be a positive integer");
    Eigen::setNbThreads(n);
  }
}

struct SolverFlags {
  std::string kind;
  std::string ode_method = "euler";
  int steps = 0;
  std::string variant = "zero_ends";
  double alpha = 0.5;
  double s_churn = 0.0, s_min = 0.0, s_max = std::numeric_limits<double>::infinity(), s_noise = 1.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--solver", kind, "fm_ode | fm_sde | sm_sde | sm_pf_ode | edm_heun (default per method)");
    cmd->add_option("--ode-method", ode_method, "euler | midpoint | heun");
    cmd->add_option("--steps", steps, "Solver steps (0 = method default)");
    cmd->add_option("--variant", variant, "zero_ends | non_singular (fm_sde)");
    cmd->add_option("--alpha", alpha, "Diffusion scale of fm_sde");
    cmd->add_option("--s-churn", s_churn, "EDM churn");
    cmd->add_option("--s-min", s_min, "EDM churn lower sigma");
    cmd->add_option("--s-max", s_max, "EDM churn upper sigma");
    cmd->add_option("--s-noise", s_noise, "EDM churn noise scale");
  }

  SolverConfig build(Method method) const {
    SolverConfig s;
    s.kind = kind.empty() ? default_solver(method) : solver_kind_from_string(kind);
    s.ode_method = ode_method_from_string(ode_method);
    s.n_steps = steps;
    s.variant = fm_sde_variant_from_string(variant);
    s.alpha = alpha;
    s.churn = {s_churn, s_min, s_max, s_noise};
    s.validate();
    require_solver_compatible(method, s.kind);
    return s;
  }
};

fs::path run_dir_of(const fs::path& checkpoint) {
  return fs::is_directory(checkpoint) ? checkpoint : checkpoint.parent_path();
}

// ---------------------------------------------------------------- commands

int cmd_simulate(const std::string& task_name, Eigen::Index n, std::uint64_t seed, const std::string& out) {
  const auto task = make_task(task_name);
  const Dataset d = generate_dataset(*task, n, seed);
  write_dataset_csv(out, d);
  std::cout << "wrote " << n << " simulations of " << task_name << " to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& resume, const std::string& out_override) {
  RunConfig cfg = load_run_config(config);
  if (!out_override.empty()) cfg.output_dir = out_override;
  cfg.validate();
  const Dataset data = load_or_simulate(cfg);
  std::optional<fs::path> res;
  if (!resume.empty()) res = resume;
  const TrainingRun run = train_model(cfg, data, fs::path(cfg.output_dir), res);
  const auto& h = run.result.state.history;
  std::cout << "trained " << to_string(cfg.method) << " / " << to_string(cfg.pipeline) << " on " << cfg.task
            << " for " << run.result.state.step << " steps";
  if (!h.empty()) std::cout << " (final val loss " << h.back().val_loss << ")";
  if (run.result.early_stopped) std::cout << ", stopped early";
  std::cout << "\ncheckpoint: " << (fs::path(cfg.output_dir) / "manifest.json").string() << "\n";
  return 0;
}

void write_generated(const std::string& path, const TrainedModel& m, SampleMode mode, const Matrix& draws) {
  if (m.pipeline == Pipeline::joint && mode == SampleMode::joint) {
    CsvTable t;
    t.header = indexed_names("theta", m.d_theta);
    const auto xn = indexed_names("x", m.d_x);
    t.header.insert(t.header.end(), xn.begin(), xn.end());
    t.values = draws.transpose();
    write_csv(path, t);
    return;
  }
  write_samples_csv(path, mode == SampleMode::likelihood ? "x" : "theta", draws);
}

int cmd_sample(const std::string& checkpoint, const std::string& mode_name, const std::string& observation,
               const std::string& theta, Eigen::Index n, const SolverFlags& flags, std::uint64_t seed,
               const std::string& out, const std::string& trajectory_path) {
  const TrainedModel m = load_trained(checkpoint);
  const SolverConfig solver = flags.build(m.method);
  SampleMode mode = m.pipeline == Pipeline::unconditional ? SampleMode::joint : SampleMode::posterior;
  if (!mode_name.empty()) mode = sample_mode_from_string(mode_name);

  Matrix given;
  if (m.pipeline != Pipeline::unconditional && mode == SampleMode::posterior) {
    if (observation.empty()) throw UsageError("posterior sampling needs --observation");
    given = parse_vector(observation, "--observation");
    if (given.rows() != m.d_x)
      throw UsageError("--observation needs " + std::to_string(m.d_x) + " values, got " + std::to_string(given.rows()));
  } else if (mode == SampleMode::likelihood) {
    if (theta.empty()) throw UsageError("likelihood sampling needs --theta");
    given = parse_vector(theta, "--theta");
    if (given.rows() != m.d_theta)
      throw UsageError("--theta needs " + std::to_string(m.d_theta) + " values, got " + std::to_string(given.rows()));
  }

  Rng rng(seed);
  Trajectory traj;
  const Matrix draws = sample(m, solver, mode, given, n, rng, trajectory_path.empty() ? nullptr : &traj);
  fs::path dest = out.empty() ? run_dir_of(checkpoint) / "samples" / (to_string(mode) + ".csv") : fs::path(out);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_generated(dest.string(), m, mode, draws);
  if (!trajectory_path.empty()) write_trajectory_csv(trajectory_path, traj);
  std::cout << "wrote " << draws.cols() << " " << to_string(mode) << " samples (" << to_string(solver.kind) << ", "
            << solver.steps() << " steps) to " << dest.string() << "\n";
  return 0;
}

int cmd_logprob(const std::string& checkpoint, const std::string& points, const std::string& observation,
                const std::string& divergence, int probes, int steps, std::uint64_t seed, const std::string& out) {
  const TrainedModel m = load_trained(checkpoint);
  require_log_prob_support(m.method);
  const CsvTable t = read_csv(points);
  Matrix thetas(m.d_theta, t.values.rows());
  for (Eigen::Index i = 0; i < m.d_theta; ++i) thetas.row(i) = t.values.col(t.column("theta_" + std::to_string(i))).transpose();
  Matrix xs;
  if (m.pipeline != Pipeline::unconditional) {
    if (!observation.empty()) {
      xs = parse_vector(observation, "--observation");
      if (xs.rows() != m.d_x) throw UsageError("--observation needs " + std::to_string(m.d_x) + " values");
    } else {
      xs.resize(m.d_x, t.values.rows());
      for (Eigen::Index i = 0; i < m.d_x; ++i) {
        const auto name = "x_" + std::to_string(i);
        bool found = false;
        for (const auto& h : t.header) found = found || h == name;
        if (!found) throw UsageError("conditional log densities need --observation or x_* columns in --points");
        xs.row(i) = t.values.col(t.column(name)).transpose();
      }
    }
  }
  LogProbOptions opt;
  opt.divergence = divergence_from_string(divergence);
  opt.n_probes = probes;
  opt.n_steps = steps;
  Rng rng(seed);
  const LogProbResult r = log_prob(m, thetas, xs, opt, rng);
  CsvTable o;
  o.header = {"log_prob", "standard_error"};
  o.values.resize(r.log_density.size(), 2);
  o.values << r.log_density, r.standard_error;
  const fs::path dest = out.empty() ? run_dir_of(checkpoint) / "logprob.csv" : fs::path(out);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  write_csv(dest, o);
  std::cout << "wrote " << r.log_density.size() << " log densities (" << to_string(opt.divergence) << ") to "
            << dest.string() << "\n";
  return 0;
}

struct DiagnoseFlags {
  std::string checkpoint, task, suite = "all", out, interval = "histogram";
  bool reference = false;
  Eigen::Index n_sbc = 200, n_post = 100, n_cal = 500, c2st_samples = 1000, lc2st_cal = 1000;
  int n_obs = 10, permutations = 100;
  std::uint64_t seed = 0;
  SolverFlags solver;
};

struct SummaryLine {
  std::string suite, metric;
  double value;
  bool pass;
};

int cmd_diagnose(const DiagnoseFlags& f) {
  const std::set<std::string> suites = {"sbc", "tarp", "c2st", "lc2st", "coverage", "all"};
  if (!suites.count(f.suite)) throw UsageError("unknown suite '" + f.suite + "' (sbc|tarp|c2st|lc2st|coverage|all)");
  if (f.checkpoint.empty() && !f.reference) throw UsageError("diagnose needs --checkpoint or --reference-sampler");

  std::optional<TrainedModel> model;
  std::string task_name = f.task;
  if (!f.checkpoint.empty()) {
    model = load_trained(f.checkpoint);
    if (task_name.empty()) task_name = model->task;
  }
  if (task_name.empty()) throw UsageError("diagnose needs --task");
  const auto task = make_task(task_name);
  const bool all = f.suite == "all";
  if ((f.suite == "c2st" || f.suite == "lc2st" || f.reference) && task->reference_kind() == ReferenceKind::none)
    throw UsageError("task '" + task_name + "' has no reference posterior");
  if (task->x_dim() == 0) throw UsageError("task '" + task_name + "' is unconditional; posterior diagnostics do not apply");

  PosteriorSampler sampler;
  if (f.reference) sampler = reference_posterior_sampler(*task);
  else sampler = model_posterior_sampler(*model, f.solver.build(model->method));

  const fs::path out = !f.out.empty() ? fs::path(f.out)
                       : f.checkpoint.empty() ? fs::path("diagnostics") : run_dir_of(f.checkpoint) / "diagnostics";
  fs::create_directories(out);
  Rng rng(f.seed);
  std::vector<SummaryLine> lines;
  std::string c2st_line;

  if (all || f.suite == "sbc") {
    Rng r = rng.split(1);
    const RankStatistics ranks = run_sbc(sampler, *task, f.n_sbc, f.n_post, r);
    write_ranks_csv((out / "sbc_ranks.csv").string(), ranks);
    int passing = 0;
    for (Eigen::Index k = 0; k < ranks.ranks.cols(); ++k) {
      const double p = ks_uniformity(ranks.ranks.col(k), ranks.n_post).p_value;
      passing += p > 0.01 ? 1 : 0;
      lines.push_back({"sbc", "ks_p_dim" + std::to_string(k), p, p > 0.01});
    }
    const double frac = double(passing) / double(ranks.ranks.cols());
    lines.push_back({"sbc", "fraction_dims_p>0.01", frac, frac >= 0.9});
  }
  if (all || f.suite == "tarp") {
    Rng r = rng.split(2);
    const Matrix thetas = task->sample_prior(f.n_cal, r);
    const Matrix xs = task->simulate(thetas, r);
    const Matrix draws = sampler(xs, f.n_post, r);
    const ECPCurve ecp = tarp_ecp(draws, f.n_post, thetas, tarp_references(thetas, r), uniform_alpha_grid(50));
    write_ecp_csv((out / "tarp_ecp.csv").string(), ecp);
    lines.push_back({"tarp", "fraction_alpha_in_band", ecp.fraction_within_band(), ecp.fraction_within_band() >= 0.9});
  }
  if (all || f.suite == "coverage") {
    Rng r = rng.split(3);
    const Eigen::Index n_cal = f.n_cal;
    const Matrix thetas = task->sample_prior(n_cal, r);
    const Matrix xs = task->simulate(thetas, r);
    const Matrix draws = sampler(xs, f.n_post, r);
    const auto curves =
        marginal_coverage(draws, f.n_post, thetas, uniform_alpha_grid(20), interval_method_from_string(f.interval));
    write_coverage_csv((out / "coverage.csv").string(), curves);
    // Each curve is a running proportion over the same pairs, so pointwise
    // bands are crossed often by chance. The pass flag treats the largest
    // deviation as a Kolmogorov statistic, Bonferroni-corrected over dims.
    const double level = 0.01 / double(curves.size());
    for (const auto& c : curves) {
      const double dev = (c.coverage - c.alphas).cwiseAbs().maxCoeff();
      const double p = kolmogorov_survival(std::sqrt(double(n_cal)) * dev);
      lines.push_back({"coverage", "deviation_p_dim" + std::to_string(c.dim), p, p > level});
    }
  }
  if ((all && task->reference_kind() != ReferenceKind::none) || f.suite == "c2st") {
    Rng r = rng.split(4);
    const C2STSummary s = c2st_over_observations(sampler, *task, f.n_obs, f.c2st_samples, r);
    CsvTable t;
    t.header = {"observation", "accuracy"};
    t.values.resize(Eigen::Index(s.per_observation.size()), 2);
    for (std::size_t k = 0; k < s.per_observation.size(); ++k) t.values.row(Eigen::Index(k)) << double(k), s.per_observation[k];
    write_csv(out / "c2st.csv", t);
    lines.push_back({"c2st", "mean_accuracy", s.mean, s.mean <= 0.6});
    lines.push_back({"c2st", "std_accuracy", s.std, true});
    c2st_line = "C2ST over " + std::to_string(f.n_obs) + " test observations: " + format_number(s.mean) + " +- " +
                format_number(s.std);
  }
  if (all || f.suite == "lc2st") {
    Rng r = rng.split(5);
    const Matrix thetas = task->sample_prior(f.lc2st_cal, r);
    const Matrix xs = task->simulate(thetas, r);
    const Matrix q = sampler(xs, 1, r);
    const Vector x_obs = task->observation(0).x;
    const Matrix obs_draws = sampler(x_obs, 1000, r);
    LC2STConfig lc;
    lc.n_permutations = f.permutations;
    const LC2STResult res = lc2st(thetas, xs, q, x_obs, obs_draws, r, lc);
    lines.push_back({"lc2st", "statistic", res.statistic, true});
    lines.push_back({"lc2st", "p_value", res.p_value, res.p_value > 0.05});
  }

  std::ostringstream summary;
  summary << "suite,metric,value,pass\n";
  std::cout << "suite      metric                      value       pass\n";
  for (const auto& l : lines) {
    summary << l.suite << "," << l.metric << "," << format_number(l.value) << "," << (l.pass ? "true" : "false") << "\n";
    std::cout << std::left << std::setw(11) << l.suite << std::setw(28) << l.metric << std::setw(12) << l.value
              << (l.pass ? "pass" : "FAIL") << "\n";
  }
  if (!c2st_line.empty()) std::cout << c2st_line << "\n";
  write_file_atomic(out / "summary.csv", summary.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"densflow: neural posterior estimation with flow matching, score matching and EDM diffusion"};
  app.require_subcommand(1);

  // simulate
  std::string sim_task, sim_out = "dataset.csv";
  Eigen::Index sim_n = 1000;
  std::uint64_t sim_seed = 0;
  auto* sim = app.add_subcommand("simulate", "Draw parameters from the prior and simulate observations");
  sim->add_option("--task", sim_task, "two_moons | gaussian_linear | gaussian_mixture | checkerboard")->required();
  sim->add_option("--n", sim_n, "Number of simulations");
  sim->add_option("--seed", sim_seed, "Random seed");
  sim->add_option("--out", sim_out, "Output CSV");

  // train
  std::string train_config, train_resume, train_out;
  auto* tr = app.add_subcommand("train", "Train a model from a JSON run config");
  tr->add_option("--config", train_config, "Run config (JSON)")->required();
  tr->add_option("--resume", train_resume, "Checkpoint manifest or run directory to continue from");
  tr->add_option("--output-dir", train_out, "Override the config's output directory");

  // sample
  std::string smp_ckpt, smp_mode, smp_obs, smp_theta, smp_out, smp_traj;
  Eigen::Index smp_n = 1000;
  std::uint64_t smp_seed = 0;
  SolverFlags smp_solver;
  auto* smp = app.add_subcommand("sample", "Generate posterior, likelihood or joint samples");
  smp->add_option("--checkpoint", smp_ckpt, "Checkpoint manifest or run directory")->required();
  smp->add_option("--mode", smp_mode, "posterior | likelihood | joint");
  smp->add_option("--observation", smp_obs, "Observed x, comma separated (posterior mode)");
  smp->add_option("--theta", smp_theta, "Fixed theta, comma separated (likelihood mode)");
  smp->add_option("--n", smp_n, "Number of samples");
  smp->add_option("--seed", smp_seed, "Random seed");
  smp->add_option("--out", smp_out, "Output CSV (default <run>/samples/<mode>.csv)");
  smp->add_option("--trajectory", smp_traj, "Optional trajectory CSV");
  smp_solver.add(smp);

  // logprob
  std::string lp_ckpt, lp_points, lp_obs, lp_div = "exact", lp_out;
  int lp_probes = 64, lp_steps = 200;
  std::uint64_t lp_seed = 0;
  auto* lp = app.add_subcommand("logprob", "Evaluate log densities by the change-of-variables formula");
  lp->add_option("--checkpoint", lp_ckpt, "Checkpoint manifest or run directory")->required();
  lp->add_option("--points", lp_points, "CSV with theta_* (and optionally x_*) columns")->required();
  lp->add_option("--observation", lp_obs, "Observed x shared by all points");
  lp->add_option("--divergence", lp_div, "exact | hutchinson");
  lp->add_option("--probes", lp_probes, "Hutchinson probes");
  lp->add_option("--steps", lp_steps, "Integration steps");
  lp->add_option("--seed", lp_seed, "Random seed");
  lp->add_option("--out", lp_out, "Output CSV (default <run>/logprob.csv)");

  // diagnose
  DiagnoseFlags dg;
  auto* dgc = app.add_subcommand("diagnose", "Run SBC, TARP, C2ST, LC2ST and marginal coverage");
  dgc->add_option("--checkpoint", dg.checkpoint, "Checkpoint manifest or run directory");
  dgc->add_flag("--reference-sampler", dg.reference, "Diagnose the task's reference posterior instead of a model");
  dgc->add_option("--task", dg.task, "Task (default: the checkpoint's task)");
  dgc->add_option("--suite", dg.suite, "sbc | tarp | c2st | lc2st | coverage | all");
  dgc->add_option("--interval", dg.interval, "Coverage intervals: histogram | kde");
  dgc->add_option("--n-sbc", dg.n_sbc, "SBC calibration pairs");
  dgc->add_option("--n-post", dg.n_post, "Posterior draws per calibration pair");
  dgc->add_option("--n-cal", dg.n_cal, "TARP calibration pairs");
  dgc->add_option("--n-obs", dg.n_obs, "C2ST test observations");
  dgc->add_option("--c2st-samples", dg.c2st_samples, "C2ST samples per class");
  dgc->add_option("--lc2st-cal", dg.lc2st_cal, "LC2ST calibration pairs");
  dgc->add_option("--permutations", dg.permutations, "LC2ST permutations");
  dgc->add_option("--seed", dg.seed, "Random seed");
  dgc->add_option("--out-dir", dg.out, "Output directory (default <run>/diagnostics)");
  dg.solver.add(dgc);

  // benchmark
  BenchmarkOptions bo;
  std::string bo_method = "flow_matching", bo_pipeline = "conditional", bo_out;
  int bo_steps = 0;
  auto* bm = app.add_subcommand("benchmark", "Simulate, train, sample and score against the reference posterior");
  bm->add_option("--task", bo.task, "Task")->required();
  bm->add_option("--budget", bo.budget, "Simulation budget");
  bm->add_option("--method", bo_method, "flow_matching | score_matching | diffusion_edm");
  bm->add_option("--pipeline", bo_pipeline, "conditional | joint");
  bm->add_option("--seed", bo.seed, "Random seed");
  bm->add_option("--train-steps", bo_steps, "Training steps (default from the training config)");
  bm->add_option("--c2st-samples", bo.c2st_samples, "C2ST samples per class");
  bm->add_option("--out-dir", bo_out, "Run directory for artifacts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    apply_thread_cap();
    if (*sim) return cmd_simulate(sim_task, sim_n, sim_seed, sim_out);
    if (*tr) return cmd_train(train_config, train_resume, train_out);
    if (*smp) return cmd_sample(smp_ckpt, smp_mode, smp_obs, smp_theta, smp_n, smp_solver, smp_seed, smp_out, smp_traj);
    if (*lp) return cmd_logprob(lp_ckpt, lp_points, lp_obs, lp_div, lp_probes, lp_steps, lp_seed, lp_out);
    if (*dgc) return cmd_diagnose(dg);
    if (*bm) {
      bo.method = method_from_string(bo_method);
      bo.pipeline = pipeline_from_string(bo_pipeline);
      if (bo.pipeline == Pipeline::unconditional) throw UsageError("benchmark needs the conditional or joint pipeline");
      if (bo_steps > 0) bo.total_steps = bo_steps;
      std::optional<fs::path> out;
      if (!bo_out.empty()) out = bo_out;
      const BenchmarkRow row = run_benchmark(bo, out);
      std::cout << BenchmarkRow::csv_header() << "\n" << row.csv_row() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
