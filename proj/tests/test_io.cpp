#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "densflow/benchmark.hpp"
#include "densflow/checkpoint.hpp"
#include "densflow/config.hpp"
#include "densflow/csv.hpp"
#include "densflow/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace densflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("densflow_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig quick_config(const std::string& task, Method method, Pipeline pipeline, int steps = 300) {
  RunConfig cfg;
  cfg.task = task;
  cfg.method = method;
  cfg.method_config.method = method;
  cfg.pipeline = pipeline;
  cfg.n_sims = 2000;
  FieldModelConfig mc;
  mc.hidden_width = 32;
  mc.depth = 2;
  mc.time_embed_dim = 16;
  mc.joint_mode = pipeline == Pipeline::joint;
  cfg.model = mc;
  cfg.train.total_steps = steps;
  cfg.train.warmup_steps = 20;
  cfg.train.eval_interval = 100;
  cfg.train.batch_size = 64;
  return cfg;
}

// Unconditional flow model whose network is still at its zero output.
TrainedModel identity_flow(Eigen::Index d) {
  TrainedModel m;
  m.pipeline = Pipeline::unconditional;
  m.d_theta = d;
  m.model_config.input_dim = int(d);
  m.model_config.cond_dim = 0;
  m.model_config.hidden_width = 8;
  m.model_config.depth = 1;
  m.model_config.time_embed_dim = 4;
  m.params = FieldModel<float>(m.model_config).init(0);
  m.theta_std = Standardizer::identity(d);
  m.x_std = Standardizer::identity(0);
  return m;
}

}  // namespace

TEST_CASE("CSV round trip") {
  const fs::path dir = scratch("csv");
  Rng rng(1);
  CsvTable t;
  t.header = {"a", "b", "c"};
  t.values = rng.normal(7, 3) * 1e3;
  write_csv(dir / "t.csv", t);
  const CsvTable back = read_csv(dir / "t.csv");
  CHECK(back.header == t.header);
  CHECK(back.values == t.values);
  CHECK(back.column("c") == 2);
  CHECK_THROWS(back.column("zz"));

  Dataset d{rng.normal(2, 5), rng.normal(3, 5)};
  write_dataset_csv((dir / "d.csv").string(), d);
  const Dataset dd = read_dataset_csv((dir / "d.csv").string());
  CHECK(dd.thetas == d.thetas);
  CHECK(dd.xs == d.xs);
}

TEST_CASE("run config JSON round trip and validation") {
  RunConfig cfg = quick_config("two_moons", Method::score_matching, Pipeline::joint);
  cfg.method_config.sde.kind = paths::SdeKind::ve;
  cfg.method_config.weighting = DsmWeighting::likelihood;
  SolverConfig s;
  s.kind = SolverKind::sm_pf_ode;
  s.churn.s_max = 5.0;
  cfg.solver = s;
  cfg.train.early_stop_ratio = std::numeric_limits<double>::infinity();
  const nlohmann::json j = to_json(cfg);
  const RunConfig back = run_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.train.early_stop_ratio == std::numeric_limits<double>::infinity());
  CHECK(back.method_config.sde.kind == paths::SdeKind::ve);

  nlohmann::json extra = j;
  extra["train"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(run_config_from_json(extra), ConfigError);
  nlohmann::json old = j;
  old["schema_version"] = 99;
  CHECK_THROWS_AS(run_config_from_json(old), ConfigError);
  nlohmann::json warm = j;
  warm["train"]["warmup_steps"] = warm["train"]["total_steps"];
  CHECK_THROWS_AS(run_config_from_json(warm).validate(), ConfigError);

  const fs::path dir = scratch("config");
  save_run_config(dir / "c.json", cfg);
  CHECK(to_json(load_run_config(dir / "c.json")) == j);
}

TEST_CASE("solver compatibility table") {
  CHECK(solver_compatible(Method::flow_matching, SolverKind::fm_ode));
  CHECK(solver_compatible(Method::flow_matching, SolverKind::fm_sde));
  CHECK(solver_compatible(Method::score_matching, SolverKind::sm_sde));
  CHECK(solver_compatible(Method::score_matching, SolverKind::sm_pf_ode));
  CHECK(solver_compatible(Method::diffusion_edm, SolverKind::edm_heun));
  CHECK_FALSE(solver_compatible(Method::diffusion_edm, SolverKind::fm_sde));
  CHECK_FALSE(solver_compatible(Method::flow_matching, SolverKind::edm_heun));
  try {
    require_solver_compatible(Method::diffusion_edm, SolverKind::fm_sde);
    FAIL("expected CompatibilityError");
  } catch (const CompatibilityError& e) {
    CHECK(std::string(e.what()).find("diffusion_edm") != std::string::npos);
    CHECK(std::string(e.what()).find("fm_sde") != std::string::npos);
  }
  CHECK(default_solver_steps(SolverKind::sm_sde) == 1000);
  CHECK(default_solver_steps(SolverKind::edm_heun) == 18);
  CHECK_THROWS_AS(require_log_prob_support(Method::diffusion_edm), CompatibilityError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const fs::path dir = scratch("ckpt");
  CheckpointData data;
  Rng rng(2);
  MatrixF a = rng.normal(4, 3).cast<float>();
  a(0, 0) = std::numeric_limits<float>::denorm_min();
  data.arrays.push_back({"a", a});
  data.metadata["note"] = "x";
  save_checkpoint(dir / "m.json", data);
  const CheckpointData back = load_checkpoint(dir / "m.json");
  CHECK(back.array("a") == a);
  CHECK(back.metadata["note"] == "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.json"), Error);

  // Corrupted blob is rejected.
  {
    std::ofstream out(dir / "checkpoint.bin", std::ios::binary | std::ios::trunc);
    out << "garbage";
  }
  CHECK_THROWS(load_checkpoint(dir / "m.json"));
}

TEST_CASE("train, save, load, sample") {
  const fs::path dir = scratch("pipeline");
  const RunConfig cfg = quick_config("two_moons", Method::flow_matching, Pipeline::conditional);
  const Dataset data = load_or_simulate(cfg);
  const TrainingRun run = train_model(cfg, data, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "manifest_best.json"));
  CHECK(fs::exists(dir / "history.csv"));
  CHECK(fs::exists(dir / "config.json"));
  const TrainedModel m = load_trained(dir);
  CHECK(m.params.flatten() == run.model.params.flatten());
  CHECK(m.step == 300);
  CHECK(m.task == "two_moons");

  const Matrix x = (Matrix(2, 1) << 0.1, 0.2).finished();
  Rng ra(3), rb(3);
  SolverConfig s;
  const Matrix da = sample(run.model, s, SampleMode::posterior, x, 50, ra);
  const Matrix db = sample(m, s, SampleMode::posterior, x, 50, rb);
  CHECK(da == db);
  CHECK(da.rows() == 2);
  CHECK(da.cols() == 50);

  SolverConfig edm;
  edm.kind = SolverKind::edm_heun;
  CHECK_THROWS_AS(sample(m, edm, SampleMode::posterior, x, 5, ra), CompatibilityError);
  CHECK_THROWS_AS(sample(m, s, SampleMode::likelihood, x, 5, ra), CompatibilityError);
  CHECK_THROWS_AS(as_score(m, Matrix()), CompatibilityError);

  // Resuming continues from the saved step.
  RunConfig more = cfg;
  more.train.total_steps = 400;
  const TrainingRun resumed = train_model(more, data, dir / "resumed", dir / "manifest.json");
  CHECK(resumed.result.state.step == 400);
  CHECK(resumed.result.state.history.front().step == 100);
  CHECK(resumed.result.state.history.back().step == 400);
}

TEST_CASE("joint checkpoints serve posterior, likelihood and joint modes") {
  const fs::path dir = scratch("joint");
  for (Method method : {Method::flow_matching, Method::score_matching, Method::diffusion_edm}) {
    const RunConfig cfg = quick_config("two_moons", method, Pipeline::joint, 200);
    const TrainingRun run = train_model(cfg, load_or_simulate(cfg), dir / to_string(method));
    const TrainedModel m = load_trained(dir / to_string(method));
    SolverConfig s;
    s.kind = default_solver(method);
    s.n_steps = 20;
    Rng rng(4);
    const Matrix post = sample(m, s, SampleMode::posterior, Matrix::Constant(2, 1, 0.1), 10, rng);
    const Matrix lik = sample(m, s, SampleMode::likelihood, Matrix::Constant(2, 1, 0.3), 10, rng);
    const Matrix joint = sample(m, s, SampleMode::joint, Matrix(), 10, rng);
    CHECK(post.rows() == 2);
    CHECK(lik.rows() == 2);
    CHECK(joint.rows() == 4);
    CHECK(post.allFinite());
    CHECK(lik.allFinite());
    CHECK(joint.allFinite());
  }
}

TEST_CASE("log densities") {
  const TrainedModel id = identity_flow(3);
  Rng rng(5);
  const Matrix pts = rng.normal(3, 10);
  LogProbOptions opt;
  const LogProbResult r = log_prob(id, pts, Matrix(), opt, rng);
  for (Eigen::Index j = 0; j < 10; ++j) CHECK(r.log_density(j) == doctest::Approx(standard_normal_log_pdf(pts.col(j))));

  // Standardisation enters through the log Jacobian.
  TrainedModel scaled = id;
  scaled.theta_std.std = Vector::Constant(3, 2.0);
  const LogProbResult rs = log_prob(scaled, pts, Matrix(), opt, rng);
  for (Eigen::Index j = 0; j < 10; ++j)
    CHECK(rs.log_density(j) == doctest::Approx(standard_normal_log_pdf(pts.col(j) / 2.0) - 3 * std::log(2.0)));

  TrainedModel edm = id;
  edm.method = Method::diffusion_edm;
  CHECK_THROWS_AS(log_prob(edm, pts, Matrix(), opt, rng), CompatibilityError);

  // Exact and Hutchinson agree on a trained conditional model.
  const fs::path dir = scratch("logprob");
  const RunConfig cfg = quick_config("two_moons", Method::flow_matching, Pipeline::conditional);
  const TrainingRun run = train_model(cfg, load_or_simulate(cfg), std::nullopt);
  const Matrix th = rng.uniform(Eigen::Index(2), Eigen::Index(10)).array() * 2.0 - 1.0;
  const Matrix x = (Matrix(2, 1) << 0.0, 0.1).finished();
  const LogProbResult e = log_prob(run.model, th, x, opt, rng);
  LogProbOptions h = opt;
  h.divergence = Divergence::hutchinson;
  h.n_probes = 256;
  const LogProbResult hr = log_prob(run.model, th, x, h, rng);
  for (Eigen::Index j = 0; j < 10; ++j)
    CHECK(std::abs(e.log_density(j) - hr.log_density(j)) <= 3 * hr.standard_error(j) + 1e-9);
}

TEST_CASE("benchmark runs are deterministic") {
  BenchmarkOptions opt;
  opt.task = "two_moons";
  opt.budget = 1000;
  opt.total_steps = 200;
  opt.n_obs = 2;
  opt.c2st_samples = 200;
  opt.tarp_pairs = 50;
  opt.tarp_draws = 20;
  const fs::path dir = scratch("bench");
  const BenchmarkRow a = run_benchmark(opt, dir / "a");
  const BenchmarkRow b = run_benchmark(opt, dir / "b");
  CHECK(a.csv_row() == b.csv_row());
  CHECK(slurp(dir / "a" / "results.csv") == slurp(dir / "b" / "results.csv"));
  CHECK(a.c2st_mean >= 0.0);
  CHECK(a.c2st_mean <= 1.0);
}
