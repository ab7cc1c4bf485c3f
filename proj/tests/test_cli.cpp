#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "densflow/csv.hpp"
#include "densflow/pipeline.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace densflow;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(DENSFLOW_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::current_path() / "cli_work";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

void write_config(const std::string& file, const std::string& task, const std::string& method,
                  const std::string& pipeline, int steps, const std::string& out) {
  std::ofstream f(file);
  f << R"({"schema_version": 1, "task": ")" << task << R"(", "method": ")" << method << R"(", "pipeline": ")"
    << pipeline << R"(", "n_sims": 2000, "seed": 3, "output_dir": ")" << out
    << R"(", "model": {"hidden_width": 32, "depth": 2, "time_embed_dim": 16},
        "train": {"total_steps": )"
    << steps << R"(, "warmup_steps": 50, "eval_interval": 100, "batch_size": 128}})";
}

// Trains once per (method, pipeline) and reuses the run directory.
std::string trained(const std::string& method, const std::string& pipeline, int steps = 300) {
  const std::string name = "run_" + method + "_" + pipeline;
  if (!fs::exists(workdir() / name / "manifest.json")) {
    write_config(path(name + ".json"), "two_moons", method, pipeline, steps, path(name));
    const Run r = run("train --config " + path(name + ".json"));
    REQUIRE_MESSAGE(r.code == 0, r.output);
  }
  return path(name);
}

}  // namespace

TEST_CASE("simulate") {
  const Run a = run("simulate --task two_moons --n 1000 --seed 7 --out " + path("sim_a.csv"));
  REQUIRE(a.code == 0);
  const CsvTable t = read_csv(path("sim_a.csv"));
  CHECK(t.values.rows() == 1000);
  CHECK(t.values.cols() == 4);
  CHECK(t.header == std::vector<std::string>{"theta_0", "theta_1", "x_0", "x_1"});
  REQUIRE(run("simulate --task two_moons --n 1000 --seed 7 --out " + path("sim_b.csv")).code == 0);
  CHECK(slurp(path("sim_a.csv")) == slurp(path("sim_b.csv")));

  const Run bad = run("simulate --task nope --n 10");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("gaussian_mixture") != std::string::npos);
  CHECK(run("simulate --n 10").code == 2);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("train") {
  write_config(path("smoke.json"), "two_moons", "flow_matching", "conditional", 2000, path("smoke"));
  const Run r = run("train --config " + path("smoke.json"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(fs::exists(workdir() / "smoke" / "manifest.json"));
  CHECK(fs::exists(workdir() / "smoke" / "checkpoint.bin"));
  const CsvTable h = read_csv(workdir() / "smoke" / "history.csv");
  CHECK(h.values(h.values.rows() - 1, 0) == 2000);

  std::ofstream(path("bad.json")) << R"({"schema_version": 1, "task": "two_moons", "output_dir": ")"
                                  << path("bad") << R"(", "train": {"total_steps": 100, "warmup_steps": 100}})";
  const Run bad = run("train --config " + path("bad.json"));
  CHECK(bad.code == 2);
  CHECK_FALSE(fs::exists(workdir() / "bad" / "manifest.json"));

  // Resume: continue the finished 2000-step run to 2500 steps.
  write_config(path("more.json"), "two_moons", "flow_matching", "conditional", 2500, path("more"));
  const Run resumed = run("train --config " + path("more.json") + " --resume " + path("smoke"));
  REQUIRE_MESSAGE(resumed.code == 0, resumed.output);
  const CsvTable h2 = read_csv(workdir() / "more" / "history.csv");
  CHECK(h2.values(h2.values.rows() - 1, 0) == 2500);
  CHECK(h2.values(0, 0) == 100);
}

TEST_CASE("sample") {
  const std::string cond = trained("flow_matching", "conditional");
  Run r = run("sample --checkpoint " + cond + " --observation 0.1,0.2 --n 100 --out " + path("post.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(read_csv(path("post.csv")).values.rows() == 100);
  r = run("sample --checkpoint " + cond + " --observation 0.1,0.2 --n 20 --solver fm_sde --variant non_singular "
          "--alpha 0.5 --trajectory " + path("traj.csv") + " --out " + path("post_sde.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(fs::exists(path("traj.csv")));
  CHECK(run("sample --checkpoint " + cond + " --n 10").code == 2);
  CHECK(run("sample --checkpoint " + cond + " --observation 0.1 --n 10").code == 2);
  CHECK(run("sample --checkpoint " + cond + " --observation 0.1,abc --n 10").code == 2);

  const std::string joint = trained("flow_matching", "joint");
  r = run("sample --checkpoint " + joint + " --mode posterior --observation 0.1,0.2 --n 50 --out " + path("jp.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  r = run("sample --checkpoint " + joint + " --mode likelihood --theta 0.3,-0.1 --n 50 --out " + path("jl.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(read_csv(path("jl.csv")).header == std::vector<std::string>{"x_0", "x_1"});
  r = run("sample --checkpoint " + joint + " --mode joint --n 50 --out " + path("jj.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(read_csv(path("jj.csv")).values.cols() == 4);

  const std::string edm = trained("diffusion_edm", "conditional", 200);
  r = run("sample --checkpoint " + edm + " --observation 0.1,0.2 --n 10 --solver fm_sde --alpha 0.5");
  CHECK(r.code == 2);
  CHECK(r.output.find("diffusion_edm") != std::string::npos);
  r = run("sample --checkpoint " + edm + " --observation 0.1,0.2 --n 10 --s-churn 10 --out " + path("edm.csv"));
  CHECK_MESSAGE(r.code == 0, r.output);
  CHECK(run("sample --checkpoint " + path("nowhere") + " --n 10").code == 1);
}

TEST_CASE("logprob") {
  // Identity flow: an unconditional model whose network is still zero.
  TrainedModel m;
  m.pipeline = Pipeline::unconditional;
  m.d_theta = 2;
  m.model_config.input_dim = 2;
  m.model_config.hidden_width = 8;
  m.model_config.depth = 1;
  m.model_config.time_embed_dim = 4;
  m.params = FieldModel<float>(m.model_config).init(0);
  m.theta_std = Standardizer::identity(2);
  m.x_std = Standardizer::identity(0);
  fs::create_directories(workdir() / "identity");
  save_trained(workdir() / "identity" / "manifest.json", m);

  Rng rng(1);
  const Matrix pts = rng.normal(2, 10);
  write_samples_csv(path("pts.csv"), "theta", pts);
  Run r = run("logprob --checkpoint " + path("identity") + " --points " + path("pts.csv") + " --out " + path("lp.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const CsvTable lp = read_csv(path("lp.csv"));
  for (Eigen::Index j = 0; j < 10; ++j) CHECK(lp.values(j, 0) == doctest::Approx(standard_normal_log_pdf(pts.col(j))));

  const std::string cond = trained("flow_matching", "conditional");
  write_samples_csv(path("th.csv"), "theta", (rng.uniform(Eigen::Index(2), Eigen::Index(10)).array() * 2.0 - 1.0).matrix());
  r = run("logprob --checkpoint " + cond + " --points " + path("th.csv") + " --observation 0,0.1 --out " +
          path("exact.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  r = run("logprob --checkpoint " + cond + " --points " + path("th.csv") +
          " --observation 0,0.1 --divergence hutchinson --probes 256 --out " + path("hutch.csv"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const CsvTable e = read_csv(path("exact.csv")), h = read_csv(path("hutch.csv"));
  for (Eigen::Index j = 0; j < 10; ++j) CHECK(std::abs(e.values(j, 0) - h.values(j, 0)) <= 3 * h.values(j, 1) + 1e-9);
  CHECK(run("logprob --checkpoint " + cond + " --points " + path("th.csv")).code == 2);

  const std::string edm = trained("diffusion_edm", "conditional", 200);
  r = run("logprob --checkpoint " + edm + " --points " + path("th.csv") + " --observation 0,0.1");
  CHECK(r.code == 2);
  CHECK(r.output.find("diffusion_edm") != std::string::npos);
}

TEST_CASE("diagnose") {
  // Every pass flag is a hypothesis test on the exact posterior, so each
  // seed has a small chance of a false alarm; seed 0 hits one on the
  // coverage curve of dimension 5 (p = 0.0008), seed 1 does not.
  const Run r = run("diagnose --reference-sampler --task gaussian_linear --n-sbc 200 --n-cal 500 --c2st-samples 500 "
                    "--lc2st-cal 300 --permutations 20 --seed 1 --out-dir " + path("diag_ref"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const std::string summary = slurp(workdir() / "diag_ref" / "summary.csv");
  CHECK(summary.find(",false") == std::string::npos);
  CHECK(summary.find("c2st,mean_accuracy") != std::string::npos);
  CHECK(r.output.find("C2ST over 10 test observations") != std::string::npos);
  for (const char* f : {"sbc_ranks.csv", "tarp_ecp.csv", "coverage.csv", "c2st.csv"})
    CHECK(fs::exists(workdir() / "diag_ref" / f));

  const Run none = run("diagnose --reference-sampler --task checkerboard --suite c2st");
  CHECK(none.code == 2);
  CHECK(none.output.find("no reference") != std::string::npos);

  const std::string cond = trained("flow_matching", "conditional");
  const Run model = run("diagnose --checkpoint " + cond + " --suite tarp --n-cal 100 --n-post 50");
  CHECK_MESSAGE(model.code == 0, model.output);
  CHECK(fs::exists(fs::path(cond) / "diagnostics" / "tarp_ecp.csv"));
}

TEST_CASE("benchmark") {
  const std::string args = "benchmark --task two_moons --budget 10000 --method flow_matching --pipeline conditional "
                           "--seed 1 --train-steps 500 --c2st-samples 300 --out-dir ";
  const Run a = run(args + path("bench_a"));
  REQUIRE_MESSAGE(a.code == 0, a.output);
  const Run b = run(args + path("bench_b"));
  REQUIRE_MESSAGE(b.code == 0, b.output);
  CHECK(a.output == b.output);
  const std::string row = slurp(workdir() / "bench_a" / "results.csv");
  CHECK(row.find("c2st_mean,c2st_std") != std::string::npos);
  CHECK(row.find("two_moons,flow_matching,conditional,10000,1,") != std::string::npos);
}
