#pragma once

// Run configuration: JSON (de)serialisation of every config struct and the
// method / pipeline / solver compatibility rules.

#include "densflow/solvers.hpp"
#include "densflow/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace densflow {

inline constexpr int kConfigSchemaVersion = 1;

enum class SolverKind { fm_ode, fm_sde, sm_sde, sm_pf_ode, edm_heun };
std::string to_string(SolverKind k);
SolverKind solver_kind_from_string(const std::string& s);

/// Solver kinds usable with a model trained by `method`.
bool solver_compatible(Method method, SolverKind kind);
void require_solver_compatible(Method method, SolverKind kind);
SolverKind default_solver(Method method);
/// FM ODE 100, FM SDE 200, SM SDE 1000, SM PF-ODE 200, EDM 18.
int default_solver_steps(SolverKind kind);
/// Log densities exist for the flow ODE and the probability-flow ODE only.
void require_log_prob_support(Method method);

struct SolverConfig {
  SolverKind kind = SolverKind::fm_ode;
  OdeMethod ode_method = OdeMethod::euler;
  int n_steps = 0;  // 0 selects default_solver_steps(kind)
  FmSdeVariant variant = FmSdeVariant::zero_ends;
  double alpha = 0.5;
  ChurnParams churn;

  int steps() const { return n_steps > 0 ? n_steps : default_solver_steps(kind); }
  void validate() const;
};

struct RunConfig {
  std::string task = "two_moons";
  Method method = Method::flow_matching;
  Pipeline pipeline = Pipeline::conditional;
  std::optional<FieldModelConfig> model;  // dims are filled in from the task
  TrainConfig train;
  MethodConfig method_config;
  ConditionMaskPolicy mask_policy;
  std::optional<SolverConfig> solver;     // defaults to default_solver(method)
  Eigen::Index n_sims = 10000;
  std::string dataset;                    // optional CSV; simulated when empty
  std::uint64_t seed = 0;
  std::string output_dir = "run";

  void validate() const;
  SolverConfig solver_or_default() const;
};

/// Model size used when a config does not set one: 128 x 5 for up to four
/// joint dimensions, 256 x 6 above.
FieldModelConfig default_model_config(Eigen::Index d_theta, Eigen::Index d_x, Pipeline pipeline);

nlohmann::json to_json(const FieldModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const MethodConfig& c);
nlohmann::json to_json(const ConditionMaskPolicy& c);
nlohmann::json to_json(const SolverConfig& c);
nlohmann::json to_json(const RunConfig& c);

FieldModelConfig field_model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
MethodConfig method_config_from_json(const nlohmann::json& j);
ConditionMaskPolicy mask_policy_from_json(const nlohmann::json& j);
SolverConfig solver_config_from_json(const nlohmann::json& j);
/// Unknown keys are rejected so that typos surface as config errors.
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace densflow
