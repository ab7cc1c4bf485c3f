#include "densflow/config.hpp"

#include "densflow/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace densflow {

using nlohmann::json;

std::string to_string(SolverKind k) {
  switch (k) {
    case SolverKind::fm_ode: return "fm_ode";
    case SolverKind::fm_sde: return "fm_sde";
    case SolverKind::sm_sde: return "sm_sde";
    case SolverKind::sm_pf_ode: return "sm_pf_ode";
    case SolverKind::edm_heun: return "edm_heun";
  }
  return "fm_ode";
}

SolverKind solver_kind_from_string(const std::string& s) {
  if (s == "fm_ode") return SolverKind::fm_ode;
  if (s == "fm_sde") return SolverKind::fm_sde;
  if (s == "sm_sde") return SolverKind::sm_sde;
  if (s == "sm_pf_ode") return SolverKind::sm_pf_ode;
  if (s == "edm_heun" || s == "edm") return SolverKind::edm_heun;
  throw ConfigError("unknown solver '" + s + "' (expected fm_ode|fm_sde|sm_sde|sm_pf_ode|edm_heun)");
}

bool solver_compatible(Method method, SolverKind kind) {
  switch (method) {
    case Method::flow_matching: return kind == SolverKind::fm_ode || kind == SolverKind::fm_sde;
    case Method::score_matching: return kind == SolverKind::sm_sde || kind == SolverKind::sm_pf_ode;
    case Method::diffusion_edm: return kind == SolverKind::edm_heun;
  }
  return false;
}

void require_solver_compatible(Method method, SolverKind kind) {
  if (!solver_compatible(method, kind))
    throw CompatibilityError("solver '" + to_string(kind) + "' cannot be used with a model trained by method '" +
                             to_string(method) + "'");
}

SolverKind default_solver(Method method) {
  switch (method) {
    case Method::flow_matching: return SolverKind::fm_ode;
    case Method::score_matching: return SolverKind::sm_sde;
    case Method::diffusion_edm: return SolverKind::edm_heun;
  }
  return SolverKind::fm_ode;
}

int default_solver_steps(SolverKind kind) {
  switch (kind) {
    case SolverKind::fm_ode: return 100;
    case SolverKind::fm_sde: return 200;
    case SolverKind::sm_sde: return 1000;
    case SolverKind::sm_pf_ode: return 200;
    case SolverKind::edm_heun: return 18;
  }
  return 100;
}

void require_log_prob_support(Method method) {
  if (method == Method::diffusion_edm)
    throw CompatibilityError("log densities are available for flow_matching and score_matching (probability-flow "
                             "ODE) models only; this model was trained by method 'diffusion_edm'");
}

void SolverConfig::validate() const {
  if (n_steps < 0) throw ConfigError("solver n_steps must be >= 0 (0 selects the default)");
  if (!(alpha >= 0.0)) throw ConfigError("solver alpha must be nonnegative");
  churn.validate();
}

void RunConfig::validate() const {
  train.validate();
  method_config.validate();
  if (method_config.method != method) throw ConfigError("method_config does not match method");
  if (n_sims < 2 && dataset.empty()) throw ConfigError("n_sims must be >= 2");
  if (pipeline == Pipeline::joint) mask_policy.validate();
  if (model) {
    if (pipeline == Pipeline::joint && !model->joint_mode) throw ConfigError("joint pipeline requires a joint-mode model");
    if (pipeline != Pipeline::joint && model->joint_mode)
      throw ConfigError("a joint-mode model requires the joint pipeline");
  }
  if (solver) {
    solver->validate();
    require_solver_compatible(method, solver->kind);
  }
}

SolverConfig RunConfig::solver_or_default() const {
  if (solver) return *solver;
  SolverConfig s;
  s.kind = default_solver(method);
  return s;
}

FieldModelConfig default_model_config(Eigen::Index d_theta, Eigen::Index d_x, Pipeline pipeline) {
  FieldModelConfig c;
  const Eigen::Index total = d_theta + d_x;
  c.hidden_width = total > 4 ? 256 : 128;
  c.depth = total > 4 ? 6 : 5;
  if (pipeline == Pipeline::joint) {
    c.input_dim = int(total);
    c.cond_dim = 0;
    c.joint_mode = true;
  } else {
    c.input_dim = int(d_theta);
    c.cond_dim = pipeline == Pipeline::conditional ? int(d_x) : 0;
    c.joint_mode = false;
  }
  return c;
}

// ---------------------------------------------------------------- json helpers

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items())
    if (!allowed.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double read_number(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw ConfigError("key '" + key + "' must be a number");
}

template <typename T>
void read(const json& j, const std::string& key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  try {
    if constexpr (std::is_same_v<T, double>) {
      out = read_number(v, key);
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("key '" + key + "' must be an integer");
      out = v.get<T>();
    } else {
      out = v.get<T>();
    }
  } catch (const json::exception& e) {
    throw ConfigError("invalid value for '" + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const FieldModelConfig& c) {
  return {{"input_dim", c.input_dim},     {"cond_dim", c.cond_dim},
          {"hidden_width", c.hidden_width}, {"depth", c.depth},
          {"time_embed_dim", c.time_embed_dim}, {"time_embed_scale", c.time_embed_scale},
          {"activation", to_string(c.activation)}, {"joint_mode", c.joint_mode}};
}

FieldModelConfig field_model_config_from_json(const json& j) {
  check_keys(j, {"input_dim", "cond_dim", "hidden_width", "depth", "time_embed_dim", "time_embed_scale", "activation",
                 "joint_mode"},
             "model");
  FieldModelConfig c;
  read(j, "input_dim", c.input_dim);
  read(j, "cond_dim", c.cond_dim);
  read(j, "hidden_width", c.hidden_width);
  read(j, "depth", c.depth);
  read(j, "time_embed_dim", c.time_embed_dim);
  read(j, "time_embed_scale", c.time_embed_scale);
  if (j.contains("activation")) c.activation = activation_from_string(j.at("activation").get<std::string>());
  read(j, "joint_mode", c.joint_mode);
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"peak_lr", c.peak_lr},
          {"min_lr", c.min_lr},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"ema_decay", c.ema_decay},
          {"val_fraction", c.val_fraction},
          {"early_stop_ratio", number(c.early_stop_ratio)},
          {"patience", c.patience},
          {"eval_interval", c.eval_interval},
          {"max_val_samples", c.max_val_samples},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j, {"batch_size", "total_steps", "peak_lr", "min_lr", "warmup_steps", "weight_decay", "beta1", "beta2",
                 "adam_eps", "ema_decay", "val_fraction", "early_stop_ratio", "patience", "eval_interval",
                 "max_val_samples", "seed"},
             "train");
  TrainConfig c;
  read(j, "batch_size", c.batch_size);
  read(j, "total_steps", c.total_steps);
  read(j, "peak_lr", c.peak_lr);
  read(j, "min_lr", c.min_lr);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "ema_decay", c.ema_decay);
  read(j, "val_fraction", c.val_fraction);
  read(j, "early_stop_ratio", c.early_stop_ratio);
  read(j, "patience", c.patience);
  read(j, "eval_interval", c.eval_interval);
  read(j, "max_val_samples", c.max_val_samples);
  read(j, "seed", c.seed);
  return c;
}

json to_json(const MethodConfig& c) {
  return {{"method", to_string(c.method)},
          {"sde", paths::to_string(c.sde.kind)},
          {"beta_min", c.sde.vp.beta_min},
          {"beta_max", c.sde.vp.beta_max},
          {"ve_sigma_min", c.sde.ve.sigma_min},
          {"ve_sigma_max", c.sde.ve.sigma_max},
          {"weighting", to_string(c.weighting)},
          {"sigma_data", c.edm.sigma_data},
          {"edm_sigma_min", c.edm.sigma_min},
          {"edm_sigma_max", c.edm.sigma_max},
          {"rho", c.edm.rho},
          {"p_mean", c.edm.p_mean},
          {"p_std", c.edm.p_std},
          {"estimate_sigma_data", c.estimate_sigma_data}};
}

MethodConfig method_config_from_json(const json& j) {
  check_keys(j, {"method", "sde", "beta_min", "beta_max", "ve_sigma_min", "ve_sigma_max", "weighting", "sigma_data",
                 "edm_sigma_min", "edm_sigma_max", "rho", "p_mean", "p_std", "estimate_sigma_data"},
             "method_options");
  MethodConfig c;
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("sde")) c.sde.kind = paths::sde_kind_from_string(j.at("sde").get<std::string>());
  read(j, "beta_min", c.sde.vp.beta_min);
  read(j, "beta_max", c.sde.vp.beta_max);
  read(j, "ve_sigma_min", c.sde.ve.sigma_min);
  read(j, "ve_sigma_max", c.sde.ve.sigma_max);
  if (j.contains("weighting")) c.weighting = weighting_from_string(j.at("weighting").get<std::string>());
  read(j, "sigma_data", c.edm.sigma_data);
  read(j, "edm_sigma_min", c.edm.sigma_min);
  read(j, "edm_sigma_max", c.edm.sigma_max);
  read(j, "rho", c.edm.rho);
  read(j, "p_mean", c.edm.p_mean);
  read(j, "p_std", c.edm.p_std);
  read(j, "estimate_sigma_data", c.estimate_sigma_data);
  return c;
}

json to_json(const ConditionMaskPolicy& c) {
  return {{"joint", c.joint}, {"posterior", c.posterior}, {"likelihood", c.likelihood}, {"bernoulli", c.bernoulli}};
}

ConditionMaskPolicy mask_policy_from_json(const json& j) {
  check_keys(j, {"joint", "posterior", "likelihood", "bernoulli"}, "mask_policy");
  ConditionMaskPolicy c;
  read(j, "joint", c.joint);
  read(j, "posterior", c.posterior);
  read(j, "likelihood", c.likelihood);
  read(j, "bernoulli", c.bernoulli);
  return c;
}

json to_json(const SolverConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"ode_method", to_string(c.ode_method)},
          {"n_steps", c.n_steps},
          {"variant", to_string(c.variant)},
          {"alpha", c.alpha},
          {"s_churn", c.churn.s_churn},
          {"s_min", number(c.churn.s_min)},
          {"s_max", number(c.churn.s_max)},
          {"s_noise", c.churn.s_noise}};
}

SolverConfig solver_config_from_json(const json& j) {
  check_keys(j, {"kind", "ode_method", "n_steps", "variant", "alpha", "s_churn", "s_min", "s_max", "s_noise"},
             "solver");
  SolverConfig c;
  if (j.contains("kind")) c.kind = solver_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("ode_method")) c.ode_method = ode_method_from_string(j.at("ode_method").get<std::string>());
  read(j, "n_steps", c.n_steps);
  if (j.contains("variant")) c.variant = fm_sde_variant_from_string(j.at("variant").get<std::string>());
  read(j, "alpha", c.alpha);
  read(j, "s_churn", c.churn.s_churn);
  read(j, "s_min", c.churn.s_min);
  read(j, "s_max", c.churn.s_max);
  read(j, "s_noise", c.churn.s_noise);
  return c;
}

json to_json(const RunConfig& c) {
  json j = {{"schema_version", kConfigSchemaVersion},
            {"task", c.task},
            {"method", to_string(c.method)},
            {"pipeline", to_string(c.pipeline)},
            {"train", to_json(c.train)},
            {"method_options", to_json(c.method_config)},
            {"mask_policy", to_json(c.mask_policy)},
            {"n_sims", c.n_sims},
            {"dataset", c.dataset},
            {"seed", c.seed},
            {"output_dir", c.output_dir}};
  if (c.model) j["model"] = to_json(*c.model);
  if (c.solver) j["solver"] = to_json(*c.solver);
  return j;
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, {"schema_version", "task", "method", "pipeline", "model", "train", "method_options", "mask_policy",
                 "solver", "n_sims", "dataset", "seed", "output_dir"},
             "run config");
  if (!j.contains("schema_version")) throw ConfigError("run config is missing 'schema_version'");
  if (j.at("schema_version") != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " + j.at("schema_version").dump() + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  RunConfig c;
  read(j, "task", c.task);
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("pipeline")) c.pipeline = pipeline_from_string(j.at("pipeline").get<std::string>());
  if (j.contains("model")) {
    c.model = field_model_config_from_json(j.at("model"));
    if (!j.at("model").contains("joint_mode")) c.model->joint_mode = c.pipeline == Pipeline::joint;
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("method_options")) c.method_config = method_config_from_json(j.at("method_options"));
  if (j.contains("method_options") && j.at("method_options").contains("method")) {
    if (c.method_config.method != c.method) throw ConfigError("method_options.method disagrees with method");
  }
  c.method_config.method = c.method;
  if (j.contains("mask_policy")) c.mask_policy = mask_policy_from_json(j.at("mask_policy"));
  if (j.contains("solver")) c.solver = solver_config_from_json(j.at("solver"));
  read(j, "n_sims", c.n_sims);
  read(j, "dataset", c.dataset);
  read(j, "seed", c.seed);
  read(j, "output_dir", c.output_dir);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  write_file_atomic(path, to_json(cfg).dump(2) + "\n");
}

}  // namespace densflow
