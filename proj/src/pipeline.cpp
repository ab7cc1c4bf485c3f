#include "densflow/pipeline.hpp"

#include "densflow/tasks.hpp"

#include <cmath>
#include <limits>

namespace densflow {

using nlohmann::json;

// ---------------------------------------------------------------- adapters

NetworkView::NetworkView(const TrainedModel& m, Matrix context)
    : model_(m.model_config), params_(m.params), context_(context.cast<float>()) {
  if (!(params_.layout() == model_.layout())) throw ConfigError("trained parameters do not match the model config");
}

FieldInput<float> NetworkView::input(const Matrix& x, double net_time) const {
  FieldInput<float> in;
  in.x = x.cast<float>();
  in.t = VectorF::Constant(1, float(net_time));
  const Eigen::Index c = context_.cols();
  if (c == 0 || c == 1 || c == x.cols()) {
    in.context = context_;
  } else if (x.cols() % c == 0) {
    in.context = context_.replicate(1, x.cols() / c);
  } else {
    throw ShapeError("context columns do not divide the batch size");
  }
  return in;
}

Matrix NetworkView::forward(const Matrix& x, double net_time) const {
  return model_.forward(params_, input(x, net_time)).cast<double>();
}

Matrix NetworkView::jvp(const Matrix& x, double net_time, const Matrix& direction) const {
  return model_.jvp_input(params_, input(x, net_time), direction.cast<float>()).cast<double>();
}

FlowModelField::FlowModelField(const TrainedModel& m, Matrix context) : net_(m, std::move(context)) {}

Matrix FlowModelField::velocity(const Matrix& x, double t) const { return net_.forward(x, t); }

Matrix FlowModelField::jvp(const Matrix& x, double t, const Matrix& direction) const {
  return net_.jvp(x, t, direction);
}

ScoreModelField::ScoreModelField(const TrainedModel& m, Matrix context)
    : net_(m, std::move(context)), sde_(m.method_config.sde) {}

Matrix ScoreModelField::score(const Matrix& x, double tau) const {
  return net_.forward(x, paths::diffusion_time(tau)) / sde_.marginal_std(tau);
}

Matrix ScoreModelField::jvp(const Matrix& x, double tau, const Matrix& direction) const {
  return net_.jvp(x, paths::diffusion_time(tau), direction) / sde_.marginal_std(tau);
}

EdmModelDenoiser::EdmModelDenoiser(const TrainedModel& m, Matrix context)
    : net_(m, std::move(context)), edm_(m.method_config.edm) {}

Matrix EdmModelDenoiser::denoise(const Matrix& x, double sigma) const {
  const auto c = paths::edm_precondition(edm_, sigma);
  return c.c_skip * x + c.c_out * net_.forward(c.c_in * x, c.c_noise);
}

namespace {

void require_method(const TrainedModel& m, Method expected, const char* what) {
  if (m.method != expected)
    throw CompatibilityError(std::string(what) + " requires a model trained by method '" + to_string(expected) +
                             "', but this model carries the tag '" + to_string(m.method) + "'");
}

}  // namespace

std::unique_ptr<FlowModelField> as_flow(const TrainedModel& m, Matrix context) {
  require_method(m, Method::flow_matching, "a velocity field");
  return std::make_unique<FlowModelField>(m, std::move(context));
}

std::unique_ptr<ScoreModelField> as_score(const TrainedModel& m, Matrix context) {
  require_method(m, Method::score_matching, "a score field");
  return std::make_unique<ScoreModelField>(m, std::move(context));
}

std::unique_ptr<EdmModelDenoiser> as_edm(const TrainedModel& m, Matrix context) {
  require_method(m, Method::diffusion_edm, "a denoiser");
  return std::make_unique<EdmModelDenoiser>(m, std::move(context));
}

FreeCoordinateField::FreeCoordinateField(const VelocityField& full, Vector mask, Matrix values)
    : full_(full), mask_(std::move(mask)), values_(std::move(values)) {
  if (values_.rows() != mask_.size()) throw ShapeError("FreeCoordinateField: mask/values dimension mismatch");
  for (Eigen::Index i = 0; i < mask_.size(); ++i)
    if (mask_(i) == 0.0) free_.push_back(i);
  if (free_.empty()) throw ConfigError("FreeCoordinateField: every coordinate is observed");
}

Matrix FreeCoordinateField::embed(const Matrix& x, bool zero_pinned) const {
  const Eigen::Index n = x.cols();
  Matrix z(mask_.size(), n);
  if (zero_pinned) {
    z.setZero();
  } else if (values_.cols() == 1 || values_.cols() == n) {
    z = values_.cols() == 1 ? Matrix(values_.replicate(1, n)) : values_;
  } else if (n % values_.cols() == 0) {
    z = values_.replicate(1, n / values_.cols());
  } else {
    throw ShapeError("FreeCoordinateField: value columns do not divide the batch size");
  }
  for (std::size_t k = 0; k < free_.size(); ++k) z.row(free_[k]) = x.row(Eigen::Index(k));
  return z;
}

Matrix FreeCoordinateField::restrict(const Matrix& z) const {
  Matrix x(Eigen::Index(free_.size()), z.cols());
  for (std::size_t k = 0; k < free_.size(); ++k) x.row(Eigen::Index(k)) = z.row(free_[k]);
  return x;
}

Matrix FreeCoordinateField::velocity(const Matrix& x, double t) const {
  return restrict(full_.velocity(embed(x, false), t));
}

Matrix FreeCoordinateField::jvp(const Matrix& x, double t, const Matrix& direction) const {
  return restrict(full_.jvp(embed(x, false), t, embed(direction, true)));
}

// ---------------------------------------------------------------- inference

std::string to_string(SampleMode m) {
  switch (m) {
    case SampleMode::posterior: return "posterior";
    case SampleMode::likelihood: return "likelihood";
    case SampleMode::joint: return "joint";
  }
  return "posterior";
}

SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "posterior") return SampleMode::posterior;
  if (s == "likelihood") return SampleMode::likelihood;
  if (s == "joint") return SampleMode::joint;
  throw ConfigError("unknown sample mode '" + s + "' (expected posterior|likelihood|joint)");
}

namespace {

Matrix repeat_columns(const Matrix& m, Eigen::Index n_per) {
  Matrix out(m.rows(), m.cols() * n_per);
  for (Eigen::Index k = 0; k < m.cols(); ++k) out.middleCols(k * n_per, n_per) = m.col(k).replicate(1, n_per);
  return out;
}

double prior_scale(const TrainedModel& m) {
  switch (m.method) {
    case Method::flow_matching: return 1.0;
    case Method::score_matching: return m.method_config.sde.prior_std();
    case Method::diffusion_edm: return m.method_config.edm.sigma_max;
  }
  return 1.0;
}

Matrix run_solver(const TrainedModel& m, const SolverConfig& solver, const Matrix& context, Matrix latent,
                  const Observed& observed, Rng& rng, Trajectory* trajectory) {
  switch (solver.kind) {
    case SolverKind::fm_ode: {
      const auto field = as_flow(m, context);
      ODESolverConfig c;
      c.method = solver.ode_method;
      c.n_steps = solver.steps();
      return integrate_fm_ode(*field, std::move(latent), c, observed, trajectory);
    }
    case SolverKind::fm_sde: {
      const auto field = as_flow(m, context);
      return integrate_fm_sde(*field, std::move(latent), solver.variant, solver.alpha, solver.steps(), rng, observed,
                              trajectory);
    }
    case SolverKind::sm_sde: {
      const auto score = as_score(m, context);
      return integrate_sm_reverse_sde(*score, std::move(latent), m.method_config.sde, solver.steps(), rng, observed,
                                      trajectory);
    }
    case SolverKind::sm_pf_ode: {
      const auto score = as_score(m, context);
      ODESolverConfig c;
      c.method = solver.ode_method;
      c.n_steps = solver.steps();
      return integrate_sm_pf_ode(*score, std::move(latent), m.method_config.sde, c, observed, trajectory);
    }
    case SolverKind::edm_heun: {
      const auto den = as_edm(m, context);
      return edm_sample(*den, std::move(latent), m.method_config.edm, solver.steps(), solver.churn, rng, observed,
                        trajectory);
    }
  }
  throw ConfigError("unhandled solver kind");
}

}  // namespace

Matrix sample(const TrainedModel& m, const SolverConfig& solver, SampleMode mode, const Matrix& given,
              Eigen::Index n_per, Rng& rng, Trajectory* trajectory) {
  solver.validate();
  require_solver_compatible(m.method, solver.kind);
  if (n_per < 1) throw ConfigError("number of samples must be >= 1");

  const Eigen::Index d = m.generated_dim();
  Eigen::Index groups = 1;
  Matrix context;
  Observed observed;

  switch (m.pipeline) {
    case Pipeline::conditional: {
      if (mode != SampleMode::posterior)
        throw CompatibilityError("a conditional model only provides posterior samples");
      if (given.rows() != m.d_x || given.cols() < 1)
        throw ShapeError("posterior sampling needs observations with " + std::to_string(m.d_x) + " entries");
      groups = given.cols();
      context = repeat_columns(m.x_std.apply(given), n_per);
      break;
    }
    case Pipeline::unconditional: {
      if (mode == SampleMode::likelihood) throw CompatibilityError("an unconditional model has no likelihood mode");
      break;
    }
    case Pipeline::joint: {
      if (mode == SampleMode::joint) {
        context = Matrix::Zero(d, 1);
        break;
      }
      const bool post = mode == SampleMode::posterior;
      const Eigen::Index rows = post ? m.d_x : m.d_theta;
      if (given.rows() != rows || given.cols() < 1)
        throw ShapeError(std::string(post ? "posterior" : "likelihood") + " sampling needs conditioning vectors with " +
                         std::to_string(rows) + " entries");
      groups = given.cols();
      const Vector mask = post ? posterior_mask(m.d_theta, m.d_x) : likelihood_mask(m.d_theta, m.d_x);
      Matrix values = Matrix::Zero(d, groups);
      if (post) values.bottomRows(m.d_x) = m.x_std.apply(given);
      else values.topRows(m.d_theta) = m.theta_std.apply(given);
      observed.mask = mask;
      observed.values = repeat_columns(values, n_per);
      context = mask;
      break;
    }
  }

  const Matrix latent = prior_scale(m) * rng.normal(d, groups * n_per);
  const Matrix out = run_solver(m, solver, context, latent, observed, rng, trajectory);

  if (m.pipeline != Pipeline::joint) return m.theta_std.invert(out);
  switch (mode) {
    case SampleMode::posterior: return m.theta_std.invert(out.topRows(m.d_theta));
    case SampleMode::likelihood: return m.x_std.invert(out.bottomRows(m.d_x));
    case SampleMode::joint: {
      Matrix raw(d, out.cols());
      raw.topRows(m.d_theta) = m.theta_std.invert(out.topRows(m.d_theta));
      raw.bottomRows(m.d_x) = m.x_std.invert(out.bottomRows(m.d_x));
      return raw;
    }
  }
  return out;
}

LogProbResult log_prob(const TrainedModel& m, const Matrix& thetas, const Matrix& xs, const LogProbOptions& opt,
                       Rng& rng) {
  require_log_prob_support(m.method);
  if (thetas.rows() != m.d_theta) throw ShapeError("log_prob: parameter dimension mismatch");
  const Eigen::Index n = thetas.cols();
  const bool conditioned = m.pipeline != Pipeline::unconditional;
  if (conditioned && (xs.rows() != m.d_x || (xs.cols() != 1 && xs.cols() != n)))
    throw ShapeError("log_prob: observations must have " + std::to_string(m.d_x) + " entries and 1 or n columns");

  LogProbConfig cfg;
  cfg.n_steps = opt.n_steps;
  cfg.divergence = opt.divergence;
  cfg.n_probes = opt.n_probes;
  if (m.method == Method::score_matching) {
    cfg.t_data = 1.0 - paths::kTimeEps;
    cfg.source_std = m.method_config.sde.prior_std();
  }

  Matrix context;
  Vector mask;
  Matrix values;
  if (m.pipeline == Pipeline::conditional) {
    context = m.x_std.apply(xs);
  } else if (m.pipeline == Pipeline::joint) {
    mask = posterior_mask(m.d_theta, m.d_x);
    context = mask;
    values = Matrix::Zero(m.d_theta + m.d_x, xs.cols());
    values.bottomRows(m.d_x) = m.x_std.apply(xs);
  }

  std::unique_ptr<VelocityField> full;
  std::unique_ptr<ScoreModelField> score;
  if (m.method == Method::flow_matching) {
    full = as_flow(m, context);
  } else {
    score = as_score(m, context);
    full = std::make_unique<ProbabilityFlowVelocity>(*score, m.method_config.sde);
  }

  const Matrix z = m.theta_std.apply(thetas);
  LogProbResult res;
  if (m.pipeline == Pipeline::joint) {
    const FreeCoordinateField field(*full, mask, values);
    res = fm_log_prob(field, z, cfg, &rng);
  } else {
    res = fm_log_prob(*full, z, cfg, &rng);
  }
  res.log_density.array() += m.theta_std.log_jacobian();
  return res;
}

// ---------------------------------------------------------------- checkpoints

namespace {

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), Eigen::Index(v.size()));
}

json maybe_inf(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void save_trained(const std::filesystem::path& manifest, const TrainedModel& m, const TrainState* state,
                  const std::string& blob_name) {
  CheckpointData data;
  append_params(data, "ema/", state ? state->ema.shadow : m.params);
  json meta = {{"task", m.task},
               {"method", to_string(m.method)},
               {"pipeline", to_string(m.pipeline)},
               {"method_config", to_json(m.method_config)},
               {"model_config", to_json(m.model_config)},
               {"d_theta", m.d_theta},
               {"d_x", m.d_x},
               {"theta_mean", vec_json(m.theta_std.mean)},
               {"theta_std", vec_json(m.theta_std.std)},
               {"x_mean", vec_json(m.x_std.mean)},
               {"x_std", vec_json(m.x_std.std)},
               {"step", state ? state->step : m.step}};
  if (state) {
    append_params(data, "params/", state->params);
    if (state->adam.m.size() > 0) {
      data.arrays.push_back({"adam/m", state->adam.m});
      data.arrays.push_back({"adam/v", state->adam.v});
    }
    json hist = json::array();
    for (const auto& h : state->history) hist.push_back({h.step, h.train_loss, h.val_loss, h.lr});
    meta["train_state"] = {{"adam_step", state->adam.step},
                           {"best_val", maybe_inf(state->best_val)},
                           {"bad_evals", state->bad_evals},
                           {"ema_decay", state->ema.decay},
                           {"history", hist}};
  }
  data.metadata = meta;
  save_checkpoint(manifest, data, blob_name);
}

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) ? p / "manifest.json" : p;
}

TrainedModel trained_from(const CheckpointData& data) {
  const json& meta = data.metadata;
  try {
    TrainedModel m;
    m.task = meta.at("task").get<std::string>();
    m.method = method_from_string(meta.at("method").get<std::string>());
    m.pipeline = pipeline_from_string(meta.at("pipeline").get<std::string>());
    m.method_config = method_config_from_json(meta.at("method_config"));
    m.model_config = field_model_config_from_json(meta.at("model_config"));
    m.d_theta = meta.at("d_theta").get<Eigen::Index>();
    m.d_x = meta.at("d_x").get<Eigen::Index>();
    m.theta_std = {json_vec(meta.at("theta_mean")), json_vec(meta.at("theta_std"))};
    m.x_std = {json_vec(meta.at("x_mean")), json_vec(meta.at("x_std"))};
    m.step = meta.at("step").get<int>();
    const FieldModel<float> model(m.model_config);
    m.params = extract_params(data, "ema/", model.layout());
    return m;
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint metadata is incomplete: ") + e.what());
  }
}

}  // namespace

TrainedModel load_trained(const std::filesystem::path& path) { return trained_from(load_checkpoint(manifest_path(path))); }

TrainState load_train_state(const std::filesystem::path& path) {
  const CheckpointData data = load_checkpoint(manifest_path(path));
  if (!data.metadata.contains("train_state")) throw Error("checkpoint " + path.string() + " holds no training state");
  const TrainedModel m = trained_from(data);
  const FieldModel<float> model(m.model_config);
  const json& ts = data.metadata.at("train_state");
  TrainState st;
  st.params = extract_params(data, "params/", model.layout());
  st.ema.shadow = m.params;
  st.ema.decay = ts.at("ema_decay").get<double>();
  st.step = m.step;
  if (data.has("adam/m")) {
    st.adam.m = data.array("adam/m");
    st.adam.v = data.array("adam/v");
  }
  st.adam.step = ts.at("adam_step").get<int>();
  st.best_val = ts.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : ts.at("best_val").get<double>();
  st.bad_evals = ts.at("bad_evals").get<int>();
  for (const auto& h : ts.at("history"))
    st.history.push_back({h.at(0).get<int>(), h.at(1).get<double>(), h.at(2).get<double>(), h.at(3).get<double>()});
  return st;
}

// ---------------------------------------------------------------- training

Dataset load_or_simulate(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) return read_dataset_csv(cfg.dataset);
  return generate_dataset(*make_task(cfg.task), cfg.n_sims, cfg.seed);
}

TrainingRun train_model(const RunConfig& cfg, const Dataset& data, const std::optional<std::filesystem::path>& out_dir,
                        const std::optional<std::filesystem::path>& resume) {
  cfg.validate();
  data.validate();

  TrainedModel tm;
  tm.task = cfg.task;
  tm.method = cfg.method;
  tm.pipeline = cfg.pipeline;
  tm.d_theta = data.theta_dim();
  tm.d_x = data.x_dim();
  if (cfg.pipeline != Pipeline::unconditional && tm.d_x == 0)
    throw ConfigError("pipeline '" + to_string(cfg.pipeline) + "' needs observations, but the dataset has none");

  tm.theta_std = Standardizer::fit(data.thetas);
  tm.x_std = tm.d_x > 0 ? Standardizer::fit(data.xs) : Standardizer::identity(0);

  TrainProblem pb;
  pb.method = cfg.method_config;
  pb.method.method = cfg.method;
  pb.pipeline = cfg.pipeline;
  pb.d_theta = tm.d_theta;
  pb.mask_policy = cfg.mask_policy;
  const Matrix zt = tm.theta_std.apply(data.thetas);
  if (cfg.pipeline == Pipeline::joint) {
    pb.targets.resize(tm.d_theta + tm.d_x, data.size());
    pb.targets.topRows(tm.d_theta) = zt;
    pb.targets.bottomRows(tm.d_x) = tm.x_std.apply(data.xs);
  } else {
    pb.targets = zt;
    if (cfg.pipeline == Pipeline::conditional) pb.context = tm.x_std.apply(data.xs);
  }

  if (pb.method.method == Method::diffusion_edm && pb.method.estimate_sigma_data) {
    const double mean = pb.targets.mean();
    const double sd = std::sqrt((pb.targets.array() - mean).square().mean());
    pb.method.edm.sigma_data = (std::isfinite(sd) && sd > 0.0) ? sd : 0.5;
  }
  tm.method_config = pb.method;

  FieldModelConfig mc = cfg.model.value_or(default_model_config(tm.d_theta, tm.d_x, cfg.pipeline));
  const FieldModelConfig dims = default_model_config(tm.d_theta, tm.d_x, cfg.pipeline);
  mc.input_dim = dims.input_dim;
  mc.cond_dim = dims.cond_dim;
  mc.joint_mode = dims.joint_mode;
  mc.validate();
  tm.model_config = mc;
  const FieldModel<float> model(mc);
  pb.model = &model;

  std::optional<TrainState> start;
  if (resume) start = load_train_state(*resume);

  CheckpointHook hook;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    save_run_config(*out_dir / "config.json", cfg);
    hook = [&](const TrainState& st, bool best) {
      if (!best) return;
      TrainedModel snap = tm;
      snap.step = st.step;
      save_trained(*out_dir / "manifest_best.json", snap, &st, "checkpoint_best.bin");
    };
  }

  TrainingRun run;
  run.result = train(pb, cfg.train, std::move(start), hook);
  tm.params = run.result.state.ema.shadow;
  tm.step = run.result.state.step;
  run.model = tm;
  if (out_dir) {
    save_trained(*out_dir / "manifest.json", tm, &run.result.state, "checkpoint.bin");
    write_history_csv((*out_dir / "history.csv").string(), run.result.state.history);
  }
  return run;
}

}  // namespace densflow
