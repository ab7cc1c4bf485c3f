#include "densflow/training.hpp"

#include "densflow/csv.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace densflow {

std::string to_string(Method m) {
  switch (m) {
    case Method::flow_matching: return "flow_matching";
    case Method::score_matching: return "score_matching";
    case Method::diffusion_edm: return "diffusion_edm";
  }
  return "flow_matching";
}

std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::conditional: return "conditional";
    case Pipeline::joint: return "joint";
    case Pipeline::unconditional: return "unconditional";
  }
  return "conditional";
}

std::string to_string(DsmWeighting w) { return w == DsmWeighting::sigma2 ? "sigma2" : "likelihood"; }

Method method_from_string(const std::string& s) {
  if (s == "flow_matching") return Method::flow_matching;
  if (s == "score_matching") return Method::score_matching;
  if (s == "diffusion_edm") return Method::diffusion_edm;
  throw ConfigError("unknown method '" + s + "' (expected flow_matching|score_matching|diffusion_edm)");
}

Pipeline pipeline_from_string(const std::string& s) {
  if (s == "conditional") return Pipeline::conditional;
  if (s == "joint") return Pipeline::joint;
  if (s == "unconditional") return Pipeline::unconditional;
  throw ConfigError("unknown pipeline '" + s + "' (expected conditional|joint|unconditional)");
}

DsmWeighting weighting_from_string(const std::string& s) {
  if (s == "sigma2") return DsmWeighting::sigma2;
  if (s == "likelihood") return DsmWeighting::likelihood;
  throw ConfigError("unknown DSM weighting '" + s + "' (expected sigma2|likelihood)");
}

void MethodConfig::validate() const {
  switch (method) {
    case Method::flow_matching: break;
    case Method::score_matching: sde.validate(); break;
    case Method::diffusion_edm: edm.validate(); break;
  }
}

// ---------------------------------------------------------------- data

Standardizer Standardizer::fit(const Matrix& samples) {
  Standardizer s;
  const Eigen::Index n = samples.cols();
  if (n == 0) throw ShapeError("cannot standardize an empty sample set");
  s.mean = samples.rowwise().mean();
  s.std = ((samples.colwise() - s.mean).rowwise().squaredNorm() / double(n)).cwiseSqrt();
  for (Eigen::Index i = 0; i < s.std.size(); ++i)
    if (!(s.std(i) > 1e-12) || !std::isfinite(s.std(i))) s.std(i) = 1.0;
  return s;
}

Standardizer Standardizer::identity(Eigen::Index dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

Matrix Standardizer::apply(const Matrix& samples) const {
  if (samples.rows() != mean.size()) throw ShapeError("Standardizer::apply: dimension mismatch");
  return (samples.colwise() - mean).array().colwise() / std.array();
}

Matrix Standardizer::invert(const Matrix& samples) const {
  if (samples.rows() != mean.size()) throw ShapeError("Standardizer::invert: dimension mismatch");
  return (samples.array().colwise() * std.array()).matrix().colwise() + mean;
}

double Standardizer::log_jacobian() const { return -std.array().log().sum(); }

void Dataset::validate() const {
  if (thetas.cols() == 0) throw ShapeError("dataset is empty");
  if (xs.size() != 0 && xs.cols() != thetas.cols()) throw ShapeError("dataset theta/x row counts differ");
}

Dataset read_dataset_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  std::vector<Eigen::Index> th, xx;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    if (t.header[i].rfind("theta_", 0) == 0) th.push_back(static_cast<Eigen::Index>(i));
    else if (t.header[i].rfind("x_", 0) == 0) xx.push_back(static_cast<Eigen::Index>(i));
    else throw Error("dataset column '" + t.header[i] + "' is neither theta_* nor x_*");
  }
  if (th.empty()) throw Error("dataset " + path + " has no theta_* columns");
  Dataset d;
  d.thetas.resize(static_cast<Eigen::Index>(th.size()), t.values.rows());
  d.xs.resize(static_cast<Eigen::Index>(xx.size()), t.values.rows());
  for (std::size_t i = 0; i < th.size(); ++i) d.thetas.row(Eigen::Index(i)) = t.values.col(th[i]).transpose();
  for (std::size_t i = 0; i < xx.size(); ++i) d.xs.row(Eigen::Index(i)) = t.values.col(xx[i]).transpose();
  d.validate();
  return d;
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
  data.validate();
  CsvTable t;
  t.header = indexed_names("theta", data.theta_dim());
  const auto xn = indexed_names("x", data.x_dim());
  t.header.insert(t.header.end(), xn.begin(), xn.end());
  t.values.resize(data.size(), data.theta_dim() + data.x_dim());
  t.values.leftCols(data.theta_dim()) = data.thetas.transpose();
  if (data.x_dim() > 0) t.values.rightCols(data.x_dim()) = data.xs.transpose();
  write_csv(path, t);
}

// ---------------------------------------------------------------- masks

void ConditionMaskPolicy::validate() const {
  const double w[] = {joint, posterior, likelihood, bernoulli};
  double sum = 0.0;
  for (double v : w) {
    if (!(v >= 0.0)) throw ConfigError("mask policy weights must be nonnegative");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("mask policy weights must sum to 1");
}

Vector posterior_mask(Eigen::Index d_theta, Eigen::Index d_x) {
  Vector m = Vector::Zero(d_theta + d_x);
  m.tail(d_x).setOnes();
  return m;
}

Vector likelihood_mask(Eigen::Index d_theta, Eigen::Index d_x) {
  Vector m = Vector::Zero(d_theta + d_x);
  m.head(d_theta).setOnes();
  return m;
}

Vector ConditionMaskPolicy::draw(Eigen::Index d_theta, Eigen::Index d_x, Rng& rng) const {
  const Eigen::Index d = d_theta + d_x;
  const double u = rng.uniform();
  if (u < joint) return Vector::Zero(d);
  if (u < joint + posterior && d_x > 0) return posterior_mask(d_theta, d_x);
  if (u < joint + posterior + likelihood && d_x > 0) return likelihood_mask(d_theta, d_x);
  if (u < joint + posterior + likelihood) return Vector::Zero(d);
  // Bernoulli masks; the all-observed pattern leaves nothing to generate.
  const double rate = rng.uniform();
  for (;;) {
    Vector m(d);
    for (Eigen::Index i = 0; i < d; ++i) m(i) = rng.uniform() < rate ? 1.0 : 0.0;
    if (m.sum() < double(d)) return m;
  }
}

Matrix ConditionMaskPolicy::draw_batch(Eigen::Index d_theta, Eigen::Index d_x, Eigen::Index n, Rng& rng) const {
  Matrix out(d_theta + d_x, n);
  for (Eigen::Index j = 0; j < n; ++j) out.col(j) = draw(d_theta, d_x, rng);
  return out;
}

// ---------------------------------------------------------------- losses

NoisyBatch prepare_batch(const MethodConfig& method, const Matrix& clean, const Matrix& context, const Matrix* mask,
                         Rng& rng) {
  const Eigen::Index d = clean.rows();
  const Eigen::Index n = clean.cols();
  if (mask) require_same_shape(mask->rows(), mask->cols(), d, n, "prepare_batch mask");

  NoisyBatch b;
  b.keep = mask ? Matrix((1.0 - mask->array()).matrix()) : Matrix::Ones(d, n);
  b.noise = rng.normal(d, n);
  b.time.resize(n);
  b.sigma.resize(n);
  b.out_scale = Vector::Ones(n);
  b.offset = Matrix::Zero(d, n);
  b.weight = Vector::Ones(n);
  b.input.t.resize(n);
  Matrix noisy(d, n);

  switch (method.method) {
    case Method::flow_matching: {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double t = rng.uniform();
        b.time(j) = t;
        b.sigma(j) = 1.0 - t;
        noisy.col(j) = paths::condot_point(t, b.noise.col(j), clean.col(j));
        b.input.t(j) = t;
      }
      b.target = clean - b.noise;
      break;
    }
    case Method::score_matching: {
      b.target.resize(d, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double tau = paths::kTimeEps + (1.0 - paths::kTimeEps) * rng.uniform();
        const double m = method.sde.mean_coeff(tau);
        const double s = method.sde.marginal_std(tau);
        b.time(j) = tau;
        b.sigma(j) = s;
        noisy.col(j) = m * clean.col(j) + s * b.noise.col(j);
        b.target.col(j) = -b.noise.col(j) / s;
        // Noise-prediction parameterisation: score = output / sigma.
        b.out_scale(j) = 1.0 / s;
        const double g = method.sde.diffusion(tau);
        b.weight(j) = method.weighting == DsmWeighting::sigma2 ? s * s : g * g;
        b.input.t(j) = 1.0 - tau;
      }
      break;
    }
    case Method::diffusion_edm: {
      b.target = clean;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double sigma = paths::sample_training_sigma(method.edm, rng);
        const auto c = paths::edm_precondition(method.edm, sigma);
        b.time(j) = sigma;
        b.sigma(j) = sigma;
        noisy.col(j) = clean.col(j) + sigma * b.noise.col(j);
        b.out_scale(j) = c.c_out;
        b.weight(j) = paths::edm_loss_weight(method.edm, sigma);
        b.input.t(j) = c.c_noise;
      }
      break;
    }
  }

  if (mask) noisy = (b.keep.array() * noisy.array() + mask->array() * clean.array()).matrix();

  if (method.method == Method::diffusion_edm) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto c = paths::edm_precondition(method.edm, b.sigma(j));
      b.offset.col(j) = c.c_skip * noisy.col(j);
      noisy.col(j) *= c.c_in;
    }
  }
  b.input.x = std::move(noisy);
  b.input.context = mask ? *mask : context;
  return b;
}

double batch_loss(const NoisyBatch& b, const Matrix& out, Matrix* d_out) {
  require_same_shape(out.rows(), out.cols(), b.target.rows(), b.target.cols(), "batch_loss");
  const Eigen::Index n = out.cols();
  const Matrix pred = (out * b.out_scale.asDiagonal()) + b.offset;
  const Matrix r = (b.keep.array() * (pred - b.target).array()).matrix();
  const double loss = (r.colwise().squaredNorm().transpose().array() * b.weight.array()).sum() / double(n);
  if (d_out) *d_out = r * (2.0 / double(n) * b.weight.array() * b.out_scale.array()).matrix().asDiagonal();
  return loss;
}

template <typename Scalar>
double evaluate_loss(const FieldModel<Scalar>& model, const ParamStore<Scalar>& params, const NoisyBatch& batch,
                     ParamStore<Scalar>* grad) {
  FieldInput<Scalar> in{batch.input.x.template cast<Scalar>(), batch.input.t.template cast<Scalar>(),
                        batch.input.context.template cast<Scalar>()};
  typename FieldModel<Scalar>::Cache cache;
  const MatrixX<Scalar> out = model.forward(params, in, grad ? &cache : nullptr);
  if (!grad) return batch_loss(batch, out.template cast<double>());
  Matrix d_out;
  const double loss = batch_loss(batch, out.template cast<double>(), &d_out);
  model.backward(params, cache, d_out.cast<Scalar>(), *grad);
  return loss;
}

template double evaluate_loss(const FieldModel<float>&, const ParamStore<float>&, const NoisyBatch&,
                              ParamStore<float>*);
template double evaluate_loss(const FieldModel<double>&, const ParamStore<double>&, const NoisyBatch&,
                              ParamStore<double>*);

double cfm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& x1, const Matrix& cond,
                Rng& rng) {
  MethodConfig m;
  m.method = Method::flow_matching;
  return evaluate_loss(model, params, prepare_batch(m, x1, cond, nullptr, rng));
}

double dsm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& x1, const Matrix& cond,
                const paths::Sde& sde, DsmWeighting weighting, Rng& rng) {
  MethodConfig m;
  m.method = Method::score_matching;
  m.sde = sde;
  m.weighting = weighting;
  return evaluate_loss(model, params, prepare_batch(m, x1, cond, nullptr, rng));
}

double edm_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& y, const Matrix& cond,
                const paths::EDMPreconditioner& p, Rng& rng) {
  MethodConfig m;
  m.method = Method::diffusion_edm;
  m.edm = p;
  return evaluate_loss(model, params, prepare_batch(m, y, cond, nullptr, rng));
}

double joint_masked_loss(const FieldModel<float>& model, const ParamStore<float>& params, const Matrix& z1,
                         Eigen::Index d_theta, const ConditionMaskPolicy& policy, const MethodConfig& method,
                         Rng& rng) {
  if (!model.config().joint_mode) throw ConfigError("joint_masked_loss requires a joint-mode model");
  const Matrix masks = policy.draw_batch(d_theta, z1.rows() - d_theta, z1.cols(), rng);
  return evaluate_loss(model, params, prepare_batch(method, z1, Matrix(), &masks, rng));
}

// ---------------------------------------------------------------- optimisation

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (!(warmup_steps >= 0 && warmup_steps < total_steps)) throw ConfigError("warmup_steps must be < total_steps");
  if (!(peak_lr > 0.0) || !(min_lr > 0.0) || !(min_lr <= peak_lr))
    throw ConfigError("learning rates must satisfy 0 < min_lr <= peak_lr");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in (0,1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0,1)");
  if (!(early_stop_ratio > 1.0)) throw ConfigError("early_stop_ratio must be > 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
}

double lr_schedule(const TrainConfig& cfg, int step) {
  if (step < 0 || step > cfg.total_steps) throw DomainError("lr_schedule: step outside [0, total_steps]");
  if (step < cfg.warmup_steps) return cfg.peak_lr * double(step) / double(cfg.warmup_steps);
  const double span = double(cfg.total_steps - cfg.warmup_steps);
  const double progress = double(step - cfg.warmup_steps) / span;
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(ParamStore<float>& params, const ParamStore<float>& grad, AdamWState& state, const TrainConfig& cfg,
                  double lr) {
  const Eigen::Index n = params.size();
  if (state.m.size() != n) {
    state.m = VectorF::Zero(n);
    state.v = VectorF::Zero(n);
  }
  ++state.step;
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
  const float c1 = float(1.0 - std::pow(cfg.beta1, state.step));
  const float c2 = float(1.0 - std::pow(cfg.beta2, state.step));
  const float flr = float(lr), wd = float(cfg.weight_decay), eps = float(cfg.adam_eps);
  for (const auto& s : params.layout().specs()) {
    if (!s.trainable) continue;
    const Eigen::Index len = s.rows * s.cols;
    auto p = params.flat().segment(s.offset, len);
    const auto g = grad.flatten().segment(s.offset, len);
    auto m = state.m.segment(s.offset, len);
    auto v = state.v.segment(s.offset, len);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseAbs2();
    p.array() -= flr * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps) + wd * p.array());
  }
}

void EMAState::update(const ParamStore<float>& params) {
  const float d = float(decay);
  shadow.flat() = d * shadow.flat() + (1.0f - d) * params.flatten();
}

namespace {

struct Split {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> val;
};

Split split_indices(Eigen::Index n, double val_fraction, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index(0));
  Rng rng = Rng(seed).split(0x5eed5u);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  const auto n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(val_fraction * double(n))));
  if (n_val >= n) throw ConfigError("dataset too small for a validation split");
  Split s;
  s.val.assign(idx.begin(), idx.begin() + n_val);
  s.train.assign(idx.begin() + n_val, idx.end());
  return s;
}

Matrix gather(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  if (m.size() == 0) return Matrix();
  Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(Eigen::Index(j)) = m.col(idx[j]);
  return out;
}

NoisyBatch make_batch(const TrainProblem& pb, const std::vector<Eigen::Index>& idx, Rng& rng) {
  const Matrix clean = gather(pb.targets, idx);
  if (pb.pipeline == Pipeline::joint) {
    const Matrix masks =
        pb.mask_policy.draw_batch(pb.d_theta, pb.targets.rows() - pb.d_theta, clean.cols(), rng);
    return prepare_batch(pb.method, clean, Matrix(), &masks, rng);
  }
  return prepare_batch(pb.method, clean, gather(pb.context, idx), nullptr, rng);
}

}  // namespace

TrainResult train(const TrainProblem& pb, const TrainConfig& cfg, std::optional<TrainState> resume,
                  const CheckpointHook& hook) {
  cfg.validate();
  pb.method.validate();
  if (!pb.model) throw ConfigError("train: no model");
  if (pb.targets.cols() == 0) throw ConfigError("train: empty dataset");
  if (pb.pipeline == Pipeline::joint) pb.mask_policy.validate();
  const FieldModel<float>& model = *pb.model;

  const Split split = split_indices(pb.targets.cols(), cfg.val_fraction, cfg.seed);
  std::vector<Eigen::Index> val_idx = split.val;
  if (static_cast<int>(val_idx.size()) > cfg.max_val_samples) val_idx.resize(static_cast<std::size_t>(cfg.max_val_samples));
  Rng val_rng = Rng(cfg.seed).split(0xa11da7eu);
  const NoisyBatch val_batch = make_batch(pb, val_idx, val_rng);

  TrainResult result;
  TrainState& st = result.state;
  if (resume) {
    st = std::move(*resume);
    if (!(st.params.layout() == model.layout())) throw ConfigError("resume state does not match the model layout");
  } else {
    st.params = model.init(cfg.seed);
    st.ema.shadow = st.params;
  }
  st.ema.decay = cfg.ema_decay;

  const Rng master(cfg.seed);
  double running = 0.0;
  int running_n = 0;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(cfg.batch_size));
  ParamStore<float> grad(model.layout());

  while (st.step < cfg.total_steps) {
    const int step = st.step;
    Rng rng = master.split(static_cast<std::uint64_t>(step));
    for (auto& i : idx) i = split.train[rng.index(split.train.size())];
    const NoisyBatch batch = make_batch(pb, idx, rng);

    grad.set_zero();
    const double loss = evaluate_loss(model, st.params, batch, &grad);
    if (!std::isfinite(loss) || !grad.flatten().allFinite())
      throw Error("training diverged at step " + std::to_string(step) + " (loss = " + std::to_string(loss) + ")");
    const double lr = lr_schedule(cfg, step);
    adamw_update(st.params, grad, st.adam, cfg, lr);
    st.ema.update(st.params);
    st.step = step + 1;
    running += loss;
    ++running_n;

    if (st.step % cfg.eval_interval == 0 || st.step == cfg.total_steps) {
      const double val = evaluate_loss(model, st.ema.shadow, val_batch);
      if (!std::isfinite(val)) throw Error("validation loss is not finite at step " + std::to_string(st.step));
      st.history.push_back({st.step, running / std::max(running_n, 1), val, lr});
      running = 0.0;
      running_n = 0;
      const bool best = val < st.best_val;
      if (best) st.best_val = val;
      if (val / st.best_val > cfg.early_stop_ratio) ++st.bad_evals;
      else st.bad_evals = 0;
      if (hook) hook(st, best);
      if (st.bad_evals >= cfg.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history) {
  CsvTable t;
  t.header = {"step", "train_loss", "val_loss", "lr"};
  t.values.resize(static_cast<Eigen::Index>(history.size()), 4);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    t.values.row(Eigen::Index(i)) << double(h.step), h.train_loss, h.val_loss, h.lr;
  }
  write_csv(path, t);
}

}  // namespace densflow
