#include "densflow/model.hpp"

#include <cmath>
#include <numbers>

namespace densflow {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
  }
  return "gelu";
}

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "silu") return Activation::silu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "' (expected gelu|silu|tanh)");
}

std::size_t ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols, bool trainable) {
  specs_.push_back({std::move(name), rows, cols, size_, trainable});
  size_ += rows * cols;
  return specs_.size() - 1;
}

std::size_t ParamLayout::find(const std::string& name) const {
  for (std::size_t i = 0; i < specs_.size(); ++i)
    if (specs_[i].name == name) return i;
  throw ShapeError("no parameter array named '" + name + "'");
}

bool ParamLayout::operator==(const ParamLayout& o) const {
  if (specs_.size() != o.specs_.size() || size_ != o.size_) return false;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& a = specs_[i];
    const auto& b = o.specs_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.offset != b.offset || a.trainable != b.trainable)
      return false;
  }
  return true;
}

namespace {

// GELU uses the tanh approximation so that it vectorizes like the others.
template <typename S>
MatrixX<S> activate(Activation a, const MatrixX<S>& z) {
  switch (a) {
    case Activation::gelu: {
      const S k = S(std::sqrt(2.0 / std::numbers::pi));
      const S c = S(0.044715);
      return (S(0.5) * z.array() * (S(1) + (k * (z.array() + c * z.array().cube())).tanh())).matrix();
    }
    case Activation::silu: return (z.array() / (S(1) + (-z.array()).exp())).matrix();
    case Activation::tanh: return z.array().tanh().matrix();
  }
  return z;
}

template <typename S>
MatrixX<S> activation_grad(Activation a, const MatrixX<S>& z) {
  switch (a) {
    case Activation::gelu: {
      const S k = S(std::sqrt(2.0 / std::numbers::pi));
      const S c = S(0.044715);
      const auto x = z.array();
      const auto th = (k * (x + c * x.cube())).tanh().eval();
      return (S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th.square()) * k * (S(1) + S(3) * c * x.square()))
          .matrix();
    }
    case Activation::silu: {
      const auto sig = (S(1) / (S(1) + (-z.array()).exp())).eval();
      return (sig * (S(1) + z.array() * (S(1) - sig))).matrix();
    }
    case Activation::tanh: return (S(1) - z.array().tanh().square()).matrix();
  }
  return MatrixX<S>::Ones(z.rows(), z.cols());
}

constexpr double kLayerNormEps = 1e-5;

// Column-wise standardization over the feature axis.
template <typename S>
void layer_norm_stats(const MatrixX<S>& h, MatrixX<S>& xhat, VectorX<S>& inv_std) {
  const Eigen::Index w = h.rows();
  const auto mean = (h.colwise().sum() / S(w)).eval();
  xhat = h.rowwise() - mean;
  inv_std = ((xhat.colwise().squaredNorm().array() / S(w)) + S(kLayerNormEps)).rsqrt().matrix().transpose();
  xhat = xhat * inv_std.asDiagonal();
}

// Shared by backward and jvp: d(xhat) given d(h).
template <typename S>
MatrixX<S> layer_norm_tangent(const MatrixX<S>& xhat, const VectorX<S>& inv_std, const MatrixX<S>& dh) {
  const S w = S(xhat.rows());
  const auto mean_dh = (dh.colwise().sum() / w).eval();
  const auto mean_xdh = ((xhat.array() * dh.array()).colwise().sum() / w).eval();
  MatrixX<S> out = dh.rowwise() - mean_dh;
  out -= (xhat.array().rowwise() * mean_xdh.array()).matrix();
  return out * inv_std.asDiagonal();
}

}  // namespace

// ---------------------------------------------------------------- Mlp

template <typename Scalar>
Mlp<Scalar>::Mlp(MlpConfig cfg, ParamLayout& layout, const std::string& prefix) : cfg_(cfg) {
  if (cfg_.depth < 1) throw ConfigError("MLP depth must be >= 1");
  if (cfg_.width < 1 || cfg_.input_dim < 1 || cfg_.output_dim < 1) throw ConfigError("MLP dimensions must be positive");
  const Eigen::Index w = cfg_.width;
  in_weight_ = layout.add(prefix + "in.weight", w, cfg_.input_dim);
  in_bias_ = layout.add(prefix + "in.bias", w, 1);
  for (int k = 0; k < cfg_.depth; ++k) {
    const std::string p = prefix + "block" + std::to_string(k) + ".";
    Block b;
    if (cfg_.layer_norm) {
      b.gain = layout.add(p + "ln_gain", w, 1);
      b.shift = layout.add(p + "ln_bias", w, 1);
    }
    b.weight = layout.add(p + "weight", w, w);
    b.bias = layout.add(p + "bias", w, 1);
    blocks_.push_back(b);
  }
  out_weight_ = layout.add(prefix + "out.weight", cfg_.output_dim, w);
  out_bias_ = layout.add(prefix + "out.bias", cfg_.output_dim, 1);
}

template <typename Scalar>
void Mlp<Scalar>::init(ParamStore<Scalar>& params, Rng& rng) const {
  auto fill = [&](std::size_t idx, double bound) {
    auto m = params.block(idx);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = Scalar(rng.uniform(-bound, bound));
  };
  const double b_in = 1.0 / std::sqrt(double(cfg_.input_dim));
  const double b_hidden = 1.0 / std::sqrt(double(cfg_.width));
  fill(in_weight_, b_in);
  fill(in_bias_, b_in);
  for (const auto& b : blocks_) {
    if (cfg_.layer_norm) {
      params.block(b.gain).setOnes();
      params.block(b.shift).setZero();
    }
    fill(b.weight, b_hidden);
    fill(b.bias, b_hidden);
  }
  if (cfg_.zero_output) {
    params.block(out_weight_).setZero();
    params.block(out_bias_).setZero();
  } else {
    fill(out_weight_, b_hidden);
    fill(out_bias_, b_hidden);
  }
}

template <typename Scalar>
MatrixX<Scalar> Mlp<Scalar>::forward(const ParamStore<Scalar>& params, const MatrixX<Scalar>& input,
                                     MlpCache<Scalar>* cache) const {
  if (input.rows() != cfg_.input_dim) throw ShapeError("Mlp::forward: input has wrong number of rows");
  MatrixX<Scalar> z0 = params.block(in_weight_) * input;
  z0.colwise() += params.block(in_bias_).col(0);
  MatrixX<Scalar> h = activate(cfg_.activation, z0);
  if (cache) {
    cache->input = input;
    cache->z0 = z0;
    cache->h.assign(1, h);
    cache->normed.clear();
    cache->xhat.clear();
    cache->inv_std.clear();
    cache->z.clear();
  }
  for (const auto& b : blocks_) {
    MatrixX<Scalar> normed;
    if (cfg_.layer_norm) {
      MatrixX<Scalar> xhat;
      VectorX<Scalar> inv;
      layer_norm_stats(h, xhat, inv);
      normed = params.block(b.gain).col(0).asDiagonal() * xhat;
      normed.colwise() += params.block(b.shift).col(0);
      if (cache) {
        cache->xhat.push_back(std::move(xhat));
        cache->inv_std.push_back(std::move(inv));
      }
    } else {
      normed = h;
    }
    MatrixX<Scalar> z = params.block(b.weight) * normed;
    z.colwise() += params.block(b.bias).col(0);
    MatrixX<Scalar> a = activate(cfg_.activation, z);
    if (cfg_.residual) h += a;
    else h = std::move(a);
    if (cache) {
      cache->normed.push_back(std::move(normed));
      cache->z.push_back(std::move(z));
      cache->h.push_back(h);
    }
  }
  MatrixX<Scalar> out = params.block(out_weight_) * h;
  out.colwise() += params.block(out_bias_).col(0);
  return out;
}

template <typename Scalar>
void Mlp<Scalar>::backward(const ParamStore<Scalar>& params, const MlpCache<Scalar>& cache,
                           const MatrixX<Scalar>& d_out, ParamStore<Scalar>& grad, MatrixX<Scalar>* d_input) const {
  if (cache.h.size() != blocks_.size() + 1) throw ShapeError("Mlp::backward: cache does not match network");
  const MatrixX<Scalar>& h_last = cache.h.back();
  grad.block(out_weight_).noalias() += d_out * h_last.transpose();
  grad.block(out_bias_).col(0) += d_out.rowwise().sum();
  MatrixX<Scalar> dh = params.block(out_weight_).transpose() * d_out;

  for (std::size_t k = blocks_.size(); k-- > 0;) {
    const auto& b = blocks_[k];
    const MatrixX<Scalar> dz = (dh.array() * activation_grad(cfg_.activation, cache.z[k]).array()).matrix();
    grad.block(b.weight).noalias() += dz * cache.normed[k].transpose();
    grad.block(b.bias).col(0) += dz.rowwise().sum();
    MatrixX<Scalar> dnormed = params.block(b.weight).transpose() * dz;
    MatrixX<Scalar> dprev;
    if (cfg_.layer_norm) {
      const auto& xhat = cache.xhat[k];
      grad.block(b.gain).col(0) += (dnormed.array() * xhat.array()).rowwise().sum().matrix();
      grad.block(b.shift).col(0) += dnormed.rowwise().sum();
      const MatrixX<Scalar> dxhat = params.block(b.gain).col(0).asDiagonal() * dnormed;
      dprev = layer_norm_tangent(xhat, cache.inv_std[k], dxhat);
    } else {
      dprev = std::move(dnormed);
    }
    if (cfg_.residual) dh += dprev;
    else dh = std::move(dprev);
  }

  const MatrixX<Scalar> dz0 = (dh.array() * activation_grad(cfg_.activation, cache.z0).array()).matrix();
  grad.block(in_weight_).noalias() += dz0 * cache.input.transpose();
  grad.block(in_bias_).col(0) += dz0.rowwise().sum();
  if (d_input) *d_input = params.block(in_weight_).transpose() * dz0;
}

template <typename Scalar>
MatrixX<Scalar> Mlp<Scalar>::jvp(const ParamStore<Scalar>& params, const MatrixX<Scalar>& input,
                                 const MatrixX<Scalar>& d_input) const {
  require_same_shape(input.rows(), input.cols(), d_input.rows(), d_input.cols(), "Mlp::jvp");
  MatrixX<Scalar> z0 = params.block(in_weight_) * input;
  z0.colwise() += params.block(in_bias_).col(0);
  MatrixX<Scalar> h = activate(cfg_.activation, z0);
  MatrixX<Scalar> dh =
      (activation_grad(cfg_.activation, z0).array() * (params.block(in_weight_) * d_input).array()).matrix();
  for (const auto& b : blocks_) {
    MatrixX<Scalar> normed, dnormed;
    if (cfg_.layer_norm) {
      MatrixX<Scalar> xhat;
      VectorX<Scalar> inv;
      layer_norm_stats(h, xhat, inv);
      const auto gain = params.block(b.gain).col(0);
      normed = gain.asDiagonal() * xhat;
      normed.colwise() += params.block(b.shift).col(0);
      dnormed = gain.asDiagonal() * layer_norm_tangent(xhat, inv, dh);
    } else {
      normed = h;
      dnormed = dh;
    }
    MatrixX<Scalar> z = params.block(b.weight) * normed;
    z.colwise() += params.block(b.bias).col(0);
    const MatrixX<Scalar> dz = params.block(b.weight) * dnormed;
    MatrixX<Scalar> a = activate(cfg_.activation, z);
    MatrixX<Scalar> da = (activation_grad(cfg_.activation, z).array() * dz.array()).matrix();
    if (cfg_.residual) {
      h += a;
      dh += da;
    } else {
      h = std::move(a);
      dh = std::move(da);
    }
  }
  return params.block(out_weight_) * dh;
}

// ---------------------------------------------------------------- FieldModel

void FieldModelConfig::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (cond_dim < 0) throw ConfigError("cond_dim must be >= 0");
  if (hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be a positive even number");
  if (joint_mode && cond_dim != 0) throw ConfigError("joint_mode requires cond_dim = 0 (conditioning enters via the mask)");
}

int FieldModelConfig::network_input_dim() const {
  return input_dim + (joint_mode ? input_dim : cond_dim) + time_embed_dim;
}

template <typename Scalar>
FieldModel<Scalar>::FieldModel(FieldModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  freq_ = layout_.add("time.freq", cfg_.time_embed_dim / 2, 1, false);
  MlpConfig m;
  m.input_dim = cfg_.network_input_dim();
  m.output_dim = cfg_.input_dim;
  m.width = cfg_.hidden_width;
  m.depth = cfg_.depth;
  m.activation = cfg_.activation;
  mlp_ = Mlp<Scalar>(m, layout_, "net.");
}

template <typename Scalar>
ParamStore<Scalar> FieldModel<Scalar>::init(std::uint64_t seed) const {
  ParamStore<Scalar> p(layout_);
  Rng rng(seed);
  auto f = p.block(freq_);
  for (Eigen::Index i = 0; i < f.rows(); ++i) f(i, 0) = Scalar(cfg_.time_embed_scale * rng.normal());
  mlp_.init(p, rng);
  return p;
}

template <typename Scalar>
void FieldModel<Scalar>::check_input(const FieldInput<Scalar>& in) const {
  const Eigen::Index n = in.x.cols();
  if (in.x.rows() != cfg_.input_dim) throw ShapeError("field input x has wrong dimension");
  if (in.t.size() != 1 && in.t.size() != n) throw ShapeError("field input t must have 1 or n entries");
  if (cfg_.joint_mode) {
    if (in.context.size() == 0) throw ShapeError("joint-mode model requires a condition mask");
    if (in.context.rows() != cfg_.input_dim) throw ShapeError("condition mask has wrong dimension");
  } else if (cfg_.cond_dim > 0) {
    if (in.context.size() == 0) throw ShapeError("conditional model requires a condition vector");
    if (in.context.rows() != cfg_.cond_dim) throw ShapeError("condition has wrong dimension");
  } else if (in.context.size() != 0) {
    throw ShapeError("condition provided to an unconditional model");
  }
  if (in.context.size() != 0 && in.context.cols() != 1 && in.context.cols() != n)
    throw ShapeError("condition must have 1 or n columns");
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::time_embedding(const ParamStore<Scalar>& params, const VectorX<Scalar>& t,
                                                   Eigen::Index n) const {
  const auto freq = params.block(freq_).col(0);
  const Eigen::Index half = freq.size();
  MatrixX<Scalar> out(2 * half, n);
  const Scalar two_pi = Scalar(2.0 * std::numbers::pi);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Scalar tj = t.size() == 1 ? t(0) : t(j);
    for (Eigen::Index k = 0; k < half; ++k) {
      const Scalar arg = two_pi * freq(k) * tj;
      out(k, j) = std::cos(arg);
      out(half + k, j) = std::sin(arg);
    }
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::assemble(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in) const {
  check_input(in);
  const Eigen::Index n = in.x.cols();
  const Eigen::Index d = cfg_.input_dim;
  const Eigen::Index c = in.context.rows();
  MatrixX<Scalar> u(cfg_.network_input_dim(), n);
  u.topRows(d) = in.x;
  if (c > 0) {
    if (in.context.cols() == 1) u.middleRows(d, c) = in.context.col(0).replicate(1, n);
    else u.middleRows(d, c) = in.context;
  }
  u.bottomRows(cfg_.time_embed_dim) = time_embedding(params, in.t, n);
  return u;
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::forward(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in,
                                            Cache* cache) const {
  return mlp_.forward(params, assemble(params, in), cache);
}

template <typename Scalar>
void FieldModel<Scalar>::backward(const ParamStore<Scalar>& params, const Cache& cache, const MatrixX<Scalar>& d_out,
                                  ParamStore<Scalar>& grad) const {
  mlp_.backward(params, cache, d_out, grad);
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::jvp_input(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in,
                                              const MatrixX<Scalar>& direction) const {
  require_same_shape(direction.rows(), direction.cols(), in.x.rows(), in.x.cols(), "jvp_input");
  const MatrixX<Scalar> u = assemble(params, in);
  MatrixX<Scalar> du = MatrixX<Scalar>::Zero(u.rows(), u.cols());
  du.topRows(cfg_.input_dim) = direction;
  return mlp_.jvp(params, u, du);
}

template <typename Scalar>
ParamStore<Scalar> grad_params(const FieldModel<Scalar>& model, const ParamStore<Scalar>& params,
                               const FieldInput<Scalar>& in, const OutputLoss<Scalar>& loss, double* value) {
  typename FieldModel<Scalar>::Cache cache;
  const MatrixX<Scalar> out = model.forward(params, in, &cache);
  MatrixX<Scalar> d_out = MatrixX<Scalar>::Zero(out.rows(), out.cols());
  const double v = loss(out, d_out);
  if (value) *value = v;
  ParamStore<Scalar> grad(params.layout());
  model.backward(params, cache, d_out, grad);
  return grad;
}

template class Mlp<float>;
template class Mlp<double>;
template class FieldModel<float>;
template class FieldModel<double>;
template ParamStore<float> grad_params(const FieldModel<float>&, const ParamStore<float>&, const FieldInput<float>&,
                                       const OutputLoss<float>&, double*);
template ParamStore<double> grad_params(const FieldModel<double>&, const ParamStore<double>&,
                                        const FieldInput<double>&, const OutputLoss<double>&, double*);

}  // namespace densflow
