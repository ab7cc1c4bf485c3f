#pragma once

// Residual MLP field approximator with hand-written reverse-mode parameter
// gradients and forward-mode input directional derivatives.

#include "densflow/types.hpp"

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace densflow {

enum class Activation { gelu, silu, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// ---------------------------------------------------------------- params

struct ParamSpec {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index offset;
  bool trainable = true;
};

/// Ordered list of named arrays laid out back to back in one flat vector.
class ParamLayout {
 public:
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols, bool trainable = true);
  const std::vector<ParamSpec>& specs() const { return specs_; }
  const ParamSpec& spec(std::size_t i) const { return specs_.at(i); }
  std::size_t find(const std::string& name) const;
  Eigen::Index size() const { return size_; }
  bool operator==(const ParamLayout& o) const;

 private:
  std::vector<ParamSpec> specs_;
  Eigen::Index size_ = 0;
};

template <typename Scalar>
class ParamStore {
 public:
  using Map = Eigen::Map<MatrixX<Scalar>>;
  using ConstMap = Eigen::Map<const MatrixX<Scalar>>;

  ParamStore() = default;
  explicit ParamStore(ParamLayout layout) : layout_(std::move(layout)), flat_(VectorX<Scalar>::Zero(layout_.size())) {}

  /// Inverse of flatten(); throws ShapeError when sizes disagree.
  static ParamStore unflatten(ParamLayout layout, VectorX<Scalar> flat) {
    if (flat.size() != layout.size()) throw ShapeError("ParamStore::unflatten: size mismatch");
    ParamStore p;
    p.layout_ = std::move(layout);
    p.flat_ = std::move(flat);
    return p;
  }

  const VectorX<Scalar>& flatten() const { return flat_; }
  VectorX<Scalar>& flat() { return flat_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::Index size() const { return flat_.size(); }

  Map block(std::size_t i) {
    const auto& s = layout_.spec(i);
    return Map(flat_.data() + s.offset, s.rows, s.cols);
  }
  ConstMap block(std::size_t i) const {
    const auto& s = layout_.spec(i);
    return ConstMap(flat_.data() + s.offset, s.rows, s.cols);
  }
  Map block(const std::string& name) { return block(layout_.find(name)); }
  ConstMap block(const std::string& name) const { return block(layout_.find(name)); }

  template <typename Other>
  ParamStore<Other> cast() const {
    return ParamStore<Other>::unflatten(layout_, flat_.template cast<Other>());
  }

  void set_zero() { flat_.setZero(); }

 private:
  ParamLayout layout_;
  VectorX<Scalar> flat_;
};

// ---------------------------------------------------------------- MLP core

struct MlpConfig {
  int input_dim = 1;
  int output_dim = 1;
  int width = 64;
  int depth = 2;  // hidden blocks after the input layer
  Activation activation = Activation::gelu;
  bool residual = true;
  bool layer_norm = true;
  bool zero_output = true;
};

template <typename Scalar>
struct MlpCache {
  MatrixX<Scalar> input;
  MatrixX<Scalar> z0;
  std::vector<MatrixX<Scalar>> h;       // h[0] after input layer, h[k] after block k
  std::vector<MatrixX<Scalar>> normed;  // block inputs after layer norm
  std::vector<MatrixX<Scalar>> xhat;    // standardized block inputs (layer norm only)
  std::vector<VectorX<Scalar>> inv_std;
  std::vector<MatrixX<Scalar>> z;       // block pre-activations
};

/// h0 = act(W_in u + b_in)
/// h_k = [h_{k-1} +] act(W_k LN(h_{k-1}) + b_k)
/// y = W_out h_depth + b_out
template <typename Scalar>
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpConfig cfg, ParamLayout& layout, const std::string& prefix = "");

  const MlpConfig& config() const { return cfg_; }

  void init(ParamStore<Scalar>& params, Rng& rng) const;

  MatrixX<Scalar> forward(const ParamStore<Scalar>& params, const MatrixX<Scalar>& input,
                          MlpCache<Scalar>* cache = nullptr) const;

  /// Accumulates dL/dparams into grad given dL/doutput; optionally returns dL/dinput.
  void backward(const ParamStore<Scalar>& params, const MlpCache<Scalar>& cache, const MatrixX<Scalar>& d_out,
                ParamStore<Scalar>& grad, MatrixX<Scalar>* d_input = nullptr) const;

  /// (d output / d input) * d_input, column by column.
  MatrixX<Scalar> jvp(const ParamStore<Scalar>& params, const MatrixX<Scalar>& input,
                      const MatrixX<Scalar>& d_input) const;

 private:
  struct Block {
    std::size_t gain = 0, shift = 0, weight = 0, bias = 0;
  };
  MlpConfig cfg_;
  std::size_t in_weight_ = 0, in_bias_ = 0, out_weight_ = 0, out_bias_ = 0;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------- field model

struct FieldModelConfig {
  int input_dim = 2;
  int cond_dim = 0;
  int hidden_width = 128;
  int depth = 5;
  int time_embed_dim = 32;
  double time_embed_scale = 16.0;
  Activation activation = Activation::gelu;
  bool joint_mode = false;

  void validate() const;
  /// Width of the concatenated network input [x_t, cond|mask, time embedding].
  int network_input_dim() const;
};

/// Inputs to one batched field evaluation. `context` is the condition
/// (cond_dim rows) in conditional mode, the mask (input_dim rows) in joint
/// mode and empty otherwise. `t` and `context` may have a single column,
/// which is broadcast across the batch.
template <typename Scalar>
struct FieldInput {
  MatrixX<Scalar> x;
  VectorX<Scalar> t;
  MatrixX<Scalar> context;
};

template <typename Scalar>
class FieldModel {
 public:
  using Cache = MlpCache<Scalar>;

  explicit FieldModel(FieldModelConfig cfg);

  const FieldModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::Index parameter_count() const { return layout_.size(); }

  /// Deterministic in the seed; the output layer starts at zero.
  ParamStore<Scalar> init(std::uint64_t seed) const;

  MatrixX<Scalar> time_embedding(const ParamStore<Scalar>& params, const VectorX<Scalar>& t, Eigen::Index n) const;
  MatrixX<Scalar> assemble(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in) const;

  MatrixX<Scalar> forward(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in, Cache* cache = nullptr) const;
  void backward(const ParamStore<Scalar>& params, const Cache& cache, const MatrixX<Scalar>& d_out,
                ParamStore<Scalar>& grad) const;
  /// (d output / d x_t) * direction.
  MatrixX<Scalar> jvp_input(const ParamStore<Scalar>& params, const FieldInput<Scalar>& in,
                            const MatrixX<Scalar>& direction) const;

 private:
  void check_input(const FieldInput<Scalar>& in) const;

  FieldModelConfig cfg_;
  ParamLayout layout_;
  std::size_t freq_ = 0;
  Mlp<Scalar> mlp_;
};

/// Loss on the network output: returns the value and writes dL/doutput.
template <typename Scalar>
using OutputLoss = std::function<double(const MatrixX<Scalar>& output, MatrixX<Scalar>& d_output)>;

template <typename Scalar>
ParamStore<Scalar> grad_params(const FieldModel<Scalar>& model, const ParamStore<Scalar>& params,
                               const FieldInput<Scalar>& in, const OutputLoss<Scalar>& loss, double* value = nullptr);

extern template class Mlp<float>;
extern template class Mlp<double>;
extern template class FieldModel<float>;
extern template class FieldModel<double>;

}  // namespace densflow
