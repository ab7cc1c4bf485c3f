#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "densflow/model.hpp"

#include <cmath>

using namespace densflow;

namespace {

FieldModelConfig small_config(Activation act = Activation::gelu, bool joint = false) {
  FieldModelConfig c;
  c.input_dim = 3;
  c.cond_dim = joint ? 0 : 2;
  c.hidden_width = 16;
  c.depth = 2;
  c.time_embed_dim = 8;
  c.time_embed_scale = 2.0;
  c.activation = act;
  c.joint_mode = joint;
  return c;
}

// Initialised parameters with every trainable entry jittered so that the
// zero output layer does not hide the rest of the network.
ParamStore<double> random_params(const FieldModel<double>& model, std::uint64_t seed) {
  ParamStore<double> p = model.init(seed);
  Rng rng(seed + 100);
  for (const auto& s : p.layout().specs()) {
    if (!s.trainable) continue;
    for (Eigen::Index i = 0; i < s.rows * s.cols; ++i) p.flat()(s.offset + i) += 0.3 * rng.normal();
  }
  return p;
}

FieldInput<double> random_input(const FieldModelConfig& c, Eigen::Index n, Rng& rng) {
  FieldInput<double> in;
  in.x = rng.normal(c.input_dim, n);
  in.t = rng.uniform(n, 1).col(0);
  if (c.joint_mode) {
    in.context = Matrix::Zero(c.input_dim, n);
    for (Eigen::Index j = 0; j < n; ++j) in.context(0, j) = rng.uniform() < 0.5 ? 1.0 : 0.0;
  } else if (c.cond_dim > 0) {
    in.context = rng.normal(c.cond_dim, n);
  }
  return in;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST_CASE("initialisation is deterministic and zero at the output") {
  FieldModel<float> model(small_config());
  const auto a = model.init(42), b = model.init(42), c = model.init(43);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
  Rng rng(1);
  FieldInput<float> in;
  in.x = rng.normal(3, 7).cast<float>();
  in.t = VectorF::Constant(1, 0.3f);
  in.context = rng.normal(2, 7).cast<float>();
  CHECK(model.forward(a, in).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("parameter count") {
  FieldModelConfig c;
  c.input_dim = 2;
  c.cond_dim = 2;
  c.hidden_width = 64;
  c.depth = 3;
  c.time_embed_dim = 32;
  FieldModel<float> model(c);
  const Eigen::Index in = 2 + 2 + 32;
  const Eigen::Index w = 64;
  const Eigen::Index expected = 32 / 2         // Fourier frequencies
                                + w * in + w   // input layer
                                + 3 * (2 * w + w * w + w)  // layer norm + dense per block
                                + 2 * w + 2;   // output layer
  CHECK(model.parameter_count() == expected);
}

TEST_CASE("output shape over random configurations") {
  Rng rng(9);
  for (int k = 0; k < 30; ++k) {
    FieldModelConfig c;
    c.input_dim = 1 + int(rng.index(6));
    c.joint_mode = rng.uniform() < 0.3;
    c.cond_dim = c.joint_mode ? 0 : int(rng.index(4));
    c.hidden_width = 4 + int(rng.index(12));
    c.depth = 1 + int(rng.index(3));
    c.time_embed_dim = 2 * (1 + int(rng.index(4)));
    FieldModel<double> model(c);
    const auto p = random_params(model, k);
    const auto in = random_input(c, 5, rng);
    const Matrix out = model.forward(p, in);
    CHECK(out.rows() == c.input_dim);
    CHECK(out.cols() == 5);
  }
}

TEST_CASE("shape errors") {
  FieldModel<double> model(small_config());
  const auto p = model.init(0);
  Rng rng(2);
  auto in = random_input(small_config(), 4, rng);
  in.context.resize(0, 0);
  CHECK_THROWS_AS(model.forward(p, in), ShapeError);
  in = random_input(small_config(), 4, rng);
  in.x = rng.normal(2, 4);
  CHECK_THROWS_AS(model.forward(p, in), ShapeError);
}

TEST_CASE("joint mode sees observed coordinates only through the state") {
  const auto c = small_config(Activation::gelu, true);
  FieldModel<double> model(c);
  const auto p = random_params(model, 4);
  Rng rng(5);
  FieldInput<double> in;
  in.x = rng.normal(3, 1);
  in.t = Vector::Constant(1, 0.4);
  in.context = Matrix::Zero(3, 1);
  in.context(1, 0) = 1.0;
  const Matrix base = model.forward(p, in);
  FieldInput<double> moved = in;
  moved.x(1, 0) += 0.5;
  CHECK((model.forward(p, moved) - base).norm() > 1e-6);
  FieldInput<double> masked = in;
  masked.context(1, 0) = 0.0;
  CHECK((model.forward(p, masked) - base).norm() > 1e-6);
}

TEST_CASE("parameter gradients match finite differences") {
  for (Activation act : {Activation::gelu, Activation::silu, Activation::tanh}) {
    for (bool joint : {false, true}) {
      const auto c = small_config(act, joint);
      FieldModel<double> model(c);
      const auto p = random_params(model, 7);
      Rng rng(8);
      const auto in = random_input(c, 6, rng);
      const Matrix target = rng.normal(c.input_dim, 6);
      OutputLoss<double> loss = [&](const Matrix& out, Matrix& d) {
        d = out - target;
        return 0.5 * d.squaredNorm();
      };
      const auto grad = grad_params(model, p, in, loss);
      auto value = [&](const ParamStore<double>& q) { return 0.5 * (model.forward(q, in) - target).squaredNorm(); };
      int checked = 0;
      while (checked < 20) {
        const Eigen::Index i = Eigen::Index(rng.index(std::size_t(p.size())));
        if (i < c.time_embed_dim / 2) continue;  // frozen frequencies
        ParamStore<double> a = p, b = p;
        const double h = 1e-4;
        a.flat()(i) += h;
        b.flat()(i) -= h;
        const double fd = (value(a) - value(b)) / (2 * h);
        CAPTURE(i);
        if (std::abs(fd) > 1e-6) CHECK(rel_err(grad.flatten()(i), fd) < 1e-4);
        else CHECK(std::abs(grad.flatten()(i)) < 1e-6);
        ++checked;
      }
      CHECK(grad.block("time.freq").norm() == 0.0);
    }
  }
}

TEST_CASE("gradient linearity and independence") {
  const auto c = small_config();
  FieldModel<double> model(c);
  const auto p = random_params(model, 2);
  Rng rng(3);
  const auto in = random_input(c, 4, rng);
  OutputLoss<double> base = [](const Matrix& out, Matrix& d) {
    d = out;
    return 0.5 * out.squaredNorm();
  };
  OutputLoss<double> scaled = [](const Matrix& out, Matrix& d) {
    d = 3.0 * out;
    return 1.5 * out.squaredNorm();
  };
  const auto g1 = grad_params(model, p, in, base);
  const auto g3 = grad_params(model, p, in, scaled);
  CHECK((g3.flatten() - 3.0 * g1.flatten()).norm() < 1e-10 * (1 + g3.flatten().norm()));
  // A loss on output row 0 only leaves the output weights of rows 1, 2 untouched.
  OutputLoss<double> row0 = [](const Matrix& out, Matrix& d) {
    d.setZero(out.rows(), out.cols());
    d.row(0) = out.row(0);
    return 0.5 * out.row(0).squaredNorm();
  };
  const auto g = grad_params(model, p, in, row0);
  CHECK(g.block("net.out.weight").bottomRows(2).norm() == 0.0);
  CHECK(g.block("net.out.bias").bottomRows(2).norm() == 0.0);
}

TEST_CASE("input jvp matches finite differences and is linear") {
  for (Activation act : {Activation::gelu, Activation::silu, Activation::tanh}) {
    const auto c = small_config(act);
    FieldModel<double> model(c);
    const auto p = random_params(model, 11);
    Rng rng(12);
    const auto in = random_input(c, 5, rng);
    const Matrix d1 = rng.normal(3, 5), d2 = rng.normal(3, 5);
    CHECK(model.jvp_input(p, in, Matrix::Zero(3, 5)).norm() == 0.0);
    const Matrix j1 = model.jvp_input(p, in, d1);
    const double h = 1e-5;
    FieldInput<double> a = in, b = in;
    a.x += h * d1;
    b.x -= h * d1;
    const Matrix fd = (model.forward(p, a) - model.forward(p, b)) / (2 * h);
    CHECK((j1 - fd).norm() / fd.norm() < 1e-4);
    const Matrix j12 = model.jvp_input(p, in, d1 + d2);
    CHECK((j12 - j1 - model.jvp_input(p, in, d2)).norm() < 1e-12 * (1 + j12.norm()));
  }
}

TEST_CASE("float and double evaluations agree") {
  const auto c = small_config();
  FieldModel<double> md(c);
  FieldModel<float> mf(c);
  const auto p = random_params(md, 1);
  Rng rng(2);
  const auto in = random_input(c, 8, rng);
  FieldInput<float> inf{in.x.cast<float>(), in.t.cast<float>(), in.context.cast<float>()};
  const Matrix od = md.forward(p, in);
  const Matrix of = mf.forward(p.cast<float>(), inf).cast<double>();
  CHECK((od - of).norm() / od.norm() < 1e-4);
}

TEST_CASE("param store flatten round trip") {
  FieldModel<float> model(small_config());
  const auto p = model.init(3);
  const auto q = ParamStore<float>::unflatten(p.layout(), p.flatten());
  CHECK(q.flatten() == p.flatten());
  CHECK_THROWS_AS(ParamStore<float>::unflatten(p.layout(), VectorF::Zero(3)), ShapeError);
}
