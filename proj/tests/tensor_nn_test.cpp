#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gilab/autograd.hpp"
#include "gilab/model.hpp"
#include "gilab/rng.hpp"

using namespace gilab;

namespace {

ModelSpec spec_of(Shape input, std::initializer_list<const char*> layers) {
  ModelSpec s;
  s.input_shape = std::move(input);
  for (auto* l : layers) s.layers.push_back(parse_layer(l));
  return s;
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Plain-loop evaluation of flatten -> dense -> relu -> dense.
std::vector<double> reference_mlp(const Model& m, const Tensor& x) {
  const auto& w1 = lookup(m.params(), "layer1.weight");
  const auto& b1 = lookup(m.params(), "layer1.bias");
  const auto& w2 = lookup(m.params(), "layer3.weight");
  const auto& b2 = lookup(m.params(), "layer3.bias");
  const std::size_t batch = x.dim(0), in = w1.dim(1), hid = w1.dim(0), out = w2.dim(0);
  std::vector<double> logits;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> h(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      double acc = b1[j];
      for (std::size_t i = 0; i < in; ++i) acc += w1[j * in + i] * x[b * in + i];
      h[j] = acc > 0 ? acc : 0;
    }
    for (std::size_t k = 0; k < out; ++k) {
      double acc = b2[k];
      for (std::size_t j = 0; j < hid; ++j) acc += w2[k * hid + j] * h[j];
      logits.push_back(acc);
    }
  }
  return logits;
}

}  // namespace

TEST_CASE("forward: zero parameters give zero logits") {
  auto spec = spec_of({4}, {"dense:3"});
  Model m(spec, parameter_layout(spec));
  auto y = forward(m, random_tensor({2, 4}, 1));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("forward: identity dense layer passes input through") {
  auto spec = spec_of({3}, {"dense:3"});
  auto params = parameter_layout(spec);
  for (std::size_t i = 0; i < 3; ++i) params[0].value[i * 3 + i] = 1.0;
  Model m(spec, params);
  Tensor v(Shape{1, 3}, std::vector<double>{0.25, -1.5, 7.0});
  CHECK(forward(m, v) == v);
}

TEST_CASE("forward: seeded MLP matches plain-loop reference") {
  auto spec = spec_of({1, 4, 4}, {"flatten", "dense:7", "relu", "dense:5"});
  auto m = Model::init(spec, 42);
  auto x = random_tensor({3, 1, 4, 4}, 9);
  auto y = forward(m, x);
  auto ref = reference_mlp(m, x);
  REQUIRE(y.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("forward: shape errors name the offending layer") {
  auto spec = spec_of({1, 4, 4}, {"flatten", "dense:3"});
  auto m = Model::init(spec, 1);
  CHECK_THROWS_AS(forward(m, Tensor(Shape{2, 1, 4, 5})), ShapeError);
  auto bad = spec_of({1, 4, 4}, {"dense:3"});
  try {
    parameter_layout(bad);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 0 (dense)") != std::string::npos);
  }
}

TEST_CASE("forward is pure and bit-reproducible") {
  auto spec = spec_of({2, 8, 8}, {"conv2d:3", "relu", "avg_pool:2", "flatten", "dense:4"});
  auto m = Model::init(spec, 5);
  auto x = random_tensor({2, 2, 8, 8}, 6);
  CHECK(forward(m, x) == forward(m, x));
}

TEST_CASE("loss: uniform logits give ln K") {
  auto spec = spec_of({3}, {"dense:7"});
  Model m(spec, parameter_layout(spec));
  std::vector<int> labels{2, 6};
  auto g = loss_and_grads(m, random_tensor({2, 3}, 3), labels);
  CHECK(std::abs(g.loss_value - std::log(7.0)) < 1e-12);
}

TEST_CASE("loss: logit gradient equals softmax minus one-hot") {
  auto spec = spec_of({4}, {"dense:3"});
  auto m = Model::init(spec, 11);
  auto x = random_tensor({1, 4}, 12);
  std::vector<int> labels{1};
  auto g = loss_and_grads(m, x, labels);
  auto z = forward(m, x);
  double denom = 0;
  for (double v : z.data()) denom += std::exp(v);
  // d loss / d bias is exactly d loss / d logits for one sample.
  const auto& db = lookup(g.by_param, "layer0.bias");
  for (std::size_t k = 0; k < 3; ++k) {
    const double expect = std::exp(z[k]) / denom - (k == 1 ? 1.0 : 0.0);
    CHECK(db[k] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("loss: out-of-range label is rejected") {
  auto spec = spec_of({4}, {"dense:3"});
  auto m = Model::init(spec, 1);
  std::vector<int> labels{3};
  CHECK_THROWS_AS(loss_and_grads(m, random_tensor({1, 4}, 1), labels), Error);
}

TEST_CASE("loss: input gradient has the batch shape") {
  auto spec = spec_of({3, 8, 8}, {"conv2d:4", "relu", "avg_pool:2", "flatten", "dense:5"});
  auto m = Model::init(spec, 2);
  auto x = random_tensor({3, 3, 8, 8}, 2);
  std::vector<int> labels{0, 4, 2};
  CHECK(loss_and_grads(m, x, labels).by_input.shape() == x.shape());
}

TEST_CASE("grad_check: conv+dense model on 8x8 input agrees with finite differences") {
  auto spec = spec_of({1, 8, 8}, {"conv2d:3", "relu", "avg_pool:2", "flatten", "dense:4"});
  auto m = Model::init(spec, 77);
  auto x = random_tensor({2, 1, 8, 8}, 78);
  std::vector<int> labels{1, 3};
  CHECK(grad_check(m, x, labels, 1e-5) < 1e-4);
}

TEST_CASE("grad_check: linear model is exact to finite-difference precision") {
  auto spec = spec_of({5}, {"dense:3"});
  auto m = Model::init(spec, 4);
  std::vector<int> labels{0, 2};
  CHECK(grad_check(m, random_tensor({2, 5}, 4), labels, 1e-5) < 1e-8);
}

TEST_CASE("grad_check: detects a corrupted coordinate") {
  auto spec = spec_of({5}, {"dense:3"});
  auto m = Model::init(spec, 4);
  auto x = random_tensor({2, 5}, 4);
  std::vector<int> labels{0, 2};
  auto g = loss_and_grads(m, x, labels);
  g.by_param[0].value[7] += 1.0;
  CHECK(grad_check(m, x, labels, 1e-5, g, 1000) > 1e-1);
  CHECK_THROWS_AS(grad_check(m, x, labels, 0.5), Error);
}

TEST_CASE("grad_check property: every layer type over 20 seeds") {
  const std::vector<ModelSpec> specs = {
      spec_of({2, 8, 8}, {"conv2d:3", "relu", "avg_pool:2", "flatten", "dense:4"}),
      spec_of({2, 4, 4}, {"residual_block", "relu", "upsample:2", "conv2d:2", "flatten", "dense:3"}),
      spec_of({1, 4, 4}, {"flatten", "dense:6", "relu", "dense:3"}),
  };
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& spec : specs) {
      auto m = Model::init(spec, 1000 + seed);
      Shape xs = spec.input_shape;
      xs.insert(xs.begin(), 2);
      auto x = random_tensor(xs, 2000 + seed);
      const int classes = static_cast<int>(m.num_outputs());
      std::vector<int> labels{static_cast<int>(seed % classes), static_cast<int>((seed + 1) % classes)};
      worst = std::max(worst, grad_check(m, x, labels, 1e-5));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("second-order: gradient of a gradient norm matches finite differences") {
  // f(x) = || d loss / d theta ||^2, differentiated w.r.t. x through the graph.
  auto spec = spec_of({2, 4, 4}, {"conv2d:3", "relu", "avg_pool:2", "upsample:2", "conv2d:2",
                                  "relu", "flatten", "dense:3"});
  auto m = Model::init(spec, 31);
  auto x0 = random_tensor({2, 2, 4, 4}, 32);
  std::vector<int> labels{0, 2};
  auto f = [&](const Tensor& x, bool want_grad, Tensor* gx) {
    auto params = param_leaves(m);
    auto xv = ag::leaf(x);
    auto logits = forward(m.spec(), params, xv);
    auto loss = cross_entropy(logits, one_hot(labels, 3));
    auto g = ag::grad(loss, params, true);
    ag::Var total = ag::dot(g[0], g[0]);
    for (std::size_t i = 1; i < g.size(); ++i) total = ag::add(total, ag::dot(g[i], g[i]));
    if (want_grad) {
      std::vector<ag::Var> wrt{xv};
      *gx = ag::grad(total, wrt, false)[0].value();
    }
    return total.value()[0];
  };
  Tensor analytic;
  f(x0, true, &analytic);
  double worst = 0;
  const double eps = 1e-6;
  for (std::size_t k = 0; k < x0.size(); k += 3) {
    Tensor xp = x0, xm = x0;
    xp[k] += eps;
    xm[k] -= eps;
    const double numeric = (f(xp, false, nullptr) - f(xm, false, nullptr)) / (2 * eps);
    worst = std::max(worst, std::abs(numeric - analytic[k]) /
                                std::max({std::abs(numeric), std::abs(analytic[k]), 1e-8}));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("sgd_step") {
  ModelSpec spec = spec_of({1}, {"dense:1"});
  TensorMap params = parameter_layout(spec);
  params[0].value[0] = 1.0;
  Model m(spec, params);

  SUBCASE("zero learning rate is the identity") {
    CHECK(sgd_step(m, zeros_like(params), 0.0) == m);
  }
  SUBCASE("scalar arithmetic") {
    TensorMap g = zeros_like(params);
    g[0].value[0] = 2.0;
    auto next = sgd_step(m, g, 0.1);
    CHECK(next.params()[0].value[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.params()[0].value[0] == 1.0);
  }
  SUBCASE("five steps on a quadratic follow the scalar recurrence") {
    // d/dtheta theta^2 = 2 theta, so theta_k = theta_0 (1 - 2 lr)^k.
    Model cur = m;
    const double lr = 0.05;
    for (int k = 0; k < 5; ++k) {
      TensorMap g = zeros_like(params);
      g[0].value[0] = 2.0 * cur.params()[0].value[0];
      cur = sgd_step(cur, g, lr);
    }
    CHECK(cur.params()[0].value[0] == doctest::Approx(std::pow(1 - 2 * lr, 5)).epsilon(1e-14));
  }
  SUBCASE("negative learning rate is rejected") {
    CHECK_THROWS_AS(sgd_step(m, zeros_like(params), -0.1), Error);
  }
}

TEST_CASE("tensor rejects non-finite data") {
  CHECK_THROWS_AS(Tensor(Shape{2}, std::vector<double>{1.0, NAN}), NumericError);
  CHECK_NOTHROW(Tensor(Shape{2}, std::vector<double>{1.0, NAN}, true));
  CHECK_THROWS_AS(Tensor(Shape{3}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto spec = spec_of({3, 8, 8}, {"conv2d:4", "relu", "residual_block", "avg_pool:2", "flatten",
                                  "dense:5"});
  auto m = Model::init(spec, 123);
  std::stringstream buf;
  Checkpoint ck{{{"note", "x"}}, m.params()};
  ck.header["model"] = spec.to_json();
  write_checkpoint(buf, ck);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "GILB");
  auto back = read_checkpoint(buf);
  CHECK(back.header == ck.header);
  CHECK(model_from_checkpoint(back) == m);
  std::stringstream again;
  write_checkpoint(again, back);
  CHECK(again.str() == bytes);
}

TEST_CASE("image kernels: adjoint identities") {
  // <conv(x, w), y> == <x, conv_input_grad(y, w)> == <w, conv_weight_grad(x, y)>
  auto x = random_tensor({2, 3, 5, 6}, 1, -1, 1);
  auto w = random_tensor({4, 3, 3, 3}, 2, -1, 1);
  auto y = random_tensor({2, 4, 5, 6}, 3, -1, 1);
  auto inner = [](const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const double lhs = inner(ag::kernels::conv2d(x, w), y);
  CHECK(lhs == doctest::Approx(inner(x, ag::kernels::conv2d_input_grad(y, w))).epsilon(1e-12));
  CHECK(lhs == doctest::Approx(inner(w, ag::kernels::conv2d_weight_grad(x, y))).epsilon(1e-12));
  auto p = random_tensor({2, 3, 4, 6}, 4);
  auto q = random_tensor({2, 3, 2, 3}, 5);
  CHECK(inner(ag::kernels::avg_pool(p, 2), q) * 4 ==
        doctest::Approx(inner(p, ag::kernels::upsample_nearest(q, 2))).epsilon(1e-12));
}
