#include "gilab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace gilab::ag {
namespace {

thread_local bool g_grad_enabled = true;

Var make(Tensor value, std::vector<Var> inputs, BackwardFn fn, const char* op) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return v.requires_grad(); });
  if (g_grad_enabled && any) {
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
    node->requires_grad = true;
  }
  return Var(std::move(node));
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(t.shape()));
  }
}

template <typename F>
Tensor map1(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i]);
  return out;
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph,
                      const Var& seed) {
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) targets.insert(w.node());

  // Post-order over the recorded graph; `needed` marks nodes through which
  // some target is reachable.
  std::vector<Var> order;
  std::unordered_map<const Node*, bool> needed;
  if (output.requires_grad()) {
    struct Frame {
      Var var;
      std::size_t next;
    };
    std::vector<Frame> stack{{output, 0}};
    std::unordered_set<const Node*> visited{output.node()};
    while (!stack.empty()) {
      auto& top = stack.back();
      Node* n = top.var.node();
      if (top.next < n->inputs.size()) {
        const Var& in = n->inputs[top.next++];
        if (in.requires_grad() && visited.insert(in.node()).second) {
          stack.push_back({in, 0});
        }
        continue;
      }
      bool need = targets.count(n) > 0;
      for (const auto& in : n->inputs) {
        if (in.requires_grad() && needed[in.node()]) need = true;
      }
      needed[n] = need;
      order.push_back(top.var);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  {
    std::optional<NoGradGuard> guard;
    if (!create_graph) guard.emplace();
    if (seed) {
      if (seed.shape() != output.shape()) throw ShapeError("grad: seed shape mismatch");
      grads[output.node()] = seed;
    } else {
      grads[output.node()] = constant(Tensor(output.shape(), 1.0));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = it->node();
      if (!needed[n] || n->inputs.empty()) continue;
      auto g = grads.find(n);
      if (g == grads.end()) continue;
      const Var upstream = g->second;
      if (!targets.count(n)) grads.erase(g);
      auto in_grads = n->backward(*it, upstream);
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        const Var& in = n->inputs[i];
        if (!in_grads[i] || !in.requires_grad() || !needed[in.node()]) continue;
        auto& slot = grads[in.node()];
        slot = slot ? add(slot, in_grads[i]) : in_grads[i];
      }
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto g = grads.find(w.node());
    if (g != grads.end()) {
      result.push_back(g->second);
    } else {
      result.push_back(constant(Tensor(w.shape(), 0.0)));
    }
  }
  return result;
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  return make(map2(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
              [](const Var&, const Var& g) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  return make(map2(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
              [](const Var&, const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; },
              "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  return make(map2(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
              [a, b](const Var&, const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; },
              "mul");
}

Var scale(const Var& a, double c) {
  return make(map1(a.value(), [c](double x) { return c * x; }), {a},
              [c](const Var&, const Var& g) { return std::vector<Var>{scale(g, c)}; }, "scale");
}

Var exp(const Var& a) {
  return make(map1(a.value(), [](double x) { return std::exp(x); }), {a},
              [](const Var& out, const Var& g) { return std::vector<Var>{mul(g, out)}; }, "exp");
}

Var sqrt(const Var& a) {
  return make(map1(a.value(), [](double x) { return std::sqrt(x); }), {a},
              [](const Var& out, const Var& g) {
                return std::vector<Var>{mul(g, scale(reciprocal(out), 0.5))};
              },
              "sqrt");
}

Var reciprocal(const Var& a) {
  return make(map1(a.value(), [](double x) { return 1.0 / x; }), {a},
              [](const Var& out, const Var& g) {
                return std::vector<Var>{scale(mul(g, mul(out, out)), -1.0)};
              },
              "reciprocal");
}

Var abs(const Var& a) {
  return make(map1(a.value(), [](double x) { return std::abs(x); }), {a},
              [a](const Var&, const Var& g) {
                Tensor sign = map1(a.value(), [](double x) {
                  return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                });
                return std::vector<Var>{mul(g, constant(std::move(sign)))};
              },
              "abs");
}

Var relu(const Var& a) {
  return make(map1(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
              [a](const Var&, const Var& g) {
                Tensor mask = map1(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
                return std::vector<Var>{mul(g, constant(std::move(mask)))};
              },
              "relu");
}

Var mul_scalar(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw ShapeError("mul_scalar: scalar operand has shape " +
                                              to_string(s.shape()));
  const double c = s.value()[0];
  return make(map1(a.value(), [c](double x) { return c * x; }), {a, s},
              [a, s](const Var&, const Var& g) {
                return std::vector<Var>{mul_scalar(g, s), dot(g, a)};
              },
              "mul_scalar");
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const Shape shape = a.shape();
  return make(Tensor::scalar(total), {a},
              [shape](const Var&, const Var& g) { return std::vector<Var>{expand(g, shape)}; },
              "sum");
}

Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

Var expand(const Var& s, const Shape& shape) {
  if (s.value().size() != 1) throw ShapeError("expand: operand is not a scalar");
  return make(Tensor(shape, s.value()[0]), {s},
              [](const Var&, const Var& g) { return std::vector<Var>{sum(g)}; }, "expand");
}

Var reshape(const Var& a, const Shape& shape) {
  const Shape original = a.shape();
  return make(a.value().reshaped(shape), {a},
              [original](const Var&, const Var& g) {
                return std::vector<Var>{reshape(g, original)};
              },
              "reshape");
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank(x, 2, "matmul");
  require_rank(y, 2, "matmul");
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  if (y.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions of " + to_string(x.shape()) + " and " +
                     to_string(y.shape()) + " differ");
  }
  Tensor out(Shape{m, n});
  auto o = out.data();
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = o.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = xd[i * k + p];
      if (s == 0.0) continue;
      const double* yrow = yd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * yrow[j];
    }
  }
  return make(std::move(out), {a, b},
              [a, b](const Var&, const Var& g) {
                return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
              },
              "matmul");
}

Var transpose(const Var& a) {
  const Tensor& x = a.value();
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make(std::move(out), {a},
              [](const Var&, const Var& g) { return std::vector<Var>{transpose(g)}; },
              "transpose");
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank(x.value(), 2, "add_row_bias");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  if (bias.shape() != Shape{cols}) throw ShapeError("add_row_bias: bias shape mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bias.value()[j];
  return make(std::move(out), {x, bias},
              [](const Var&, const Var& g) { return std::vector<Var>{g, col_sum(g)}; },
              "add_row_bias");
}

Var col_sum(const Var& x) {
  require_rank(x.value(), 2, "col_sum");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  Tensor out(Shape{cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += x.value()[i * cols + j];
  return make(std::move(out), {x},
              [rows](const Var&, const Var& g) {
                return std::vector<Var>{broadcast_rows(g, rows)};
              },
              "col_sum");
}

Var broadcast_rows(const Var& v, std::size_t rows) {
  require_rank(v.value(), 1, "broadcast_rows");
  const std::size_t cols = v.value().dim(0);
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = v.value()[j];
  return make(std::move(out), {v},
              [](const Var&, const Var& g) { return std::vector<Var>{col_sum(g)}; },
              "broadcast_rows");
}

Var row_sum_bcast(const Var& x) {
  require_rank(x.value(), 2, "row_sum_bcast");
  const std::size_t rows = x.value().dim(0), cols = x.value().dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += x.value()[i * cols + j];
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = s;
  }
  return make(std::move(out), {x},
              [](const Var&, const Var& g) { return std::vector<Var>{row_sum_bcast(g)}; },
              "row_sum_bcast");
}

Var log_softmax(const Var& logits) {
  require_rank(logits.value(), 2, "log_softmax");
  const std::size_t rows = logits.value().dim(0), cols = logits.value().dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* z = logits.value().data().data() + i * cols;
    const double m = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = z[j] - lse;
  }
  return make(std::move(out), {logits},
              [](const Var& out, const Var& g) {
                return std::vector<Var>{sub(g, mul(exp(out), row_sum_bcast(g)))};
              },
              "log_softmax");
}

namespace kernels {
namespace {

struct ImageDims {
  std::size_t b, c, h, w;
};

ImageDims image_dims(const Tensor& t, const char* op) {
  require_rank(t, 4, op);
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

void check_kernel(const Tensor& w, const char* op) {
  require_rank(w, 4, op);
  if (w.dim(2) != 3 || w.dim(3) != 3) {
    throw ShapeError(std::string(op) + ": only 3x3 kernels are supported, got " +
                     to_string(w.shape()));
  }
}

// out[i, j] += s * in[i + di, j + dj] over the valid region of an h x w plane.
inline void shifted_axpy(double* out, const double* in, double s, std::size_t h,
                         std::size_t w, long di, long dj) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  const long i0 = std::max(0L, -di), i1 = std::min(H, H - di);
  const long j0 = std::max(0L, -dj), j1 = std::min(W, W - dj);
  for (long i = i0; i < i1; ++i) {
    double* o = out + i * W;
    const double* x = in + (i + di) * W + dj;
    for (long j = j0; j < j1; ++j) o[j] += s * x[j];
  }
}

inline double shifted_dot(const double* a, const double* in, std::size_t h, std::size_t w,
                          long di, long dj) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  const long i0 = std::max(0L, -di), i1 = std::min(H, H - di);
  const long j0 = std::max(0L, -dj), j1 = std::min(W, W - dj);
  double acc = 0.0;
  for (long i = i0; i < i1; ++i) {
    const double* p = a + i * W;
    const double* x = in + (i + di) * W + dj;
    for (long j = j0; j < j1; ++j) acc += p[j] * x[j];
  }
  return acc;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w) {
  const auto d = image_dims(x, "conv2d");
  check_kernel(w, "conv2d");
  if (w.dim(1) != d.c) {
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " expects " +
                     std::to_string(w.dim(1)) + " input channels, input is " +
                     to_string(x.shape()));
  }
  const std::size_t outc = w.dim(0), plane = d.h * d.w;
  Tensor y(Shape{d.b, outc, d.h, d.w});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t o = 0; o < outc; ++o) {
      double* yp = y.data().data() + (b * outc + o) * plane;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* xp = x.data().data() + (b * d.c + c) * plane;
        const double* k = w.data().data() + (o * d.c + c) * 9;
        for (long ki = 0; ki < 3; ++ki)
          for (long kj = 0; kj < 3; ++kj)
            shifted_axpy(yp, xp, k[ki * 3 + kj], d.h, d.w, ki - 1, kj - 1);
      }
    }
  return y;
}

Tensor conv2d_input_grad(const Tensor& dy, const Tensor& w) {
  const auto d = image_dims(dy, "conv2d_input_grad");
  check_kernel(w, "conv2d_input_grad");
  if (w.dim(0) != d.c) throw ShapeError("conv2d_input_grad: channel mismatch");
  const std::size_t inc = w.dim(1), plane = d.h * d.w;
  Tensor dx(Shape{d.b, inc, d.h, d.w});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t o = 0; o < d.c; ++o) {
      const double* gp = dy.data().data() + (b * d.c + o) * plane;
      for (std::size_t c = 0; c < inc; ++c) {
        double* xp = dx.data().data() + (b * inc + c) * plane;
        const double* k = w.data().data() + (o * inc + c) * 9;
        for (long ki = 0; ki < 3; ++ki)
          for (long kj = 0; kj < 3; ++kj)
            shifted_axpy(xp, gp, k[ki * 3 + kj], d.h, d.w, 1 - ki, 1 - kj);
      }
    }
  return dx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& dy) {
  const auto dx = image_dims(x, "conv2d_weight_grad");
  const auto dg = image_dims(dy, "conv2d_weight_grad");
  if (dx.b != dg.b || dx.h != dg.h || dx.w != dg.w) {
    throw ShapeError("conv2d_weight_grad: input " + to_string(x.shape()) +
                     " and output gradient " + to_string(dy.shape()) + " disagree");
  }
  const std::size_t plane = dx.h * dx.w;
  Tensor dw(Shape{dg.c, dx.c, 3, 3});
  for (std::size_t b = 0; b < dx.b; ++b)
    for (std::size_t o = 0; o < dg.c; ++o) {
      const double* gp = dy.data().data() + (b * dg.c + o) * plane;
      for (std::size_t c = 0; c < dx.c; ++c) {
        const double* xp = x.data().data() + (b * dx.c + c) * plane;
        double* k = dw.data().data() + (o * dx.c + c) * 9;
        for (long ki = 0; ki < 3; ++ki)
          for (long kj = 0; kj < 3; ++kj)
            k[ki * 3 + kj] += shifted_dot(gp, xp, dx.h, dx.w, ki - 1, kj - 1);
      }
    }
  return dw;
}

Tensor avg_pool(const Tensor& x, std::size_t k) {
  const auto d = image_dims(x, "avg_pool");
  if (k == 0 || d.h % k || d.w % k) {
    throw ShapeError("avg_pool: window " + std::to_string(k) + " does not divide " +
                     to_string(x.shape()));
  }
  const std::size_t oh = d.h / k, ow = d.w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor y(Shape{d.b, d.c, oh, ow});
  for (std::size_t p = 0; p < d.b * d.c; ++p) {
    const double* xp = x.data().data() + p * d.h * d.w;
    double* yp = y.data().data() + p * oh * ow;
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j) yp[(i / k) * ow + j / k] += xp[i * d.w + j];
    for (std::size_t i = 0; i < oh * ow; ++i) yp[i] *= inv;
  }
  return y;
}

Tensor upsample_nearest(const Tensor& x, std::size_t k) {
  const auto d = image_dims(x, "upsample_nearest");
  if (k == 0) throw ShapeError("upsample_nearest: zero factor");
  const std::size_t oh = d.h * k, ow = d.w * k;
  Tensor y(Shape{d.b, d.c, oh, ow});
  for (std::size_t p = 0; p < d.b * d.c; ++p) {
    const double* xp = x.data().data() + p * d.h * d.w;
    double* yp = y.data().data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) yp[i * ow + j] = xp[(i / k) * d.w + j / k];
  }
  return y;
}

double total_variation(const Tensor& x) {
  const auto d = image_dims(x, "total_variation");
  double tv = 0.0;
  for (std::size_t p = 0; p < d.b * d.c; ++p) {
    const double* xp = x.data().data() + p * d.h * d.w;
    for (std::size_t i = 0; i < d.h; ++i)
      for (std::size_t j = 0; j < d.w; ++j) {
        if (i + 1 < d.h) tv += std::abs(xp[(i + 1) * d.w + j] - xp[i * d.w + j]);
        if (j + 1 < d.w) tv += std::abs(xp[i * d.w + j + 1] - xp[i * d.w + j]);
      }
  }
  return tv;
}

}  // namespace kernels

Var conv2d(const Var& x, const Var& w) {
  return make(kernels::conv2d(x.value(), w.value()), {x, w},
              [x, w](const Var&, const Var& g) {
                return std::vector<Var>{conv2d_input_grad(g, w), conv2d_weight_grad(x, g)};
              },
              "conv2d");
}

Var conv2d_input_grad(const Var& dy, const Var& w) {
  return make(kernels::conv2d_input_grad(dy.value(), w.value()), {dy, w},
              [dy, w](const Var&, const Var& h) {
                return std::vector<Var>{conv2d(h, w), conv2d_weight_grad(h, dy)};
              },
              "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& dy) {
  return make(kernels::conv2d_weight_grad(x.value(), dy.value()), {x, dy},
              [x, dy](const Var&, const Var& h) {
                return std::vector<Var>{conv2d_input_grad(dy, h), conv2d(x, h)};
              },
              "conv2d_weight_grad");
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const auto d = kernels::image_dims(x.value(), "add_channel_bias");
  if (bias.shape() != Shape{d.c}) throw ShapeError("add_channel_bias: bias shape mismatch");
  Tensor out = x.value();
  const std::size_t plane = d.h * d.w;
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      double* p = out.data().data() + (b * d.c + c) * plane;
      const double v = bias.value()[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
  return make(std::move(out), {x, bias},
              [](const Var&, const Var& g) { return std::vector<Var>{g, channel_sum(g)}; },
              "add_channel_bias");
}

Var channel_sum(const Var& x) {
  const auto d = kernels::image_dims(x.value(), "channel_sum");
  const std::size_t plane = d.h * d.w;
  Tensor out(Shape{d.c});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* p = x.value().data().data() + (b * d.c + c) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out[c] += s;
    }
  const Shape shape = x.shape();
  return make(std::move(out), {x},
              [shape](const Var&, const Var& g) {
                return std::vector<Var>{broadcast_channels(g, shape)};
              },
              "channel_sum");
}

Var broadcast_channels(const Var& v, const Shape& shape) {
  if (shape.size() != 4 || v.shape() != Shape{shape[1]}) {
    throw ShapeError("broadcast_channels: bad shapes");
  }
  Tensor out(shape);
  const std::size_t plane = shape[2] * shape[3];
  for (std::size_t b = 0; b < shape[0]; ++b)
    for (std::size_t c = 0; c < shape[1]; ++c) {
      double* p = out.data().data() + (b * shape[1] + c) * plane;
      std::fill(p, p + plane, v.value()[c]);
    }
  return make(std::move(out), {v},
              [](const Var&, const Var& g) { return std::vector<Var>{channel_sum(g)}; },
              "broadcast_channels");
}

Var avg_pool(const Var& x, std::size_t k) {
  return make(kernels::avg_pool(x.value(), k), {x},
              [k](const Var&, const Var& g) {
                return std::vector<Var>{
                    scale(upsample_nearest(g, k), 1.0 / static_cast<double>(k * k))};
              },
              "avg_pool");
}

Var upsample_nearest(const Var& x, std::size_t k) {
  return make(kernels::upsample_nearest(x.value(), k), {x},
              [k](const Var&, const Var& g) {
                return std::vector<Var>{scale(avg_pool(g, k), static_cast<double>(k * k))};
              },
              "upsample_nearest");
}

Var gather(const Var& x, std::span<const std::size_t> rows) {
  const std::size_t total = x.value().dim(0);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make(gather_rows(x.value(), rows), {x},
              [idx, total](const Var&, const Var& g) {
                return std::vector<Var>{scatter(g, idx, total)};
              },
              "gather");
}

Var scatter(const Var& x, std::span<const std::size_t> rows, std::size_t total_rows) {
  const Tensor& v = x.value();
  if (v.rank() == 0 || v.dim(0) != rows.size()) throw ShapeError("scatter: row count mismatch");
  Shape s = v.shape();
  s[0] = total_rows;
  Tensor out(s);
  const std::size_t stride = v.size() / rows.size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= total_rows) throw ShapeError("scatter: row index out of range");
    for (std::size_t i = 0; i < stride; ++i) out[rows[r] * stride + i] += v[r * stride + i];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make(std::move(out), {x},
              [idx](const Var&, const Var& g) { return std::vector<Var>{gather(g, idx)}; },
              "scatter");
}

Var total_variation(const Var& x) {
  return make(Tensor::scalar(kernels::total_variation(x.value())), {x},
              [x](const Var&, const Var& g) {
                const Tensor& v = x.value();
                const auto d = kernels::image_dims(v, "total_variation");
                Tensor sub_grad(v.shape());
                auto sign = [](double t) { return t > 0.0 ? 1.0 : (t < 0.0 ? -1.0 : 0.0); };
                for (std::size_t p = 0; p < d.b * d.c; ++p) {
                  const double* xp = v.data().data() + p * d.h * d.w;
                  double* gp = sub_grad.data().data() + p * d.h * d.w;
                  for (std::size_t i = 0; i < d.h; ++i)
                    for (std::size_t j = 0; j < d.w; ++j) {
                      if (i + 1 < d.h) {
                        const double s = sign(xp[(i + 1) * d.w + j] - xp[i * d.w + j]);
                        gp[(i + 1) * d.w + j] += s;
                        gp[i * d.w + j] -= s;
                      }
                      if (j + 1 < d.w) {
                        const double s = sign(xp[i * d.w + j + 1] - xp[i * d.w + j]);
                        gp[i * d.w + j + 1] += s;
                        gp[i * d.w + j] -= s;
                      }
                    }
                }
                return std::vector<Var>{mul_scalar(constant(std::move(sub_grad)), g)};
              },
              "total_variation");
}

}  // namespace gilab::ag
