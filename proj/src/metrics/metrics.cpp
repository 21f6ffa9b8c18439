#include "gilab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gilab/rng.hpp"

namespace gilab {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
}

constexpr std::size_t kWindow = 11;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Valid-mode separable Gaussian filter of an h x w plane.
std::vector<double> filter(const std::vector<double>& img, std::size_t h, std::size_t w) {
  static const auto g = gaussian_window();
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(h * ow, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * img[i * w + j + k];
      rows[i * ow + j] = s;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * rows[(i + k) * ow + j];
      out[i * ow + j] = s;
    }
  return out;
}

double ssim_plane(std::span<const double> a, std::span<const double> b, std::size_t h,
                  std::size_t w) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end()), xx(x.size()), yy(x.size()),
      xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter(x, h, w), my = filter(y, h, w), sxx = filter(xx, h, w),
             syy = filter(yy, h, w), sxy = filter(xy, h, w);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse");
  if (a.size() == 0) throw ShapeError("mse: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const Tensor& a, const Tensor& b) {
  require_same(a, b, "ssim");
  Shape s = a.shape();
  if (s.size() == 2) s.insert(s.begin(), 1);
  if (s.size() != 3) throw ShapeError("ssim expects [C, H, W] or [H, W], got " + to_string(a.shape()));
  const std::size_t c = s[0], h = s[1], w = s[2];
  if (h < kWindow || w < kWindow) {
    throw ShapeError("ssim needs images of at least 11x11 (got " + std::to_string(h) + "x" +
                     std::to_string(w) + "); resize before scoring");
  }
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    total += ssim_plane(a.data().subspan(ch * h * w, h * w), b.data().subspan(ch * h * w, h * w),
                        h, w);
  }
  return total / static_cast<double>(c);
}

Tensor probe_embedding(const Model& probe, const Tensor& batch) {
  const auto& layers = probe.spec().layers;
  if (layers.empty() || layers.back().kind != LayerKind::dense) {
    throw Error("probe must end in a dense layer");
  }
  const auto& in = probe.spec().input_shape;
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != in) {
    throw ShapeError("probe expects [B, " + std::to_string(in[0]) + ", " + std::to_string(in[1]) +
                     ", " + std::to_string(in[2]) + "] input, got " + to_string(batch.shape()));
  }
  const auto e = forward_prefix(probe, batch, layers.size() - 1);
  return e.reshaped({batch.dim(0), e.size() / batch.dim(0)});
}

double proxy_perceptual(const Tensor& a, const Tensor& b, const Model& probe) {
  require_same(a, b, "proxy_perceptual");
  std::vector<Tensor> both{a, b};
  const auto e = probe_embedding(probe, stack(both));
  const std::size_t d = e.dim(1);
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    aa += e[k] * e[k];
    bb += e[d + k] * e[d + k];
    ab += e[k] * e[d + k];
  }
  if (aa == 0.0 || bb == 0.0) return 1.0;
  return std::clamp(1.0 - ab / (std::sqrt(aa) * std::sqrt(bb)), 0.0, 2.0);
}

std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("hungarian: cost matrix is not n x n");
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Potentials over 1-based rows/cols; p[j] is the row assigned to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / (n - 1.0));
  }
  return s;
}

namespace {

template <typename F>
Summary summarize_field(const std::vector<PairMetrics>& rows, F f) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(f(r));
  return summarize(v);
}

}  // namespace

Summary MetricReport::mse() const {
  return summarize_field(per_image, [](const PairMetrics& r) { return r.mse; });
}
Summary MetricReport::psnr() const {
  return summarize_field(per_image, [](const PairMetrics& r) { return r.psnr; });
}
Summary MetricReport::ssim() const {
  return summarize_field(per_image, [](const PairMetrics& r) { return r.ssim; });
}
std::optional<Summary> MetricReport::proxy() const {
  if (per_image.empty() || !per_image[0].proxy_dist) return std::nullopt;
  return summarize_field(per_image, [](const PairMetrics& r) { return *r.proxy_dist; });
}

std::vector<std::size_t> match_assignment(const Tensor& x_hat, const Tensor& x_true) {
  if (x_hat.rank() != 4 || x_true.rank() != 4) {
    throw ShapeError("reconstruction matching expects [B, C, H, W] batches");
  }
  if (x_hat.dim(0) != x_true.dim(0)) {
    throw ShapeError("reconstruction matching: " + std::to_string(x_hat.dim(0)) +
                     " reconstructions for " + std::to_string(x_true.dim(0)) + " originals");
  }
  require_same(x_hat.row(0), x_true.row(0), "reconstruction matching");
  const std::size_t n = x_hat.dim(0);
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = mse(x_hat.row(i), x_true.row(j));
  return hungarian(cost, n);
}

MetricReport match_reconstructions(const Tensor& x_hat, const Tensor& x_true, const Model* probe) {
  MetricReport r;
  r.assignment = match_assignment(x_hat, x_true);
  for (std::size_t i = 0; i < r.assignment.size(); ++i) {
    const auto recon = x_hat.row(i);
    const auto truth = x_true.row(r.assignment[i]);
    PairMetrics m;
    m.recon_index = i;
    m.truth_index = r.assignment[i];
    m.mse = mse(recon, truth);
    m.psnr = psnr(recon, truth);
    m.ssim = ssim(recon, truth);
    if (probe) m.proxy_dist = proxy_perceptual(recon, truth, *probe);
    r.per_image.push_back(m);
  }
  return r;
}

SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("sign_test: samples are not paired");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) {
      ++t.wins;
    } else if (a[i] < b[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  const std::size_t n = t.wins + t.losses;
  if (n == 0) return t;
  // P(X >= wins), X ~ Binomial(n, 1/2).
  double p = 0.0;
  for (std::size_t k = t.wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                  static_cast<double>(n) * std::log(2.0));
  }
  t.p_value = std::min(1.0, p);
  return t;
}

Model train_probe(const ModelSpec& spec, const Dataset& data, const ProbeTrainConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw Error("probe epochs and batch size must be positive");
  if (data.size() == 0) throw Error("probe training set is empty");
  Model model = Model::init(spec, cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, e + 1));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> rows(order.data() + s,
                                              std::min(cfg.batch_size, order.size() - s));
      const auto b = data.subset(rows);
      model = sgd_step(model, loss_and_grads(model, b.images, b.labels).by_param, cfg.lr);
    }
  }
  return model;
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto logits = forward(model, data.images);
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == data.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace gilab
