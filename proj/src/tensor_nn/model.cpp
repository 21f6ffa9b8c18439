#include "gilab/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gilab/rng.hpp"

namespace gilab {
namespace {

struct KindName {
  LayerKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::dense, "dense"},       {LayerKind::conv2d, "conv2d"},
    {LayerKind::relu, "relu"},         {LayerKind::avg_pool, "avg_pool"},
    {LayerKind::flatten, "flatten"},   {LayerKind::residual_block, "residual_block"},
    {LayerKind::upsample, "upsample"},
};

std::string layer_label(std::size_t index, LayerKind kind) {
  return "layer " + std::to_string(index) + " (" + to_string(kind) + ")";
}

}  // namespace

std::string to_string(LayerKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (const auto& kn : kKindNames)
    if (name == kn.name) return kn.kind;
  throw Error("unknown layer type '" + name + "'");
}

LayerSpec parse_layer(const std::string& text) {
  LayerSpec spec;
  const auto colon = text.find(':');
  spec.kind = parse_layer_kind(text.substr(0, colon));
  if (colon != std::string::npos) {
    const auto arg = std::stoul(text.substr(colon + 1));
    if (spec.kind == LayerKind::avg_pool || spec.kind == LayerKind::upsample) {
      spec.window = arg;
    } else {
      spec.units = arg;
    }
  }
  if ((spec.kind == LayerKind::dense || spec.kind == LayerKind::conv2d) && spec.units == 0) {
    throw Error("layer '" + text + "' needs a positive width, e.g. dense:10");
  }
  return spec;
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json lj{{"type", to_string(l.kind)}};
    if (l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) lj["units"] = l.units;
    if (l.kind == LayerKind::avg_pool || l.kind == LayerKind::upsample) lj["window"] = l.window;
    layers_json.push_back(std::move(lj));
  }
  return {{"input_shape", input_shape}, {"layers", std::move(layers_json)}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = parse_layer_kind(lj.at("type").get<std::string>());
    l.units = lj.value("units", std::size_t{0});
    l.window = lj.value("window", std::size_t{2});
    spec.layers.push_back(l);
  }
  return spec;
}

const Tensor& lookup(const TensorMap& map, const std::string& name) {
  for (const auto& nt : map)
    if (nt.name == name) return nt.value;
  throw Error("no tensor named '" + name + "'");
}

bool same_layout(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
  }
  return true;
}

TensorMap zeros_like(const TensorMap& map) {
  TensorMap out;
  for (const auto& nt : map) out.push_back({nt.name, Tensor(nt.value.shape())});
  return out;
}

TensorMap parameter_layout(const ModelSpec& spec) {
  Shape s = spec.input_shape;
  if (s.empty() || std::find(s.begin(), s.end(), 0) != s.end()) {
    throw ShapeError("model input shape " + to_string(s) + " is invalid");
  }
  TensorMap layout;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    auto need_image = [&] {
      if (s.size() != 3) {
        throw ShapeError(layer_label(i, l.kind) + " expects a C x H x W input, got " +
                         to_string(s));
      }
    };
    switch (l.kind) {
      case LayerKind::dense:
        if (s.size() != 1) {
          throw ShapeError(layer_label(i, l.kind) + " expects a flat input, got " +
                           to_string(s) + "; insert a flatten layer");
        }
        layout.push_back({prefix + ".weight", Tensor(Shape{l.units, s[0]})});
        layout.push_back({prefix + ".bias", Tensor(Shape{l.units})});
        s = {l.units};
        break;
      case LayerKind::conv2d:
        need_image();
        layout.push_back({prefix + ".weight", Tensor(Shape{l.units, s[0], 3, 3})});
        layout.push_back({prefix + ".bias", Tensor(Shape{l.units})});
        s[0] = l.units;
        break;
      case LayerKind::residual_block:
        need_image();
        layout.push_back({prefix + ".conv1.weight", Tensor(Shape{s[0], s[0], 3, 3})});
        layout.push_back({prefix + ".conv1.bias", Tensor(Shape{s[0]})});
        layout.push_back({prefix + ".conv2.weight", Tensor(Shape{s[0], s[0], 3, 3})});
        layout.push_back({prefix + ".conv2.bias", Tensor(Shape{s[0]})});
        break;
      case LayerKind::relu:
        break;
      case LayerKind::avg_pool:
        need_image();
        if (l.window == 0 || s[1] % l.window || s[2] % l.window) {
          throw ShapeError(layer_label(i, l.kind) + ": window " + std::to_string(l.window) +
                           " does not divide " + to_string(s));
        }
        s[1] /= l.window;
        s[2] /= l.window;
        break;
      case LayerKind::upsample:
        need_image();
        if (l.window == 0) throw ShapeError(layer_label(i, l.kind) + ": zero factor");
        s[1] *= l.window;
        s[2] *= l.window;
        break;
      case LayerKind::flatten:
        s = {numel(s)};
        break;
    }
  }
  return layout;
}

Shape output_shape(const ModelSpec& spec) {
  Shape s = spec.input_shape;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::dense: s = {l.units}; break;
      case LayerKind::conv2d: s[0] = l.units; break;
      case LayerKind::avg_pool: s[1] /= l.window; s[2] /= l.window; break;
      case LayerKind::upsample: s[1] *= l.window; s[2] *= l.window; break;
      case LayerKind::flatten: s = {numel(s)}; break;
      default: break;
    }
  }
  return s;
}

Model::Model(ModelSpec spec, TensorMap params) : spec_(std::move(spec)), params_(std::move(params)) {
  const auto layout = parameter_layout(spec_);
  if (!same_layout(layout, params_)) {
    throw ShapeError("model parameters do not match the layer list");
  }
}

Model Model::init(const ModelSpec& spec, std::uint64_t seed) {
  auto params = parameter_layout(spec);
  Rng rng(seed);
  for (auto& p : params) {
    const auto& s = p.value.shape();
    double fan_in = 1.0;
    if (p.name.ends_with(".weight")) {
      fan_in = static_cast<double>(numel(s) / s[0]);
    } else {
      // Bias: same fan-in as its weight, which precedes it in the layout.
      const auto& w = (&p - 1)->value.shape();
      fan_in = static_cast<double>(numel(w) / w[0]);
    }
    const double bound =
        p.name.ends_with(".weight") ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
    for (auto& v : p.value.data()) v = rng.uniform(-bound, bound);
  }
  return Model(spec, std::move(params));
}

std::size_t Model::num_outputs() const { return numel(output_shape(spec_)); }

ag::Var forward(const ModelSpec& spec, std::span<const ag::Var> params, const ag::Var& batch,
                std::size_t layer_count) {
  const Shape& in = batch.shape();
  if (in.size() != spec.input_shape.size() + 1 || in[0] == 0 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), in.begin() + 1)) {
    throw ShapeError("input batch shape " + to_string(in) + " does not match model input " +
                     to_string(spec.input_shape));
  }
  const std::size_t batch_size = in[0];
  ag::Var h = batch;
  std::size_t p = 0;
  auto next = [&]() -> const ag::Var& {
    if (p >= params.size()) throw ShapeError("forward: too few parameters for the model");
    return params[p++];
  };
  const std::size_t n = std::min(layer_count, spec.layers.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = spec.layers[i];
    try {
      switch (l.kind) {
        case LayerKind::dense: {
          const auto& w = next();
          const auto& b = next();
          h = ag::add_row_bias(ag::matmul(h, ag::transpose(w)), b);
          break;
        }
        case LayerKind::conv2d: {
          const auto& w = next();
          const auto& b = next();
          h = ag::add_channel_bias(ag::conv2d(h, w), b);
          break;
        }
        case LayerKind::residual_block: {
          const auto& w1 = next();
          const auto& b1 = next();
          const auto& w2 = next();
          const auto& b2 = next();
          auto inner = ag::relu(ag::add_channel_bias(ag::conv2d(h, w1), b1));
          h = ag::add(h, ag::add_channel_bias(ag::conv2d(inner, w2), b2));
          break;
        }
        case LayerKind::relu: h = ag::relu(h); break;
        case LayerKind::avg_pool: h = ag::avg_pool(h, l.window); break;
        case LayerKind::upsample: h = ag::upsample_nearest(h, l.window); break;
        case LayerKind::flatten: h = ag::reshape(h, Shape{batch_size, h.value().size() / batch_size}); break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, l.kind) + ": " + e.what());
    }
    if (!h.value().all_finite()) {
      throw NumericError("non-finite activation at " + layer_label(i, l.kind));
    }
  }
  return h;
}

std::vector<ag::Var> param_leaves(const Model& model) {
  std::vector<ag::Var> out;
  for (const auto& p : model.params()) out.push_back(ag::leaf(p.value));
  return out;
}

std::vector<ag::Var> param_constants(const Model& model) {
  std::vector<ag::Var> out;
  for (const auto& p : model.params()) out.push_back(ag::constant(p.value));
  return out;
}

Tensor forward(const Model& model, const Tensor& batch) {
  ag::NoGradGuard guard;
  return forward(model.spec(), param_constants(model), ag::constant(batch)).value();
}

Tensor forward_prefix(const Model& model, const Tensor& batch, std::size_t layer_count) {
  ag::NoGradGuard guard;
  return forward(model.spec(), param_constants(model), ag::constant(batch), layer_count).value();
}

ag::Var one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return ag::constant(std::move(t));
}

ag::Var cross_entropy(const ag::Var& logits, const ag::Var& target_probs) {
  const double b = static_cast<double>(logits.value().dim(0));
  return ag::scale(ag::dot(target_probs, ag::log_softmax(logits)), -1.0 / b);
}

void check_labels(std::span<const int> labels, std::size_t classes, std::size_t batch) {
  if (labels.size() != batch) {
    throw Error("got " + std::to_string(labels.size()) + " labels for a batch of " +
                std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw Error("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

Gradients loss_and_grads(const Model& model, const Tensor& batch, std::span<const int> labels) {
  if (batch.rank() == 0 || batch.dim(0) == 0) throw ShapeError("empty batch");
  const auto params = param_leaves(model);
  const auto x = ag::leaf(batch);
  const auto logits = forward(model.spec(), params, x);
  check_labels(labels, logits.value().dim(1), batch.dim(0));
  const auto loss = cross_entropy(logits, one_hot(labels, logits.value().dim(1)));
  if (!std::isfinite(loss.value()[0])) throw NumericError("non-finite loss");

  std::vector<ag::Var> wrt = params;
  wrt.push_back(x);
  const auto g = ag::grad(loss, wrt, false);

  Gradients out;
  out.loss_value = loss.value()[0];
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.by_param.push_back({model.params()[i].name, g[i].value()});
  }
  out.by_input = g.back().value();
  return out;
}

Model sgd_step(const Model& model, const TensorMap& grads, double lr) {
  if (!(lr >= 0.0)) throw Error("learning rate must be non-negative");
  if (!same_layout(model.params(), grads)) {
    throw ShapeError("sgd_step: gradients do not match model parameters");
  }
  TensorMap next = model.params();
  for (std::size_t i = 0; i < next.size(); ++i) {
    auto theta = next[i].value.data();
    auto g = grads[i].value.data();
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] = theta[k] - lr * g[k];
  }
  return Model(model.spec(), std::move(next));
}

namespace {

double mean_loss(const ModelSpec& spec, const TensorMap& params, const Tensor& batch,
                 std::span<const int> labels) {
  ag::NoGradGuard guard;
  std::vector<ag::Var> vars;
  for (const auto& p : params) vars.push_back(ag::constant(p.value));
  const auto logits = forward(spec, vars, ag::constant(batch));
  return cross_entropy(logits, one_hot(labels, logits.value().dim(1))).value()[0];
}

std::vector<std::size_t> sample_coords(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n <= k) return idx;
  rng.shuffle(std::span(idx));
  idx.resize(k);
  return idx;
}

double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

}  // namespace

double grad_check(const Model& model, const Tensor& batch, std::span<const int> labels,
                  double eps, const Gradients& analytic, std::size_t samples_per_tensor,
                  std::uint64_t seed) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw Error("grad_check: eps must lie in (0, 1e-2]");
  Rng rng(seed);
  double worst = 0.0;
  TensorMap params = model.params();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (auto k : sample_coords(params[t].value.size(), samples_per_tensor, rng)) {
      const double orig = params[t].value[k];
      params[t].value[k] = orig + eps;
      const double up = mean_loss(model.spec(), params, batch, labels);
      params[t].value[k] = orig - eps;
      const double down = mean_loss(model.spec(), params, batch, labels);
      params[t].value[k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, rel_error(analytic.by_param[t].value[k], numeric));
    }
  }
  Tensor x = batch;
  for (auto k : sample_coords(x.size(), samples_per_tensor, rng)) {
    const double orig = x[k];
    x[k] = orig + eps;
    const double up = mean_loss(model.spec(), params, x, labels);
    x[k] = orig - eps;
    const double down = mean_loss(model.spec(), params, x, labels);
    x[k] = orig;
    worst = std::max(worst, rel_error(analytic.by_input[k], (up - down) / (2.0 * eps)));
  }
  return worst;
}

double grad_check(const Model& model, const Tensor& batch, std::span<const int> labels,
                  double eps) {
  return grad_check(model, batch, labels, eps, loss_and_grads(model, batch, labels));
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw Error("checkpoint: unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

std::string get_string(std::istream& is, std::uint32_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw Error("checkpoint: unexpected end of file");
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("GILB", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = ckpt.header.dump();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : ckpt.tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(nt.value.rank()));
    for (auto d : nt.value.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : nt.value.data()) put<double>(os, v);
  }
  if (!os) throw Error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "GILB", 4) != 0) {
    throw Error("checkpoint: bad magic bytes");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.header = nlohmann::json::parse(get_string(is, get<std::uint32_t>(is)));
  while (is.peek() != std::char_traits<char>::eof()) {
    NamedTensor nt;
    nt.name = get_string(is, get<std::uint32_t>(is));
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint32_t>(is);
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = get<double>(is);
    nt.value = Tensor(std::move(shape), std::move(data), true);
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

void save_model(const std::filesystem::path& path, const Model& model,
                const nlohmann::json& extra) {
  Checkpoint ckpt{extra, model.params()};
  ckpt.header["model"] = model.spec().to_json();
  save_checkpoint(path, ckpt);
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("model")) throw Error("checkpoint has no model spec");
  return Model(ModelSpec::from_json(ckpt.header.at("model")), ckpt.tensors);
}

Model load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

}  // namespace gilab
