#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gilab/digest.hpp"
#include "gilab/inversion.hpp"
#include "gilab/rng.hpp"

namespace gilab {

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table,
             const char* what) {
  std::string options;
  for (const auto& [name, value] : table) {
    if (s == name) return value;
    options += options.empty() ? name : std::string(", ") + name;
  }
  throw Error(std::string("unknown ") + what + " '" + s + "' (expected one of " + options + ")");
}

}  // namespace

std::string to_string(GradLoss v) {
  return v == GradLoss::squared_l2 ? "squared_l2" : "negative_cosine";
}
std::string to_string(OptimizerKind v) { return v == OptimizerKind::adam ? "adam" : "sgd"; }
std::string to_string(InitKind v) { return v == InitKind::uniform01 ? "uniform01" : "gaussian"; }
std::string to_string(LabelMode v) {
  switch (v) {
    case LabelMode::known: return "known";
    case LabelMode::inferred: return "inferred";
    case LabelMode::optimized: return "optimized";
  }
  return "?";
}

GradLoss parse_grad_loss(const std::string& s) {
  return parse_enum<GradLoss>(
      s, {{"squared_l2", GradLoss::squared_l2}, {"negative_cosine", GradLoss::negative_cosine}},
      "grad_loss");
}
OptimizerKind parse_optimizer(const std::string& s) {
  return parse_enum<OptimizerKind>(s, {{"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd}},
                                   "optimizer");
}
InitKind parse_init(const std::string& s) {
  return parse_enum<InitKind>(s, {{"uniform01", InitKind::uniform01}, {"gaussian", InitKind::gaussian}},
                              "init");
}
LabelMode parse_label_mode(const std::string& s) {
  return parse_enum<LabelMode>(s,
                               {{"known", LabelMode::known},
                                {"inferred", LabelMode::inferred},
                                {"optimized", LabelMode::optimized}},
                               "label_mode");
}

void AttackConfig::validate() const {
  if (T < 1) throw Error("attack T must be at least 1");
  if (!(tv_weight >= 0.0)) throw Error("tv_weight must be non-negative");
  if (!(optimizer.lr >= 0.0)) throw Error("attack lr must be non-negative");
  if (!(optimizer.final_lr_fraction >= 0.0 && optimizer.final_lr_fraction <= 1.0)) {
    throw Error("final_lr_fraction must lie in [0, 1]");
  }
  for (int s : s_iters) {
    if (s < 1 || s > T) {
      throw Error("s_iters entry " + std::to_string(s) + " outside [1, " + std::to_string(T) + "]");
    }
  }
  if (down_factor != 1 && down_factor != 2 && down_factor != 4) {
    throw Error("down_factor must be 1, 2 or 4");
  }
}

double AttackConfig::lr_at(int iteration) const {
  if (!optimizer.cosine_decay) return optimizer.lr;
  const double progress = static_cast<double>(iteration) / static_cast<double>(T);
  const double f = optimizer.final_lr_fraction;
  return optimizer.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j = {{"T", T},
                      {"grad_loss", to_string(grad_loss)},
                      {"tv_weight", tv_weight},
                      {"optimizer",
                       {{"kind", to_string(optimizer.kind)},
                        {"lr", optimizer.lr},
                        {"beta1", optimizer.beta1},
                        {"beta2", optimizer.beta2},
                        {"eps", optimizer.eps},
                        {"cosine_decay", optimizer.cosine_decay},
                        {"final_lr_fraction", optimizer.final_lr_fraction}}},
                      {"init", to_string(init)},
                      {"label_mode", to_string(label_mode)},
                      {"s_iters", s_iters},
                      {"seed", seed},
                      {"down_factor", down_factor}};
  if (protocol) j["protocol"] = to_string(*protocol);
  return j;
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.T = j.at("T").get<int>();
  c.grad_loss = parse_grad_loss(j.at("grad_loss").get<std::string>());
  c.tv_weight = j.at("tv_weight").get<double>();
  const auto& o = j.at("optimizer");
  c.optimizer.kind = parse_optimizer(o.at("kind").get<std::string>());
  c.optimizer.lr = o.at("lr").get<double>();
  c.optimizer.beta1 = o.at("beta1").get<double>();
  c.optimizer.beta2 = o.at("beta2").get<double>();
  c.optimizer.eps = o.at("eps").get<double>();
  c.optimizer.cosine_decay = o.at("cosine_decay").get<bool>();
  c.optimizer.final_lr_fraction = o.at("final_lr_fraction").get<double>();
  c.init = parse_init(j.at("init").get<std::string>());
  c.label_mode = parse_label_mode(j.at("label_mode").get<std::string>());
  c.s_iters = j.at("s_iters").get<std::set<int>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.down_factor = j.at("down_factor").get<std::size_t>();
  if (j.contains("protocol")) c.protocol = parse_algorithm(j.at("protocol").get<std::string>());
  return c;
}

std::string AttackConfig::digest() const { return sha256_hex(to_json().dump()).substr(0, 16); }

std::vector<int> infer_labels(const Update& update, const Model& model, std::size_t batch) {
  if (update.kind != UpdateKind::aggregated_gradient) {
    throw Error(
        "analytical label inference needs a FedSGD gradient; use label_mode = optimized for "
        "weight-delta updates");
  }
  const auto& layers = model.spec().layers;
  if (layers.empty() || layers.back().kind != LayerKind::dense) {
    throw Error("label inference needs a dense output layer");
  }
  if (update.tensors.empty()) throw Error("label inference: empty update");
  const auto& bias = update.tensors.back();
  if (bias.value.rank() != 1 || bias.value.size() != model.num_outputs()) {
    throw ShapeError("label inference: last update tensor '" + bias.name +
                     "' is not the output bias");
  }
  const auto g = bias.value.vec();
  std::vector<int> order(g.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return g[a] < g[b]; });
  std::size_t negatives = 0;
  while (negatives < order.size() && g[order[negatives]] < 0.0) ++negatives;

  std::vector<int> out;
  const std::size_t pool = std::max<std::size_t>(negatives, 1);
  for (std::size_t i = 0; i < batch; ++i) out.push_back(order[i % pool]);
  return out;
}

double grad_match_loss(const TensorMap& target, const TensorMap& candidate, GradLoss kind) {
  if (!same_layout(target, candidate)) {
    throw ShapeError("grad_match_loss: candidate does not match target tensors");
  }
  double sq = 0.0, tt = 0.0, cc = 0.0, tc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto a = target[i].value.data();
    const auto b = candidate[i].value.data();
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = a[k] - b[k];
      sq += d * d;
      tt += a[k] * a[k];
      cc += b[k] * b[k];
      tc += a[k] * b[k];
    }
  }
  if (kind == GradLoss::squared_l2) return sq;
  if (tt == 0.0 || cc == 0.0) return 1.0;
  return 1.0 - tc / (std::sqrt(tt) * std::sqrt(cc));
}

ag::Var grad_match_loss(const TensorMap& target, std::span<const ag::Var> candidate,
                        GradLoss kind) {
  if (target.size() != candidate.size()) {
    throw ShapeError("grad_match_loss: candidate has " + std::to_string(candidate.size()) +
                     " tensors, target " + std::to_string(target.size()));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].value.shape() != candidate[i].shape()) {
      throw ShapeError("grad_match_loss: shape mismatch for " + target[i].name);
    }
  }
  ag::Var total;
  auto accumulate = [&](const ag::Var& v) { total = total ? ag::add(total, v) : v; };
  if (kind == GradLoss::squared_l2) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const auto d = ag::sub(candidate[i], ag::constant(target[i].value));
      accumulate(ag::dot(d, d));
    }
    return total;
  }
  double tt = 0.0, cc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    for (double v : target[i].value.data()) tt += v * v;
    for (double v : candidate[i].value().data()) cc += v * v;
  }
  if (tt == 0.0 || cc == 0.0) return ag::constant(Tensor::scalar(1.0));
  ag::Var cand_sq;
  for (std::size_t i = 0; i < target.size(); ++i) {
    accumulate(ag::dot(candidate[i], ag::constant(target[i].value)));
    const auto s = ag::dot(candidate[i], candidate[i]);
    cand_sq = cand_sq ? ag::add(cand_sq, s) : s;
  }
  const auto denom = ag::scale(ag::sqrt(cand_sq), std::sqrt(tt));
  return ag::sub(ag::constant(Tensor::scalar(1.0)), ag::mul(total, ag::reciprocal(denom)));
}

double tv_regularizer(const Tensor& x_hat) { return ag::kernels::total_variation(x_hat); }

std::size_t attack_batch_size(const Update& target) {
  return target.kind == UpdateKind::aggregated_gradient ? target.meta.client.batch_size
                                                        : target.meta.dataset_size;
}

namespace {

void check_protocol(const Update& target, const AttackConfig& cfg) {
  const auto algo = target.meta.client.algorithm;
  const auto expected_kind =
      algo == Algorithm::fedsgd ? UpdateKind::aggregated_gradient : UpdateKind::weight_delta;
  if (target.kind != expected_kind) {
    throw Error("update kind does not match its client protocol " + to_string(algo));
  }
  if (cfg.protocol && *cfg.protocol != algo) {
    throw Error("attack configured for " + to_string(*cfg.protocol) + " but the update is " +
                to_string(algo));
  }
}

}  // namespace

ReconstructionState init_state(const Update& target, const Model& model, const AttackConfig& cfg,
                               std::span<const int> known_labels) {
  cfg.validate();
  check_protocol(target, cfg);
  const std::size_t b = attack_batch_size(target);
  if (b == 0) throw Error("target update carries no batch size");
  const auto& in = model.spec().input_shape;
  const std::size_t f = cfg.down_factor;
  if (in[1] % f != 0 || in[2] % f != 0) {
    throw ShapeError("down_factor " + std::to_string(f) + " does not divide image size " +
                     to_string(in));
  }
  ReconstructionState s;
  s.x_hat = Tensor(Shape{b, in[0], in[1] / f, in[2] / f});
  Rng rng(cfg.seed);
  for (auto& v : s.x_hat.data()) {
    v = cfg.init == InitKind::uniform01 ? rng.uniform() : std::clamp(rng.normal(), 0.0, 1.0);
  }
  const std::size_t k = model.num_outputs();
  switch (cfg.label_mode) {
    case LabelMode::known:
      if (known_labels.size() != b) {
        throw Error("label_mode = known needs " + std::to_string(b) + " labels, got " +
                    std::to_string(known_labels.size()));
      }
      check_labels(known_labels, k, b);
      s.labels.assign(known_labels.begin(), known_labels.end());
      break;
    case LabelMode::inferred:
      s.labels = infer_labels(target, model, b);
      break;
    case LabelMode::optimized:
      s.label_logits = Tensor(Shape{b, k});
      s.labels.assign(b, 0);
      s.m_y = Tensor(s.label_logits.shape());
      s.v_y = Tensor(s.label_logits.shape());
      break;
  }
  s.m_x = Tensor(s.x_hat.shape());
  s.v_x = Tensor(s.x_hat.shape());
  return s;
}

Tensor attack_images(const ReconstructionState& state, const AttackConfig& cfg) {
  if (cfg.down_factor == 1) return state.x_hat;
  return ag::kernels::upsample_nearest(state.x_hat, cfg.down_factor);
}

AttackObjective attack_objective(const ReconstructionState& state, const Update& target,
                                 const Model& model, const AttackConfig& cfg) {
  const auto theta = param_leaves(model);
  const auto x = ag::leaf(state.x_hat);
  const auto inputs = cfg.down_factor > 1 ? ag::upsample_nearest(x, cfg.down_factor) : x;
  const bool soft = cfg.label_mode == LabelMode::optimized;
  const auto y = soft ? ag::leaf(state.label_logits) : ag::Var{};
  const auto targets =
      soft ? ag::exp(ag::log_softmax(y)) : one_hot(state.labels, model.num_outputs());

  const auto candidate =
      client_update_graph(model.spec(), theta, inputs, targets, target.meta.client, true);
  auto loss = grad_match_loss(target.tensors, candidate, cfg.grad_loss);
  if (cfg.tv_weight > 0.0) loss = ag::add(loss, ag::scale(ag::total_variation(x), cfg.tv_weight));

  AttackObjective out;
  out.loss = loss.value().item();
  if (!std::isfinite(out.loss)) {
    throw NumericError("attack objective is not finite at iteration " +
                       std::to_string(state.iteration));
  }
  std::vector<ag::Var> wrt{x};
  if (soft) wrt.push_back(y);
  const auto g = ag::grad(loss, wrt, false);
  out.grad_x = g[0].value();
  if (soft) out.grad_y = g[1].value();
  return out;
}

namespace {

void optimizer_update(Tensor& x, Tensor& m, Tensor& v, const Tensor& g, const OptimizerConfig& o,
                      double lr, int step) {
  auto xs = x.data();
  const auto gs = g.data();
  if (o.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] -= lr * gs[i];
    return;
  }
  auto ms = m.data();
  auto vs = v.data();
  const double c1 = 1.0 - std::pow(o.beta1, step);
  const double c2 = 1.0 - std::pow(o.beta2, step);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ms[i] = o.beta1 * ms[i] + (1.0 - o.beta1) * gs[i];
    vs[i] = o.beta2 * vs[i] + (1.0 - o.beta2) * gs[i] * gs[i];
    xs[i] -= lr * (ms[i] / c1) / (std::sqrt(vs[i] / c2) + o.eps);
  }
}

}  // namespace

ReconstructionState attack_step(const ReconstructionState& state, const Update& target,
                                const Model& model, const AttackConfig& cfg) {
  if (state.iteration >= cfg.T) throw Error("attack_step: already at T");
  const auto obj = attack_objective(state, target, model, cfg);
  ReconstructionState next = state;
  const double lr = cfg.lr_at(state.iteration);
  ++next.adam_steps;
  optimizer_update(next.x_hat, next.m_x, next.v_x, obj.grad_x, cfg.optimizer, lr, next.adam_steps);
  next.x_hat = clamp(next.x_hat, 0.0, 1.0);
  if (cfg.label_mode == LabelMode::optimized) {
    optimizer_update(next.label_logits, next.m_y, next.v_y, obj.grad_y, cfg.optimizer, lr,
                     next.adam_steps);
    const std::size_t k = next.label_logits.dim(1);
    for (std::size_t b = 0; b < next.labels.size(); ++b) {
      const auto row = next.label_logits.data().subspan(b * k, k);
      next.labels[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  next.last_loss = obj.loss;
  next.best_loss = state.iteration == 0 ? obj.loss : std::min(state.best_loss, obj.loss);
  ++next.iteration;
  return next;
}

void reset_moments(ReconstructionState& state) {
  state.m_x = Tensor(state.x_hat.shape());
  state.v_x = Tensor(state.x_hat.shape());
  if (state.label_logits.size() > 0) {
    state.m_y = Tensor(state.label_logits.shape());
    state.v_y = Tensor(state.label_logits.shape());
  }
  state.adam_steps = 0;
}

ReconstructionState run_attack(const Update& target, const Model& model, const AttackConfig& cfg,
                               std::span<const int> known_labels, const AttackHooks& hooks) {
  auto state = init_state(target, model, cfg, known_labels);
  for (int t = 1; t <= cfg.T; ++t) {
    state = attack_step(state, target, model, cfg);
    if (hooks.sink && cfg.s_iters.count(t)) hooks.sink(state.x_hat, t);
    if (hooks.progress) hooks.progress(state);
  }
  return state;
}

}  // namespace gilab
