#include "gilab/fed.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gilab/digest.hpp"
#include "gilab/rng.hpp"

namespace gilab {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.images = gather_rows(images, rows);
  for (auto r : rows) out.labels.push_back(labels.at(r));
  return out;
}

std::string to_string(Algorithm a) { return a == Algorithm::fedsgd ? "fedsgd" : "fedavg"; }

Algorithm parse_algorithm(const std::string& s) {
  if (s == "fedsgd") return Algorithm::fedsgd;
  if (s == "fedavg") return Algorithm::fedavg;
  throw Error("unknown FL algorithm '" + s + "' (expected fedsgd or fedavg)");
}

void ClientConfig::validate() const {
  if (batch_size == 0) throw Error("client batch size must be positive");
  if (local_epochs == 0) throw Error("client local epochs must be positive");
  if (!(lr >= 0.0)) throw Error("client learning rate must be non-negative");
  if (algorithm == Algorithm::fedsgd && local_epochs != 1) {
    throw Error("FedSGD performs exactly one local epoch");
  }
}

nlohmann::json ClientConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"local_epochs", local_epochs},
          {"lr", lr},
          {"algorithm", to_string(algorithm)},
          {"shuffle_seed", shuffle_seed}};
}

ClientConfig ClientConfig::from_json(const nlohmann::json& j) {
  ClientConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.local_epochs = j.at("local_epochs").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  c.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0});
  return c;
}

void DefenseConfig::validate() const {
  if (!(dp_sigma >= 0.0)) throw Error("dp_sigma must be non-negative");
  if (qsgd_bits && topk_keep_fraction) {
    throw Error("QSGD and top-k are exclusive; configure one defense per run");
  }
  if (qsgd_bits && *qsgd_bits < 1) throw Error("qsgd_bits must be at least 1");
  if (topk_keep_fraction && !(*topk_keep_fraction > 0.0 && *topk_keep_fraction <= 1.0)) {
    throw Error("topk_keep_fraction must lie in (0, 1]");
  }
}

nlohmann::json DefenseConfig::to_json() const {
  nlohmann::json j{{"dp_sigma", dp_sigma}, {"seed", seed}};
  j["qsgd_bits"] = qsgd_bits ? nlohmann::json(*qsgd_bits) : nlohmann::json(nullptr);
  j["topk_keep_fraction"] =
      topk_keep_fraction ? nlohmann::json(*topk_keep_fraction) : nlohmann::json(nullptr);
  return j;
}

std::string DefenseConfig::digest() const {
  if (!active()) return "none";
  nlohmann::json j = to_json();
  j.erase("seed");
  return sha256_hex(j.dump()).substr(0, 16);
}

std::vector<std::vector<std::size_t>> fedavg_schedule(std::size_t dataset_size,
                                                      const ClientConfig& cfg) {
  cfg.validate();
  if (dataset_size < cfg.batch_size) {
    throw Error("client dataset of " + std::to_string(dataset_size) +
                " samples is smaller than the batch size " + std::to_string(cfg.batch_size));
  }
  const std::size_t per_epoch = (dataset_size + cfg.batch_size - 1) / cfg.batch_size;
  if (cfg.local_epochs * per_epoch == 0) throw Error("FedAVG schedule has no local steps");
  std::vector<std::vector<std::size_t>> steps;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    std::vector<std::size_t> perm(dataset_size);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(cfg.shuffle_seed, e));
    rng.shuffle(std::span(perm));
    for (std::size_t s = 0; s < dataset_size; s += cfg.batch_size) {
      const std::size_t end = std::min(dataset_size, s + cfg.batch_size);
      steps.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(s),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return steps;
}

std::vector<ag::Var> client_update_graph(const ModelSpec& spec, std::span<const ag::Var> theta,
                                         const ag::Var& inputs, const ag::Var& targets,
                                         const ClientConfig& cfg, bool create_graph) {
  cfg.validate();
  const std::size_t n = inputs.value().dim(0);
  if (cfg.algorithm == Algorithm::fedsgd) {
    const auto logits = forward(spec, theta, inputs);
    const auto loss = ag::scale(cross_entropy(logits, targets), static_cast<double>(n));
    return ag::grad(loss, theta, create_graph);
  }

  std::vector<ag::Var> current(theta.begin(), theta.end());
  for (const auto& rows : fedavg_schedule(n, cfg)) {
    const auto logits = forward(spec, current, ag::gather(inputs, rows));
    const auto loss = cross_entropy(logits, ag::gather(targets, rows));
    const auto g = ag::grad(loss, current, create_graph);
    for (std::size_t i = 0; i < current.size(); ++i) {
      current[i] = ag::sub(current[i], ag::scale(g[i], cfg.lr));
      // Without a second-order graph the history is dead weight.
      if (!create_graph) current[i] = ag::leaf(current[i].value());
    }
  }
  std::vector<ag::Var> delta;
  for (std::size_t i = 0; i < current.size(); ++i) {
    delta.push_back(ag::sub(theta[i], current[i]));
  }
  return delta;
}

namespace {

Update finish_update(const Model& model, std::vector<ag::Var> tensors, const ClientConfig& cfg,
                     std::size_t dataset_size) {
  Update u;
  u.kind = cfg.algorithm == Algorithm::fedsgd ? UpdateKind::aggregated_gradient
                                              : UpdateKind::weight_delta;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    u.tensors.push_back({model.params()[i].name, tensors[i].value()});
  }
  u.meta.client = cfg;
  u.meta.dataset_size = dataset_size;
  return u;
}

}  // namespace

Update fedsgd_update(const Model& model, const Tensor& batch, std::span<const int> labels,
                     const ClientConfig& cfg) {
  if (cfg.algorithm != Algorithm::fedsgd) throw Error("fedsgd_update needs algorithm = fedsgd");
  if (batch.rank() == 0 || batch.dim(0) != cfg.batch_size) {
    throw ShapeError("FedSGD batch holds " + std::to_string(batch.rank() ? batch.dim(0) : 0) +
                     " samples, client batch size is " + std::to_string(cfg.batch_size));
  }
  const auto logits_classes = model.num_outputs();
  check_labels(labels, logits_classes, batch.dim(0));
  const auto theta = param_leaves(model);
  auto g = client_update_graph(model.spec(), theta, ag::constant(batch),
                               one_hot(labels, logits_classes), cfg, false);
  return finish_update(model, std::move(g), cfg, batch.dim(0));
}

Update fedavg_update(const Model& model, const Dataset& dataset, const ClientConfig& cfg) {
  if (cfg.algorithm != Algorithm::fedavg) throw Error("fedavg_update needs algorithm = fedavg");
  const auto classes = model.num_outputs();
  check_labels(dataset.labels, classes, dataset.images.dim(0));
  const auto theta = param_leaves(model);
  auto d = client_update_graph(model.spec(), theta, ag::constant(dataset.images),
                               one_hot(dataset.labels, classes), cfg, false);
  return finish_update(model, std::move(d), cfg, dataset.size());
}

Update compute_update(const Model& model, const Dataset& data, const ClientConfig& cfg) {
  return cfg.algorithm == Algorithm::fedsgd ? fedsgd_update(model, data.images, data.labels, cfg)
                                            : fedavg_update(model, data, cfg);
}

Model server_aggregate(std::span<const Update> updates, const Model& global_model,
                       double global_lr) {
  if (updates.empty()) throw Error("server_aggregate: no updates");
  const auto kind = updates[0].kind;
  double total_n = 0.0;
  for (const auto& u : updates) {
    if (u.kind != kind) throw Error("server_aggregate: mixed update kinds");
    if (u.meta.round != updates[0].meta.round) throw Error("server_aggregate: mixed rounds");
    if (!same_layout(u.tensors, global_model.params())) {
      throw ShapeError("server_aggregate: update does not match the global model");
    }
    total_n += static_cast<double>(u.meta.dataset_size);
  }
  if (kind == UpdateKind::weight_delta && total_n <= 0.0) {
    throw Error("server_aggregate: FedAVG weights need positive dataset sizes");
  }
  TensorMap next = global_model.params();
  for (std::size_t t = 0; t < next.size(); ++t) {
    auto theta = next[t].value.data();
    std::vector<double> step(theta.size(), 0.0);
    for (const auto& u : updates) {
      const double w = kind == UpdateKind::aggregated_gradient
                           ? global_lr
                           : static_cast<double>(u.meta.dataset_size) / total_n;
      const auto d = u.tensors[t].value.data();
      for (std::size_t k = 0; k < step.size(); ++k) step[k] += w * d[k];
    }
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= step[k];
  }
  return Model(global_model.spec(), std::move(next));
}

Update apply_dp_noise(const Update& update, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw Error("dp sigma must be non-negative");
  Update out = update;
  if (sigma == 0.0) return out;
  for (std::size_t t = 0; t < out.tensors.size(); ++t) {
    Rng rng(derive_seed(seed, t));
    for (auto& v : out.tensors[t].value.data()) v += sigma * rng.normal();
  }
  return out;
}

Update qsgd_quantize(const Update& update, int bits, std::uint64_t seed) {
  if (bits < 1 || bits > 30) throw Error("qsgd bits must lie in [1, 30]");
  const double levels = static_cast<double>((1u << bits) - 1u);
  Update out = update;
  for (std::size_t t = 0; t < out.tensors.size(); ++t) {
    auto data = out.tensors[t].value.data();
    const double scale = max_abs(out.tensors[t].value);
    if (scale == 0.0) continue;
    Rng rng(derive_seed(seed, t));
    for (auto& v : data) {
      double r = std::abs(v) * levels / scale;
      const double nearest = std::round(r);
      if (std::abs(r - nearest) < 1e-9) r = nearest;
      const double lower = std::floor(r);
      const double q = lower + (rng.uniform() < r - lower ? 1.0 : 0.0);
      v = std::copysign(q * scale / levels, v);
    }
  }
  return out;
}

std::size_t topk_count(std::size_t n, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw Error("keep fraction must lie in (0, 1]");
  }
  // Tolerance absorbs representation error, e.g. (1 - 0.95) * 1000.
  const double exact = keep_fraction * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::min(n, std::max<std::size_t>(k, 1));
}

Update topk_sparsify(const Update& update, double keep_fraction) {
  Update out = update;
  for (auto& nt : out.tensors) {
    auto data = nt.value.data();
    const std::size_t k = topk_count(data.size(), keep_fraction);
    if (k == data.size()) continue;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(data[a]) > std::abs(data[b]);
    });
    std::vector<char> keep(data.size(), 0);
    for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!keep[i]) data[i] = 0.0;
  }
  return out;
}

Update apply_defense(const Update& update, const DefenseConfig& defense) {
  defense.validate();
  Update out = update;
  if (defense.topk_keep_fraction) out = topk_sparsify(out, *defense.topk_keep_fraction);
  if (defense.qsgd_bits) out = qsgd_quantize(out, *defense.qsgd_bits, derive_seed(defense.seed, 1));
  if (defense.dp_sigma > 0.0) out = apply_dp_noise(out, defense.dp_sigma, derive_seed(defense.seed, 2));
  return out;
}

nlohmann::json update_header(const Update& update) {
  return {{"kind", update.kind == UpdateKind::aggregated_gradient ? "aggregated_gradient"
                                                                  : "weight_delta"},
          {"meta",
           {{"client", update.meta.client.to_json()},
            {"dataset_size", update.meta.dataset_size},
            {"round", update.meta.round}}}};
}

void save_update(const std::filesystem::path& path, const Update& update) {
  save_checkpoint(path, Checkpoint{update_header(update), update.tensors});
}

Update load_update(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  Update u;
  const auto& h = ckpt.header;
  const auto kind = h.at("kind").get<std::string>();
  if (kind == "aggregated_gradient") {
    u.kind = UpdateKind::aggregated_gradient;
  } else if (kind == "weight_delta") {
    u.kind = UpdateKind::weight_delta;
  } else {
    throw Error("update file has unknown kind '" + kind + "'");
  }
  u.meta.client = ClientConfig::from_json(h.at("meta").at("client"));
  u.meta.dataset_size = h.at("meta").at("dataset_size").get<std::size_t>();
  u.meta.round = h.at("meta").at("round").get<std::size_t>();
  u.tensors = ckpt.tensors;
  return u;
}

}  // namespace gilab
