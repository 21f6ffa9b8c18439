#include "gilab/guide.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "gilab/digest.hpp"
#include "gilab/metrics.hpp"
#include "gilab/png.hpp"
#include "gilab/rng.hpp"

namespace gilab {

void PairSet::validate() const {
  if (scale != 1 && scale != 2 && scale != 4) throw Error("pair set scale must be 1, 2 or 4");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.noisy.rank() != 3 || p.clean.rank() != 3 || p.noisy.dim(0) != p.clean.dim(0) ||
        p.clean.dim(1) != scale * p.noisy.dim(1) || p.clean.dim(2) != scale * p.noisy.dim(2)) {
      throw ShapeError("pair " + std::to_string(i) + ": noisy " + to_string(p.noisy.shape()) +
                       " and clean " + to_string(p.clean.shape()) + " disagree with scale " +
                       std::to_string(scale));
    }
  }
}

std::string PairSet::digest() const {
  std::string text = std::to_string(scale) + "|" + attack_digest + "|" + defense_digest;
  for (const auto& p : pairs) {
    text += "|" + std::to_string(p.stage) + ":" + std::to_string(p.batch_size_of_origin) + ":" +
            tensor_digest(p.noisy) + ":" + tensor_digest(p.clean);
  }
  return sha256_hex(text);
}

void DenoiserSpec::validate() const {
  if (depth < 2) throw Error("denoiser depth must be at least 2");
  if (width == 0) throw Error("denoiser width must be positive");
  if (scale != 1 && scale != 2 && scale != 4) throw Error("denoiser scale must be 1, 2 or 4");
  if (depth < 2 + 2 * levels) {
    throw Error("denoiser depth must be at least 2 + 2 * levels (" + std::to_string(2 + 2 * levels) + ")");
  }
}

nlohmann::json DenoiserSpec::to_json() const {
  return {{"depth", depth}, {"width", width}, {"residual", residual}, {"scale", scale}, {"levels", levels}};
}

DenoiserSpec DenoiserSpec::from_json(const nlohmann::json& j) {
  DenoiserSpec s;
  s.depth = j.at("depth").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.residual = j.at("residual").get<bool>();
  s.scale = j.at("scale").get<std::size_t>();
  s.levels = j.value("levels", std::size_t{0});
  s.validate();
  return s;
}

ModelSpec DenoiserSpec::body_spec(std::size_t channels, std::size_t height,
                                  std::size_t width_px) const {
  validate();
  ModelSpec m;
  m.input_shape = {channels, height, width_px};
  const std::size_t cell = std::size_t{1} << levels;
  if (height % cell || width_px % cell) {
    throw ShapeError("denoiser with " + std::to_string(levels) + " levels needs image sides divisible by " +
                     std::to_string(cell));
  }
  auto conv = [&] {
    m.layers.push_back({LayerKind::conv2d, width});
    m.layers.push_back({LayerKind::relu});
  };
  conv();
  for (std::size_t l = 0; l < levels; ++l) {
    m.layers.push_back({LayerKind::avg_pool, 0, 2});
    conv();
  }
  for (std::size_t i = 0; i + 2 + 2 * levels < depth; ++i) conv();
  for (std::size_t l = 0; l < levels; ++l) {
    m.layers.push_back({LayerKind::upsample, 0, 2});
    conv();
  }
  m.layers.push_back({LayerKind::conv2d, channels});
  return m;
}

Denoiser Denoiser::init(const DenoiserSpec& spec, const Shape& image_shape, std::uint64_t seed) {
  if (image_shape.size() != 3) throw ShapeError("denoiser image shape must be [C, H, W]");
  const auto body_spec =
      spec.body_spec(image_shape[0], spec.scale * image_shape[1], spec.scale * image_shape[2]);
  auto params = Model::init(body_spec, seed).params();
  if (spec.residual) {
    for (std::size_t i = params.size() - 2; i < params.size(); ++i) {
      for (auto& v : params[i].value.data()) v = 0.0;
    }
  }
  return {spec, Model(body_spec, std::move(params))};
}

Shape Denoiser::input_shape() const {
  const auto& in = body.spec().input_shape;
  return {in[0], in[1] / spec.scale, in[2] / spec.scale};
}

namespace {

void check_denoiser_input(const Denoiser& den, const Tensor& images) {
  const auto want = den.input_shape();
  if (images.rank() != 4 || Shape(images.shape().begin() + 1, images.shape().end()) != want) {
    throw ShapeError("denoiser expects [B, " + std::to_string(want[0]) + ", " +
                     std::to_string(want[1]) + ", " + std::to_string(want[2]) + "], got " +
                     to_string(images.shape()));
  }
}

ag::Var denoiser_graph(const Denoiser& den, std::span<const ag::Var> params, const Tensor& images) {
  const auto up = den.spec.scale > 1 ? ag::kernels::upsample_nearest(images, den.spec.scale) : images;
  const auto in = ag::constant(up);
  const auto y = forward(den.body.spec(), params, in);
  return den.spec.residual ? ag::add(in, y) : y;
}

}  // namespace

Tensor Denoiser::apply(const Tensor& images) const {
  check_denoiser_input(*this, images);
  ag::NoGradGuard guard;
  return denoiser_graph(*this, param_constants(body), images).value();
}

void save_denoiser(const std::filesystem::path& path, const Denoiser& den) {
  Checkpoint ck;
  ck.header = {{"model", den.body.spec().to_json()},
               {"denoiser", den.spec.to_json()},
               {"defense_digest", den.defense_digest},
               {"attack_digest", den.attack_digest}};
  ck.tensors = den.body.params();
  save_checkpoint(path, ck);
}

Denoiser load_denoiser(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  if (!ck.header.contains("denoiser")) {
    throw Error(path.string() + " is not a denoiser checkpoint");
  }
  Denoiser d{DenoiserSpec::from_json(ck.header.at("denoiser")), model_from_checkpoint(ck)};
  d.defense_digest = ck.header.value("defense_digest", std::string("none"));
  d.attack_digest = ck.header.value("attack_digest", std::string());
  return d;
}

Tensor denoise(std::span<const BlendMember> blend, const Tensor& images) {
  if (blend.empty()) throw Error("denoise: empty blend");
  const std::size_t scale = blend[0].denoiser->spec.scale;
  for (const auto& m : blend) {
    if (!m.denoiser) throw Error("denoise: missing denoiser");
    if (m.denoiser->spec.scale != scale) throw Error("denoise: blend members differ in scale");
    if (!(m.weight >= 0.0)) throw Error("denoise: blend weights must be non-negative");
  }
  Tensor total;
  for (const auto& m : blend) {
    auto y = m.denoiser->apply(images);
    if (total.size() == 0) {
      for (auto& v : y.data()) v *= m.weight;
      total = std::move(y);
    } else {
      auto t = total.data();
      const auto s = y.data();
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += m.weight * s[i];
    }
  }
  return clamp(total, 0.0, 1.0);
}

Tensor denoise(const Denoiser& den, const Tensor& images) {
  const BlendMember one{&den, 1.0};
  return denoise(std::span(&one, 1), images);
}

BatchSeeds collect_batch_seeds(std::uint64_t seed, std::size_t index) {
  const auto base = derive_seed(seed, index);
  return {derive_seed(base, 0), derive_seed(base, 1), derive_seed(base, 2), derive_seed(base, 3)};
}

SimulatedClient simulate_client(const Model& model, const Dataset& pool,
                                const AttackConfig& attack, const ClientConfig& client,
                                const DefenseConfig& defense, std::size_t client_size,
                                const BatchSeeds& seeds) {
  if (pool.size() < client_size) {
    throw Error("data pool has " + std::to_string(pool.size()) +
                " images, fewer than the client size " + std::to_string(client_size));
  }
  Rng rng(seeds.sample);
  std::vector<std::size_t> all(pool.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < client_size; ++i) {
    std::swap(all[i], all[i + rng.below(all.size() - i)]);
  }
  const std::vector<std::size_t> rows(all.begin(), all.begin() + client_size);
  SimulatedClient out;
  out.data = pool.subset(rows);
  ClientConfig cc = client;
  cc.shuffle_seed = seeds.client;
  DefenseConfig dc = defense;
  dc.seed = seeds.defense;
  out.update = apply_defense(compute_update(model, out.data, cc), dc);
  out.attack = attack;
  out.attack.seed = seeds.attack;
  return out;
}

namespace {

std::vector<DenoisePair> collect_one(const Model& model, const Dataset& surrogate,
                                     const AttackConfig& attack, const ClientConfig& client,
                                     const DefenseConfig& defense, std::size_t client_size,
                                     const BatchSeeds& seeds) {
  const auto sim = simulate_client(model, surrogate, attack, client, defense, client_size, seeds);
  const auto& data = sim.data;
  const auto& ac = sim.attack;
  std::vector<DenoisePair> out;
  AttackHooks hooks;
  hooks.sink = [&](const Tensor& x, int t) {
    const auto full = ac.down_factor > 1 ? ag::kernels::upsample_nearest(x, ac.down_factor) : x;
    const auto assignment = match_assignment(full, data.images);
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      out.push_back({x.row(i), data.images.row(assignment[i]), t, client_size});
    }
  };
  const std::span<const int> labels =
      attack.label_mode == LabelMode::known ? std::span<const int>(data.labels) : std::span<const int>();
  run_attack(sim.update, model, ac, labels, hooks);
  return out;
}

}  // namespace

PairSet collect_pairs(const Model& model, const Dataset& surrogate, const AttackConfig& attack,
                      const ClientConfig& client, const DefenseConfig& defense,
                      const CollectConfig& cfg) {
  attack.validate();
  client.validate();
  defense.validate();
  if (cfg.n_den == 0) throw Error("n_den must be positive");
  if (attack.s_iters.empty()) throw Error("collect_pairs needs a non-empty s_iters");
  const std::size_t m = cfg.client_size ? cfg.client_size : client.batch_size;
  if (client.algorithm == Algorithm::fedsgd && m != client.batch_size) {
    throw Error("FedSGD clients hold exactly one batch");
  }
  if (surrogate.size() < m) {
    throw Error("surrogate set has " + std::to_string(surrogate.size()) +
                " images, fewer than the client size " + std::to_string(m));
  }
  const std::size_t per_batch = m * attack.s_iters.size();
  const std::size_t batches = (cfg.n_den + per_batch - 1) / per_batch;
  const std::size_t threads = std::max<std::size_t>(cfg.threads, 1);

  std::vector<std::vector<DenoisePair>> results(batches);
  for (std::size_t start = 0; start < batches; start += threads) {
    const std::size_t end = std::min(batches, start + threads);
    if (end - start == 1) {
      results[start] = collect_one(model, surrogate, attack, client, defense, m,
                                   collect_batch_seeds(cfg.seed, start));
      continue;
    }
    std::vector<std::exception_ptr> errors(end - start);
    std::vector<std::thread> pool;
    for (std::size_t i = start; i < end; ++i) {
      pool.emplace_back([&, i] {
        try {
          results[i] = collect_one(model, surrogate, attack, client, defense, m,
                                   collect_batch_seeds(cfg.seed, i));
        } catch (...) {
          errors[i - start] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  PairSet set;
  set.scale = attack.down_factor;
  set.attack_digest = attack.digest();
  set.defense_digest = defense.digest();
  for (auto& r : results) {
    for (auto& p : r) {
      if (set.pairs.size() == cfg.n_den) break;
      set.pairs.push_back(std::move(p));
    }
  }
  return set;
}

nlohmann::json DenoiserTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size},         {"lr", lr},
          {"beta1", beta1},   {"beta2", beta2},                   {"eps", eps},
          {"seed", seed},     {"train_fraction", train_fraction}, {"augment", augment}};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const PairSet& pairs, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error("train fraction must lie in (0, 1)");
  }
  std::map<int, std::vector<std::size_t>> by_stage;
  for (std::size_t i = 0; i < pairs.pairs.size(); ++i) by_stage[pairs.pairs[i].stage].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& [stage, idx] : by_stage) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(stage)));
    rng.shuffle(std::span<std::size_t>(idx));
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * idx.size()));
    train.insert(train.end(), idx.begin(), idx.begin() + n_train);
    test.insert(test.end(), idx.begin() + n_train, idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

namespace {

Tensor stack_field(const PairSet& pairs, std::span<const std::size_t> idx, bool noisy) {
  std::vector<Tensor> items;
  items.reserve(idx.size());
  for (auto i : idx) items.push_back(noisy ? pairs.pairs[i].noisy : pairs.pairs[i].clean);
  return stack(items);
}

// Dihedral transform (bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes)
// followed by a channel permutation.
Tensor augment_image(const Tensor& img, unsigned dihedral, std::span<const std::size_t> channels) {
  const auto& sh = img.shape();
  const std::size_t c = sh[0], h = sh[1], w = sh[2];
  Tensor out(sh);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t sy = (dihedral & 4) ? x : y, sx = (dihedral & 4) ? y : x;
        if (dihedral & 2) sy = h - 1 - sy;
        if (dihedral & 1) sx = w - 1 - sx;
        out[(k * h + y) * w + x] = img[(channels[k] * h + sy) * w + sx];
      }
    }
  }
  return out;
}

bool finite_all(const std::vector<ag::Var>& vs) {
  for (const auto& v : vs) {
    if (!v.value().all_finite()) return false;
  }
  return true;
}

}  // namespace

void evaluate_denoiser(const Denoiser& den, const PairSet& pairs,
                       std::span<const std::size_t> indices, DenoiserReport& report) {
  report.psnr_before = report.psnr_after = report.mae_before = report.mae_after = 0.0;
  if (indices.empty()) return;
  for (auto i : indices) {
    const auto& p = pairs.pairs[i];
    Shape batched{1};
    batched.insert(batched.end(), p.noisy.shape().begin(), p.noisy.shape().end());
    const auto noisy = p.noisy.reshaped(batched);
    auto before = den.spec.scale > 1 ? ag::kernels::upsample_nearest(noisy, den.spec.scale) : noisy;
    before = before.reshaped(p.clean.shape());
    const auto after = denoise(den, noisy).reshaped(p.clean.shape());
    report.psnr_before += psnr(before, p.clean);
    report.psnr_after += psnr(after, p.clean);
    double mb = 0.0, ma = 0.0;
    for (std::size_t k = 0; k < p.clean.size(); ++k) {
      mb += std::abs(before[k] - p.clean[k]);
      ma += std::abs(after[k] - p.clean[k]);
    }
    report.mae_before += mb / static_cast<double>(p.clean.size());
    report.mae_after += ma / static_cast<double>(p.clean.size());
  }
  const double n = static_cast<double>(indices.size());
  report.psnr_before /= n;
  report.psnr_after /= n;
  report.mae_before /= n;
  report.mae_after /= n;
}

TrainedDenoiser train_denoiser(const PairSet& pairs, const DenoiserSpec& spec,
                               const DenoiserTrainConfig& cfg) {
  spec.validate();
  pairs.validate();
  if (pairs.pairs.size() < 10) {
    throw Error("denoiser training needs at least 10 pairs, got " +
                std::to_string(pairs.pairs.size()));
  }
  if (spec.scale != pairs.scale) {
    throw Error("denoiser scale " + std::to_string(spec.scale) + " does not match pair set scale " +
                std::to_string(pairs.scale));
  }
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw Error("epochs and batch size must be positive");

  TrainedDenoiser out{Denoiser::init(spec, pairs.pairs[0].noisy.shape(), cfg.seed), {}};
  auto& den = out.denoiser;
  den.defense_digest = pairs.defense_digest;
  den.attack_digest = pairs.attack_digest;
  auto& rep = out.report;
  std::tie(rep.train_indices, rep.test_indices) = stratified_split(pairs, cfg.train_fraction, cfg.seed);

  TensorMap m = zeros_like(den.body.params()), v = zeros_like(den.body.params());
  std::size_t step = 0;
  std::vector<std::size_t> order = rep.train_indices;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Rng rng(derive_seed(cfg.seed, 1000 + e));
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + s,
                                             std::min(cfg.batch_size, order.size() - s));
      Tensor noisy, clean;
      if (cfg.augment) {
        std::vector<Tensor> ns, cs;
        for (auto i : idx) {
          const auto& p = pairs.pairs[i];
          const bool square = p.clean.shape()[1] == p.clean.shape()[2];
          const auto dihedral = static_cast<unsigned>(rng.below(square ? 8 : 4));
          std::vector<std::size_t> ch(p.clean.shape()[0]);
          std::iota(ch.begin(), ch.end(), 0);
          rng.shuffle(std::span<std::size_t>(ch));
          ns.push_back(augment_image(p.noisy, dihedral, ch));
          cs.push_back(augment_image(p.clean, dihedral, ch));
        }
        noisy = stack(ns);
        clean = stack(cs);
      } else {
        noisy = stack_field(pairs, idx, true);
        clean = stack_field(pairs, idx, false);
      }
      const auto params = param_leaves(den.body);
      double lv = NAN;
      std::vector<ag::Var> grads;
      try {
        const auto out_img = denoiser_graph(den, params, noisy);
        const auto diff = ag::sub(out_img, ag::constant(clean));
        const auto loss =
            ag::scale(ag::sum(ag::abs(diff)), 1.0 / static_cast<double>(clean.size()));
        lv = loss.value().item();
        grads = ag::grad(loss, params, false);
      } catch (const NumericError&) {
        lv = NAN;
      }
      if (!std::isfinite(lv) || !finite_all(grads)) {
        throw DenoiserDivergence("denoiser training diverged at epoch " + std::to_string(e) +
                                     ", step " + std::to_string(step),
                                 den);
      }
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      TensorMap next = den.body.params();
      for (std::size_t t = 0; t < next.size(); ++t) {
        auto p = next[t].value.data();
        auto ms = m[t].value.data();
        auto vs = v[t].value.data();
        const auto g = grads[t].value().data();
        for (std::size_t k = 0; k < p.size(); ++k) {
          ms[k] = cfg.beta1 * ms[k] + (1.0 - cfg.beta1) * g[k];
          vs[k] = cfg.beta2 * vs[k] + (1.0 - cfg.beta2) * g[k] * g[k];
          p[k] -= cfg.lr * (ms[k] / c1) / (std::sqrt(vs[k] / c2) + cfg.eps);
        }
      }
      for (const auto& nt : next) {
        if (!nt.value.all_finite()) {
          throw DenoiserDivergence("denoiser parameters overflowed at epoch " + std::to_string(e) +
                                       ", step " + std::to_string(step),
                                   den);
        }
      }
      den.body = Model(den.body.spec(), std::move(next));
      epoch_loss += lv;
      ++batches;
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  evaluate_denoiser(den, pairs, rep.test_indices, rep);
  return out;
}

void GuideConfig::validate(const AttackConfig& attack) const {
  attack.validate();
  if (d_iters.empty()) throw Error("GUIDE needs a non-empty d_iters");
  const int end = stop_at.value_or(attack.T);
  if (end < 1 || end > attack.T) throw Error("stop_at must lie in [1, T]");
  for (int d : d_iters) {
    if (d < 1 || d > end) {
      throw Error("d_iters entry " + std::to_string(d) + " outside [1, " + std::to_string(end) + "]");
    }
  }
  if (denoisers.empty()) throw Error("GUIDE needs at least one denoiser");
  double total = 0.0;
  for (const auto& m : denoisers) {
    if (!m.denoiser) throw Error("GUIDE blend member without a denoiser");
    if (!(m.weight >= 0.0)) throw Error("blend weights must be non-negative");
    if (m.denoiser->spec.scale != denoisers[0].denoiser->spec.scale) {
      throw Error("blend members differ in scale");
    }
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("blend weights must sum to 1");
  const auto scale = denoisers[0].denoiser->spec.scale;
  if (scale != attack.down_factor) {
    throw Error("denoiser scale " + std::to_string(scale) + " does not match attack down_factor " +
                std::to_string(attack.down_factor));
  }
  if (scale > 1 && (d_iters.size() != 1 || *d_iters.begin() != end)) {
    throw Error("upscaling denoisers may only run at the final iteration");
  }
}

GuideResult guide_reconstruct(const Update& target, const Model& model,
                              const AttackConfig& attack, const GuideConfig& guide,
                              std::span<const int> known_labels, const AttackHooks& hooks) {
  guide.validate(attack);
  GuideResult r;
  for (const auto& m : guide.denoisers) {
    if (m.denoiser->defense_digest != guide.denoisers[0].denoiser->defense_digest) {
      r.warnings.push_back("blend mixes denoisers trained under different defenses (" +
                           guide.denoisers[0].denoiser->defense_digest + ", " +
                           m.denoiser->defense_digest + ")");
    }
  }
  const int end = guide.stop_at.value_or(attack.T);
  auto state = init_state(target, model, attack, known_labels);
  for (int t = 1; t <= end; ++t) {
    state = attack_step(state, target, model, attack);
    if (hooks.sink && attack.s_iters.count(t)) hooks.sink(state.x_hat, t);
    if (hooks.progress) hooks.progress(state);
    if (!guide.d_iters.count(t)) continue;
    if (t == end) {
      r.plain = attack_images(state, attack);
      r.final = denoise(guide.denoisers, state.x_hat);
    } else {
      auto x = denoise(guide.denoisers, state.x_hat);
      if (!(x == state.x_hat)) {
        state.x_hat = std::move(x);
        reset_moments(state);
      }
    }
  }
  if (!guide.d_iters.count(end)) {
    r.plain = attack_images(state, attack);
    r.final = r.plain;
  }
  r.state = std::move(state);
  return r;
}

GuideResult reduced_space_attack(const Update& target, const Model& model, AttackConfig attack,
                                 std::size_t down_factor, const Denoiser& upscaler,
                                 std::span<const int> known_labels) {
  if (down_factor != 1 && down_factor != 2 && down_factor != 4) {
    throw Error("down_factor must be 1, 2 or 4");
  }
  if (upscaler.spec.scale != down_factor) {
    throw Error("upscaling denoiser has scale " + std::to_string(upscaler.spec.scale) +
                ", expected " + std::to_string(down_factor));
  }
  attack.down_factor = down_factor;
  GuideConfig g;
  g.d_iters = {attack.T};
  g.denoisers = {{&upscaler, 1.0}};
  return guide_reconstruct(target, model, attack, g, known_labels);
}

namespace {

std::string record_id(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_pairset(const std::filesystem::path& dir, const PairSet& pairs) {
  pairs.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.pairs.size(); ++i) {
    const auto& p = pairs.pairs[i];
    const auto id = record_id(i);
    write_png(dir / (id + ".noisy.png"), p.noisy, 16);
    write_png(dir / (id + ".clean.png"), p.clean, 16);
    write_json(dir / (id + ".json"), {{"stage", p.stage},
                                      {"batch_size_of_origin", p.batch_size_of_origin},
                                      {"attack_digest", pairs.attack_digest},
                                      {"defense_digest", pairs.defense_digest}});
    records.push_back({{"id", id},
                       {"noisy", id + ".noisy.png"},
                       {"clean", id + ".clean.png"},
                       {"sidecar", id + ".json"}});
  }
  std::map<std::string, std::size_t> stages;
  for (const auto& p : pairs.pairs) ++stages[std::to_string(p.stage)];
  write_json(dir / "manifest.json", {{"scale", pairs.scale},
                                     {"count", pairs.pairs.size()},
                                     {"stages", stages},
                                     {"attack_digest", pairs.attack_digest},
                                     {"defense_digest", pairs.defense_digest},
                                     {"records", records}});
}

PairSet read_pairset(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  PairSet set;
  set.scale = manifest.at("scale").get<std::size_t>();
  set.attack_digest = manifest.at("attack_digest").get<std::string>();
  set.defense_digest = manifest.at("defense_digest").get<std::string>();
  for (const auto& rec : manifest.at("records")) {
    const auto side = read_json(dir / rec.at("sidecar").get<std::string>());
    if (side.at("attack_digest") != set.attack_digest ||
        side.at("defense_digest") != set.defense_digest) {
      throw Error("pair record " + rec.at("id").get<std::string>() +
                  " carries digests that differ from its manifest");
    }
    DenoisePair p;
    p.noisy = read_png(dir / rec.at("noisy").get<std::string>());
    p.clean = read_png(dir / rec.at("clean").get<std::string>());
    p.stage = side.at("stage").get<int>();
    p.batch_size_of_origin = side.at("batch_size_of_origin").get<std::size_t>();
    set.pairs.push_back(std::move(p));
  }
  if (set.pairs.size() != manifest.at("count").get<std::size_t>()) {
    throw Error("pair set manifest count disagrees with its records");
  }
  set.validate();
  return set;
}

}  // namespace gilab
