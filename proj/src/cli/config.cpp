#include <fstream>
#include <sstream>

#include "gilab/cli.hpp"
#include "gilab/rng.hpp"
#include "toml.hpp"

namespace gilab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json to_json_value(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = to_json_value(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(to_json_value(v));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw ConfigError("dates and times are not valid config values");
}

json parse_toml(const std::string& text, const std::string& where) {
  try {
    return to_json_value(toml::parse(text, where));
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "cannot parse " << where << ": " << e.description() << " at line "
        << e.source().begin.line;
    throw ConfigError(msg.str());
  }
}

json override_value(const std::string& text) {
  try {
    return to_json_value(*toml::parse("v = " + text).get("v"));
  } catch (const toml::parse_error&) {
    return text;
  }
}

void apply_override(json& root, const Override& o) {
  if (o.first.empty()) throw ConfigError("empty override key");
  json* node = &root;
  std::string key;
  std::istringstream parts(o.first);
  std::vector<std::string> path;
  while (std::getline(parts, key, '.')) path.push_back(key);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json& next = (*node)[path[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override --" + o.first + ": '" + path[i] + "' is not a table");
    node = &next;
  }
  (*node)[path.back()] = override_value(o.second);
}

// Typed reader over one table that rejects unknown keys.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("[" + path_ + "] must be a table");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  std::uint64_t u64(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) fail(key, "must be non-negative");
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    }
    fail(key, "must be an integer");
  }
  std::size_t size(const std::string& key, std::size_t def) { return u64(key, def); }
  int integer(const std::string& key, int def) {
    if (!has(key)) return def;
    if (!j_.at(key).is_number_integer()) fail(key, "must be an integer");
    return j_.at(key).get<int>();
  }
  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    if (!j_.at(key).is_number()) fail(key, "must be a number");
    return j_.at(key).get<double>();
  }
  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    if (!j_.at(key).is_boolean()) fail(key, "must be true or false");
    return j_.at(key).get<bool>();
  }
  std::string str(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    if (!j_.at(key).is_string()) fail(key, "must be a string");
    return j_.at(key).get<std::string>();
  }
  std::vector<std::string> strings(const std::string& key) {
    if (!has(key)) return {};
    const auto& v = j_.at(key);
    if (!v.is_array()) fail(key, "must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) fail(key, "must be an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }
  std::vector<std::int64_t> ints(const std::string& key) {
    if (!has(key)) return {};
    const auto& v = j_.at(key);
    if (!v.is_array()) fail(key, "must be an array of integers");
    std::vector<std::int64_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) fail(key, "must be an array of integers");
      out.push_back(e.get<std::int64_t>());
    }
    return out;
  }
  Section sub(const std::string& key) {
    static const json empty = json::object();
    return has(key) ? Section(j_.at(key), path_.empty() ? key : path_ + "." + key)
                    : Section(empty, path_.empty() ? key : path_ + "." + key);
  }
  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }
  const std::string& path() const { return path_; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) {
        throw ConfigError("unknown config key '" + (path_.empty() ? k : path_ + "." + k) + "'");
      }
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("config key '" + (path_.empty() ? key : path_ + "." + key) + "' " + what);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Seed streams for sections that do not pin their own seed.
enum Stream : std::uint64_t {
  kModel = 1,
  kVictimData,
  kSurrogateData,
  kAttack,
  kDefense,
  kCollect,
  kDenoiser,
  kVictims,
  kProbe,
  kClient,
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::vector<LayerSpec> parse_layers(Section& s, const std::string& key) {
  std::vector<LayerSpec> out;
  for (const auto& text : s.strings(key)) {
    try {
      out.push_back(parse_layer(text));
    } catch (const Error& e) {
      s.fail(key, std::string("has a bad layer: ") + e.what());
    }
  }
  return out;
}

DatasetSource parse_source(Section s, std::uint64_t default_seed, const fs::path& base) {
  DatasetSource d;
  const auto type = s.str("source", "synthetic");
  if (type == "synthetic") {
    d.type = DatasetSource::Type::synthetic;
    d.kind = parse_synthetic_kind(s.str("kind", "shapes"));
    d.n = s.size("n", d.n);
    d.size = s.size("size", d.size);
    d.channels = s.size("channels", d.channels);
    d.classes = s.size("classes", d.classes);
    d.seed = s.u64("seed", default_seed);
  } else if (type == "png_dir") {
    d.type = DatasetSource::Type::png_dir;
    if (!s.has("path")) s.fail("path", "is required for png_dir datasets");
    d.path = resolve(base, s.str("path", ""));
  } else {
    s.fail("source", "must be 'synthetic' or 'png_dir'");
  }
  s.finish();
  return d;
}

template <class F>
void validated(const std::string& what, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("invalid " + what + " config: " + e.what());
  }
}

ExperimentConfig build(const json& root, const fs::path& base, std::optional<std::uint64_t> seed) {
  ExperimentConfig c;
  Section top(root, "");
  c.seed = seed ? *seed : top.u64("seed", 0);
  if (seed) top.has("seed");
  c.output_dir = resolve(base, top.str("output_dir", "runs"));

  {
    auto s = top.sub("dataset");
    c.victim = parse_source(s.sub("victim"), derive_seed(c.seed, kVictimData), base);
    c.surrogate = parse_source(s.sub("surrogate"), derive_seed(c.seed, kSurrogateData), base);
    s.finish();
  }

  {
    auto s = top.sub("model");
    const auto shape = s.ints("input_shape");
    if (!shape.empty()) {
      for (auto d : shape) {
        if (d <= 0) s.fail("input_shape", "must hold positive sizes");
        c.model.input_shape.push_back(static_cast<std::size_t>(d));
      }
    } else if (c.victim.type == DatasetSource::Type::synthetic) {
      c.model.input_shape = {c.victim.channels, c.victim.size, c.victim.size};
    } else {
      s.fail("input_shape", "is required with png_dir datasets");
    }
    c.model.layers = parse_layers(s, "layers");
    c.model_seed = s.u64("seed", derive_seed(c.seed, kModel));
    if (s.has("checkpoint")) c.model_checkpoint = resolve(base, s.str("checkpoint", ""));
    if (c.model.layers.empty() && !c.model_checkpoint) s.fail("layers", "must list at least one layer");
    s.finish();
    if (!c.model.layers.empty()) validated("model", [&] { parameter_layout(c.model); });
  }

  {
    auto s = top.sub("client");
    c.client.algorithm = [&] {
      try {
        return parse_algorithm(s.str("algorithm", "fedsgd"));
      } catch (const Error& e) {
        s.fail("algorithm", e.what());
      }
    }();
    c.client.batch_size = s.size("batch_size", 4);
    c.client.local_epochs = s.size("local_epochs", 1);
    c.client.lr = s.number("lr", 0.01);
    c.client.shuffle_seed = s.u64("shuffle_seed", derive_seed(c.seed, kClient));
    c.client_size = s.size("client_size", 0);
    s.finish();
    validated("client", [&] { c.client.validate(); });
    if (c.client.algorithm == Algorithm::fedsgd && c.client_size && c.client_size != c.client.batch_size) {
      throw ConfigError("client.client_size must equal client.batch_size for FedSGD");
    }
  }

  {
    auto s = top.sub("attack");
    auto& a = c.attack;
    a.T = s.integer("T", 1000);
    validated("attack", [&] {
      a.grad_loss = parse_grad_loss(s.str("grad_loss", "squared_l2"));
      a.optimizer.kind = parse_optimizer(s.str("optimizer", "adam"));
      a.init = parse_init(s.str("init", "uniform01"));
      a.label_mode = parse_label_mode(s.str("label_mode", "known"));
    });
    a.tv_weight = s.number("tv_weight", 0.0);
    a.optimizer.lr = s.number("lr", a.optimizer.lr);
    a.optimizer.beta1 = s.number("beta1", a.optimizer.beta1);
    a.optimizer.beta2 = s.number("beta2", a.optimizer.beta2);
    a.optimizer.eps = s.number("eps", a.optimizer.eps);
    a.optimizer.cosine_decay = s.boolean("cosine_decay", a.optimizer.cosine_decay);
    a.optimizer.final_lr_fraction = s.number("final_lr_fraction", a.optimizer.final_lr_fraction);
    for (auto t : s.ints("s_iters")) a.s_iters.insert(static_cast<int>(t));
    a.seed = s.u64("seed", derive_seed(c.seed, kAttack));
    a.down_factor = s.size("down_factor", 1);
    a.protocol = c.client.algorithm;
    c.progress_every = s.size("progress_every", 10);
    if (c.progress_every == 0) s.fail("progress_every", "must be positive");
    s.finish();
    validated("attack", [&] { a.validate(); });
  }

  {
    auto s = top.sub("defense");
    c.defense.dp_sigma = s.number("dp_sigma", 0.0);
    if (s.has("qsgd_bits")) c.defense.qsgd_bits = s.integer("qsgd_bits", 0);
    if (s.has("topk_keep")) c.defense.topk_keep_fraction = s.number("topk_keep", 0.0);
    c.defense.seed = s.u64("seed", derive_seed(c.seed, kDefense));
    s.finish();
    validated("defense", [&] { c.defense.validate(); });
  }

  {
    auto s = top.sub("collect");
    c.collect.n_den = s.size("n_den", 100);
    c.collect.seed = s.u64("seed", derive_seed(c.seed, kCollect));
    c.collect.client_size = c.client_size;
    s.finish();
    if (c.collect.n_den == 0) throw ConfigError("collect.n_den must be positive");
  }

  {
    auto s = top.sub("denoiser");
    auto& d = c.denoiser;
    d.depth = s.size("depth", d.depth);
    d.width = s.size("width", d.width);
    d.residual = s.boolean("residual", d.residual);
    d.scale = s.size("scale", c.attack.down_factor);
    d.levels = s.size("levels", d.levels);
    auto& t = c.denoiser_train;
    t.epochs = s.size("epochs", t.epochs);
    t.batch_size = s.size("batch_size", t.batch_size);
    t.lr = s.number("lr", t.lr);
    t.beta1 = s.number("beta1", t.beta1);
    t.beta2 = s.number("beta2", t.beta2);
    t.eps = s.number("eps", t.eps);
    t.train_fraction = s.number("train_fraction", t.train_fraction);
    t.augment = s.boolean("augment", t.augment);
    t.seed = s.u64("seed", derive_seed(c.seed, kDenoiser));
    s.finish();
    validated("denoiser", [&] { d.validate(); });
    if (d.scale != c.attack.down_factor) {
      throw ConfigError("denoiser.scale (" + std::to_string(d.scale) +
                        ") must equal attack.down_factor (" + std::to_string(c.attack.down_factor) + ")");
    }
    if (t.epochs == 0 || t.batch_size == 0) throw ConfigError("denoiser epochs and batch_size must be positive");
  }

  {
    auto s = top.sub("guide");
    for (auto t : s.ints("d_iters")) c.d_iters.insert(static_cast<int>(t));
    if (c.d_iters.empty()) c.d_iters = {c.attack.T};
    if (s.has("stop_at")) c.stop_at = s.integer("stop_at", c.attack.T);
    if (s.has("denoisers")) {
      const auto& arr = s.raw("denoisers");
      if (!arr.is_array()) s.fail("denoisers", "must be an array of tables");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Section m(arr[i], "guide.denoisers[" + std::to_string(i) + "]");
        GuideMember g;
        const auto ck = m.str("checkpoint", "");
        if (!ck.empty()) g.checkpoint = resolve(base, ck);
        g.weight = m.number("weight", 1.0);
        m.finish();
        c.guide_members.push_back(g);
      }
    }
    if (c.guide_members.empty()) c.guide_members.push_back({});
    s.finish();
    double total = 0.0;
    for (const auto& g : c.guide_members) {
      if (!(g.weight >= 0.0)) throw ConfigError("guide denoiser weights must be non-negative");
      total += g.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("guide denoiser weights must sum to 1");
    for (int t : c.d_iters) {
      if (t < 1 || t > c.attack.T) throw ConfigError("guide.d_iters must lie in [1, attack.T]");
    }
    if (c.stop_at && (*c.stop_at < 1 || *c.stop_at > c.attack.T)) {
      throw ConfigError("guide.stop_at must lie in [1, attack.T]");
    }
    if (c.attack.down_factor > 1 && c.d_iters != std::set<int>{c.stop_at.value_or(c.attack.T)}) {
      throw ConfigError("with attack.down_factor > 1 the only denoising point is the last iteration");
    }
  }

  {
    auto s = top.sub("victims");
    c.victim_batches = s.size("batches", 30);
    c.victim_seed = s.u64("seed", derive_seed(c.seed, kVictims));
    s.finish();
    if (c.victim_batches == 0) throw ConfigError("victims.batches must be positive");
  }

  {
    auto s = top.sub("probe");
    c.probe.input_shape = c.model.input_shape;
    c.probe.layers = parse_layers(s, "layers");
    if (c.probe.layers.empty()) c.probe.layers = c.model.layers;
    c.probe_train.epochs = s.size("epochs", c.probe_train.epochs);
    c.probe_train.batch_size = s.size("batch_size", c.probe_train.batch_size);
    c.probe_train.lr = s.number("lr", c.probe_train.lr);
    c.probe_train.seed = s.u64("seed", derive_seed(c.seed, kProbe));
    if (s.has("checkpoint")) c.probe_checkpoint = resolve(base, s.str("checkpoint", ""));
    s.finish();
    if (!c.probe.layers.empty()) validated("probe", [&] { parameter_layout(c.probe); });
  }

  top.finish();
  return c;
}

}  // namespace

std::size_t ExperimentConfig::effective_client_size() const {
  return client_size ? client_size : client.batch_size;
}

ExperimentConfig parse_config(const std::string& toml_text, const fs::path& base_dir,
                              const std::vector<Override>& overrides,
                              std::optional<std::uint64_t> seed) {
  json root = parse_toml(toml_text, "config");
  for (const auto& o : overrides) apply_override(root, o);
  return build(root, base_dir, seed);
}

ExperimentConfig load_config(const fs::path& path, const std::vector<Override>& overrides,
                             std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json root = parse_toml(ss.str(), path.string());
  for (const auto& o : overrides) apply_override(root, o);
  return build(root, path.parent_path().empty() ? fs::path(".") : path.parent_path(), seed);
}

}  // namespace gilab::cli
