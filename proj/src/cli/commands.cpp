#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "gilab/cli.hpp"
#include "gilab/digest.hpp"
#include "gilab/rng.hpp"

namespace gilab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string short_digest(const json& j) { return sha256_hex(j.dump()).substr(0, 16); }

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str()).substr(0, 16);
}

std::string batch_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "batch_%04zu", i);
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Runs body(i) for i in [0, n) on up to `threads` workers; the first failure
// by index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".gilab.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw Error("output directory " + dir.string() + " is locked by another gilab command (" +
                  path_.string() + "); remove the lock file if no command is running");
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto w = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

fs::path quarantine_target(const fs::path& out, const std::string& name) {
  const auto q = out / "quarantine";
  fs::create_directories(q);
  for (int k = 0;; ++k) {
    auto p = q / (name + "-" + std::to_string(k));
    if (!fs::exists(p)) return p;
  }
}

// Work happens in <out>/<command>.partial; commit() swaps it into place.
// An uncommitted partial directory is moved to <out>/quarantine/.
class StageRun {
 public:
  StageRun(fs::path out, std::string command, std::string digest, std::ostream& log)
      : out_(std::move(out)),
        command_(std::move(command)),
        digest_(std::move(digest)),
        final_(out_ / command_),
        work_(out_ / (command_ + ".partial")),
        log_(log) {}

  bool up_to_date() const {
    const auto m = final_ / "run-manifest.json";
    if (!fs::exists(m)) return false;
    try {
      const auto j = read_json(m);
      return j.value("config_digest", "") == digest_ && j.value("status", "") == "complete";
    } catch (const Error&) {
      return false;
    }
  }

  const fs::path& begin() {
    if (fs::exists(work_)) {
      const auto q = quarantine_target(out_, command_ + "-stale");
      fs::rename(work_, q);
      log_ << "moved leftover partial output to " << q.string() << "\n";
    }
    fs::create_directories(work_);
    begun_ = true;
    return work_;
  }

  void commit(json manifest) {
    manifest["status"] = "complete";
    write_json(work_ / "run-manifest.json", manifest);
    if (fs::exists(final_)) fs::remove_all(final_);
    fs::rename(work_, final_);
    committed_ = true;
  }

  ~StageRun() {
    if (!begun_ || committed_) return;
    std::error_code ec;
    if (!fs::exists(work_, ec)) return;
    const auto q = quarantine_target(out_, command_ + "-" + digest_);
    fs::rename(work_, q, ec);
    if (!ec) log_ << "partial output quarantined in " << q.string() << "\n";
  }

 private:
  fs::path out_;
  std::string command_;
  std::string digest_;
  fs::path final_;
  fs::path work_;
  std::ostream& log_;
  bool begun_ = false;
  bool committed_ = false;
};

struct Context {
  ExperimentConfig cfg;
  std::size_t threads = 1;
  std::ostream& log;
  LoadedDataset victim;
  LoadedDataset surrogate;
  std::string model_digest;
  Model model;

  Context(ExperimentConfig c, std::size_t t, std::ostream& l)
      : cfg(std::move(c)),
        threads(t),
        log(l),
        victim(load_dataset(cfg.victim)),
        surrogate(load_dataset(cfg.surrogate)),
        model_digest(),
        model(load_global_model()) {
    check_disjoint(victim.manifest, surrogate.manifest);
    if (victim.manifest.image_shape != surrogate.manifest.image_shape) {
      throw ConfigError("victim images are " + to_string(victim.manifest.image_shape) +
                        " but surrogate images are " + to_string(surrogate.manifest.image_shape));
    }
    if (model.spec().input_shape != victim.manifest.image_shape) {
      throw ConfigError("model input shape " + to_string(model.spec().input_shape) +
                        " does not match the dataset image shape " +
                        to_string(victim.manifest.image_shape));
    }
    if (model.num_outputs() < victim.manifest.class_names.size()) {
      throw ConfigError("model has " + std::to_string(model.num_outputs()) + " outputs for " +
                        std::to_string(victim.manifest.class_names.size()) + " classes");
    }
  }

  Model load_global_model() {
    if (cfg.model_checkpoint) {
      model_digest = file_digest(*cfg.model_checkpoint);
      return load_model(*cfg.model_checkpoint);
    }
    model_digest = short_digest({{"spec", cfg.model.to_json()}, {"seed", cfg.model_seed}});
    return Model::init(cfg.model, cfg.model_seed);
  }

  const fs::path& out() const { return cfg.output_dir; }
};

// Identity of each stage's inputs; the stage digest is its hash.
json probe_inputs(const Context& c) {
  auto spec = c.cfg.probe;
  spec.input_shape = c.surrogate.manifest.image_shape;
  return {{"probe", spec.to_json()},
          {"epochs", c.cfg.probe_train.epochs},
          {"batch_size", c.cfg.probe_train.batch_size},
          {"lr", c.cfg.probe_train.lr},
          {"seed", c.cfg.probe_train.seed},
          {"surrogate", c.surrogate.manifest.digest()}};
}

json collect_inputs(const Context& c) {
  return {{"model", c.model_digest},
          {"surrogate", c.surrogate.manifest.digest()},
          {"client", c.cfg.client.to_json()},
          {"client_size", c.cfg.effective_client_size()},
          {"attack", c.cfg.attack.to_json()},
          {"defense", c.cfg.defense.to_json()},
          {"n_den", c.cfg.collect.n_den},
          {"seed", c.cfg.collect.seed}};
}

json denoiser_inputs(const Context& c) {
  return {{"collect", short_digest(collect_inputs(c))},
          {"denoiser", c.cfg.denoiser.to_json()},
          {"train", c.cfg.denoiser_train.to_json()}};
}

json attack_inputs(const Context& c) {
  return {{"model", c.model_digest},
          {"victim", c.victim.manifest.digest()},
          {"client", c.cfg.client.to_json()},
          {"client_size", c.cfg.effective_client_size()},
          {"attack", c.cfg.attack.to_json()},
          {"defense", c.cfg.defense.to_json()},
          {"batches", c.cfg.victim_batches},
          {"seed", c.cfg.victim_seed}};
}

std::string member_source_digest(const Context& c, const GuideMember& m) {
  return m.checkpoint.empty() ? short_digest(denoiser_inputs(c)) : file_digest(m.checkpoint);
}

json guide_inputs(const Context& c) {
  json members = json::array();
  for (const auto& m : c.cfg.guide_members) {
    members.push_back({{"denoiser", member_source_digest(c, m)}, {"weight", m.weight}});
  }
  return {{"attack", short_digest(attack_inputs(c))},
          {"d_iters", c.cfg.d_iters},
          {"stop_at", c.cfg.stop_at ? json(*c.cfg.stop_at) : json(nullptr)},
          {"denoisers", members}};
}

json manifest_for(const Context& c, const std::string& command, const json& inputs) {
  return {{"command", command},
          {"version", kVersion},
          {"config_digest", short_digest(inputs)},
          {"inputs", inputs},
          {"seeds",
           {{"master", c.cfg.seed},
            {"model", c.cfg.model_seed},
            {"attack", c.cfg.attack.seed},
            {"defense", c.cfg.defense.seed},
            {"collect", c.cfg.collect.seed},
            {"denoiser", c.cfg.denoiser_train.seed},
            {"victims", c.cfg.victim_seed},
            {"probe", c.cfg.probe_train.seed}}},
          {"threads", c.threads}};
}

// Manifest of a finished upstream stage whose digest must be `expected`.
json require_stage(const Context& c, const std::string& command, const std::string& expected) {
  const auto m = c.out() / command / "run-manifest.json";
  if (!fs::exists(m)) {
    throw Error("no " + command + " output in " + c.out().string() + "; run `gilab " + command +
                "` with this config first");
  }
  const auto j = read_json(m);
  const auto got = j.value("config_digest", std::string("?"));
  if (got != expected || j.value("status", "") != "complete") {
    throw DigestMismatch(command + " output in " + (c.out() / command).string() +
                         " was produced by config digest " + got +
                         ", but the current config expects " + expected + "; rerun `gilab " +
                         command + "` or restore the config it was made with");
  }
  return j;
}

std::span<const int> known_labels(const AttackConfig& a, const Dataset& d) {
  return a.label_mode == LabelMode::known ? std::span<const int>(d.labels) : std::span<const int>();
}

double matched_psnr(const Tensor& x_hat, const Tensor& truth) {
  const auto assign = match_assignment(x_hat, truth);
  double total = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i) total += psnr(x_hat.row(i), truth.row(assign[i]));
  return total / static_cast<double>(assign.size());
}

SimulatedClient victim_client(const Context& c, std::size_t batch) {
  return simulate_client(c.model, c.victim.data, c.cfg.attack, c.cfg.client, c.cfg.defense,
                         c.cfg.effective_client_size(), collect_batch_seeds(c.cfg.victim_seed, batch));
}

void save_batch(const fs::path& path, const std::string& digest, std::size_t batch,
                const SimulatedClient& sim, TensorMap tensors, json extra) {
  extra["config_digest"] = digest;
  extra["batch"] = batch;
  extra["labels"] = sim.data.labels;
  tensors.push_back({"truth", sim.data.images});
  save_checkpoint(path, {extra, std::move(tensors)});
}

int cmd_train_probe(Context& c) {
  const auto inputs = probe_inputs(c);
  StageRun run(c.out(), "train-probe", short_digest(inputs), c.log);
  if (run.up_to_date()) {
    c.log << "train-probe: up to date (" << short_digest(inputs) << ")\n";
    return 0;
  }
  if (c.cfg.probe.layers.empty()) throw ConfigError("probe.layers is empty");
  const auto& dir = run.begin();
  auto spec = c.cfg.probe;
  spec.input_shape = c.surrogate.manifest.image_shape;
  const auto probe = train_probe(spec, c.surrogate.data, c.cfg.probe_train);
  save_model(dir / "probe.bin", probe, {{"config_digest", short_digest(inputs)}});
  auto manifest = manifest_for(c, "train-probe", inputs);
  manifest["train_accuracy"] = accuracy(probe, c.surrogate.data);
  manifest["victim_accuracy"] = accuracy(probe, c.victim.data);
  write_json(dir / "surrogate-manifest.json", c.surrogate.manifest.to_json());
  run.commit(manifest);
  c.log << "train-probe: surrogate accuracy " << manifest["train_accuracy"].get<double>() << "\n";
  return 0;
}

int cmd_collect(Context& c) {
  const auto inputs = collect_inputs(c);
  const auto digest = short_digest(inputs);
  StageRun run(c.out(), "collect", digest, c.log);
  if (run.up_to_date()) {
    c.log << "collect: up to date (" << digest << ")\n";
    return 0;
  }
  const auto& dir = run.begin();
  auto cc = c.cfg.collect;
  cc.threads = c.threads;
  const auto pairs = collect_pairs(c.model, c.surrogate.data, c.cfg.attack, c.cfg.client,
                                   c.cfg.defense, cc);
  write_pairset(dir / "pairs", pairs);
  // Digest of what downstream stages will read back (16-bit PNG quantized).
  const auto stored = read_pairset(dir / "pairs");
  write_json(dir / "surrogate-manifest.json", c.surrogate.manifest.to_json());
  write_json(dir / "victim-manifest.json", c.victim.manifest.to_json());
  auto manifest = manifest_for(c, "collect", inputs);
  manifest["pairs"] = stored.pairs.size();
  manifest["pairset_digest"] = stored.digest();
  manifest["attack_digest"] = pairs.attack_digest;
  manifest["defense_digest"] = pairs.defense_digest;
  run.commit(manifest);
  c.log << "collect: " << stored.pairs.size() << " pairs\n";
  return 0;
}

int cmd_train_denoiser(Context& c) {
  const auto inputs = denoiser_inputs(c);
  const auto digest = short_digest(inputs);
  StageRun run(c.out(), "train-denoiser", digest, c.log);
  if (run.up_to_date()) {
    c.log << "train-denoiser: up to date (" << digest << ")\n";
    return 0;
  }
  const auto upstream = require_stage(c, "collect", inputs.at("collect").get<std::string>());
  const auto pairs = read_pairset(c.out() / "collect" / "pairs");
  if (pairs.digest() != upstream.value("pairset_digest", "")) {
    throw DigestMismatch("pair shards in " + (c.out() / "collect" / "pairs").string() +
                         " do not match the digest recorded by collect; rerun `gilab collect`");
  }
  const auto& dir = run.begin();
  const auto td = [&] {
    try {
      return train_denoiser(pairs, c.cfg.denoiser, c.cfg.denoiser_train);
    } catch (const DenoiserDivergence& e) {
      save_denoiser(dir / "denoiser.last_good.bin", e.last_good());
      throw;
    }
  }();
  save_denoiser(dir / "denoiser.bin", td.denoiser);
  const auto& r = td.report;
  json report = {{"train_pairs", r.train_indices.size()},
                 {"test_pairs", r.test_indices.size()},
                 {"epoch_loss", r.epoch_loss},
                 {"test_psnr_before", r.psnr_before},
                 {"test_psnr_after", r.psnr_after},
                 {"test_mae_before", r.mae_before},
                 {"test_mae_after", r.mae_after}};
  write_json(dir / "report.json", report);
  auto manifest = manifest_for(c, "train-denoiser", inputs);
  manifest["report"] = report;
  manifest["denoiser_file_digest"] = file_digest(dir / "denoiser.bin");
  run.commit(manifest);
  c.log << "train-denoiser: test PSNR " << r.psnr_before << " -> " << r.psnr_after << " dB\n";
  return 0;
}

int cmd_attack(Context& c) {
  const auto inputs = attack_inputs(c);
  const auto digest = short_digest(inputs);
  StageRun run(c.out(), "attack", digest, c.log);
  if (run.up_to_date()) {
    c.log << "attack: up to date (" << digest << ")\n";
    return 0;
  }
  const auto& dir = run.begin();
  fs::create_directories(dir / "progress");
  std::vector<double> final_psnr(c.cfg.victim_batches);
  parallel_for(c.cfg.victim_batches, c.threads, [&](std::size_t b) {
    const auto sim = victim_client(c, b);
    std::ofstream progress(dir / "progress" / (batch_name(b) + ".jsonl"));
    AttackHooks hooks;
    hooks.progress = [&](const ReconstructionState& s) {
      if (s.iteration % static_cast<int>(c.cfg.progress_every) != 0 && s.iteration != sim.attack.T) return;
      const json line = {{"iteration", s.iteration},
                         {"loss", s.last_loss},
                         {"psnr_if_truth_known", matched_psnr(attack_images(s, sim.attack), sim.data.images)}};
      progress << line.dump() << "\n";
    };
    const auto state = run_attack(sim.update, c.model, sim.attack, known_labels(sim.attack, sim.data), hooks);
    const auto x_hat = attack_images(state, sim.attack);
    final_psnr[b] = matched_psnr(x_hat, sim.data.images);
    save_batch(dir / (batch_name(b) + ".bin"), digest, b, sim, {{"reconstruction", x_hat}},
               {{"method", "attack"}, {"final_loss", state.last_loss}});
  });
  write_json(dir / "victim-manifest.json", c.victim.manifest.to_json());
  auto manifest = manifest_for(c, "attack", inputs);
  manifest["batches"] = c.cfg.victim_batches;
  manifest["mean_psnr"] = summarize(final_psnr).mean;
  run.commit(manifest);
  c.log << "attack: " << c.cfg.victim_batches << " batches, mean matched PSNR "
        << manifest["mean_psnr"].get<double>() << " dB\n";
  return 0;
}

int cmd_guide(Context& c) {
  const auto inputs = guide_inputs(c);
  const auto digest = short_digest(inputs);
  StageRun run(c.out(), "guide", digest, c.log);
  if (run.up_to_date()) {
    c.log << "guide: up to date (" << digest << ")\n";
    return 0;
  }
  std::vector<Denoiser> dens;
  for (const auto& m : c.cfg.guide_members) {
    if (m.checkpoint.empty()) {
      require_stage(c, "train-denoiser", short_digest(denoiser_inputs(c)));
      dens.push_back(load_denoiser(c.out() / "train-denoiser" / "denoiser.bin"));
    } else {
      dens.push_back(load_denoiser(m.checkpoint));
    }
  }
  std::vector<std::string> warnings;
  GuideConfig gc{c.cfg.d_iters, {}, c.cfg.stop_at};
  for (std::size_t k = 0; k < dens.size(); ++k) {
    gc.denoisers.push_back({&dens[k], c.cfg.guide_members[k].weight});
    if (dens[k].defense_digest != c.cfg.defense.digest()) {
      warnings.push_back("denoiser " + std::to_string(k) + " was trained under defense " +
                         dens[k].defense_digest + ", this run uses " + c.cfg.defense.digest());
    }
  }
  try {
    gc.validate(c.cfg.attack);
  } catch (const Error& e) {
    throw ConfigError(std::string("guide config: ") + e.what());
  }
  for (const auto& w : warnings) c.log << "guide: warning: " << w << "\n";

  const auto& dir = run.begin();
  std::vector<double> plain_psnr(c.cfg.victim_batches), final_psnr(c.cfg.victim_batches);
  std::mutex warn_mu;
  parallel_for(c.cfg.victim_batches, c.threads, [&](std::size_t b) {
    const auto sim = victim_client(c, b);
    const auto res = guide_reconstruct(sim.update, c.model, sim.attack, gc, known_labels(sim.attack, sim.data));
    plain_psnr[b] = matched_psnr(res.plain.shape() == sim.data.images.shape()
                                     ? res.plain
                                     : ag::kernels::upsample_nearest(res.plain, sim.attack.down_factor),
                                 sim.data.images);
    final_psnr[b] = matched_psnr(res.final, sim.data.images);
    if (b == 0 && !res.warnings.empty()) {
      std::lock_guard lock(warn_mu);
      warnings.insert(warnings.end(), res.warnings.begin(), res.warnings.end());
    }
    save_batch(dir / (batch_name(b) + ".bin"), digest, b, sim,
               {{"reconstruction", res.final}, {"plain", res.plain}},
               {{"method", "guide"}, {"final_loss", res.state.last_loss}});
  });
  auto manifest = manifest_for(c, "guide", inputs);
  manifest["batches"] = c.cfg.victim_batches;
  manifest["mean_psnr_before_denoising"] = summarize(plain_psnr).mean;
  manifest["mean_psnr"] = summarize(final_psnr).mean;
  manifest["warnings"] = warnings;
  run.commit(manifest);
  c.log << "guide: " << c.cfg.victim_batches << " batches, mean matched PSNR "
        << manifest["mean_psnr_before_denoising"].get<double>() << " -> "
        << manifest["mean_psnr"].get<double>() << " dB\n";
  return 0;
}

struct MethodRows {
  std::string method;
  std::vector<MetricReport> batches;
};

json summary_json(const MethodRows& m) {
  std::vector<double> mse, ps, ss, px;
  for (const auto& r : m.batches)
    for (const auto& p : r.per_image) {
      mse.push_back(p.mse);
      ps.push_back(p.psnr);
      ss.push_back(p.ssim);
      if (p.proxy_dist) px.push_back(*p.proxy_dist);
    }
  auto s = [](const std::vector<double>& v) {
    const auto x = summarize(v);
    return json{{"mean", x.mean}, {"stddev", x.stddev}};
  };
  json j = {{"batches", m.batches.size()}, {"images", mse.size()},
            {"mse", s(mse)},               {"psnr", s(ps)},
            {"ssim", s(ss)}};
  if (!px.empty()) j["proxy_dist"] = s(px);
  return j;
}

int cmd_report(Context& c) {
  const auto attack_digest = short_digest(attack_inputs(c));
  const auto guide_digest = short_digest(guide_inputs(c));
  const bool has_attack = fs::exists(c.out() / "attack" / "run-manifest.json");
  const bool has_guide = fs::exists(c.out() / "guide" / "run-manifest.json");
  if (!has_attack && !has_guide) {
    throw Error("nothing to report in " + c.out().string() + "; run `gilab attack` or `gilab guide` first");
  }
  if (has_attack) require_stage(c, "attack", attack_digest);
  if (has_guide) require_stage(c, "guide", guide_digest);

  std::optional<Model> probe;
  json probe_source = nullptr;
  if (c.cfg.probe_checkpoint) {
    probe = load_model(*c.cfg.probe_checkpoint);
    probe_source = file_digest(*c.cfg.probe_checkpoint);
  } else if (fs::exists(c.out() / "train-probe" / "run-manifest.json")) {
    const auto d = short_digest(probe_inputs(c));
    require_stage(c, "train-probe", d);
    probe = load_model(c.out() / "train-probe" / "probe.bin");
    probe_source = d;
  } else {
    c.log << "report: no probe found; proxy_dist left empty\n";
  }

  const json inputs = {{"attack", has_attack ? json(attack_digest) : json(nullptr)},
                       {"guide", has_guide ? json(guide_digest) : json(nullptr)},
                       {"probe", probe_source}};
  const auto digest = short_digest(inputs);
  StageRun run(c.out(), "report", digest, c.log);
  if (run.up_to_date()) {
    c.log << "report: up to date (" << digest << ")\n";
    return 0;
  }

  std::vector<MethodRows> methods;
  for (const auto& [name, present, expect] :
       {std::tuple{"attack", has_attack, attack_digest}, std::tuple{"guide", has_guide, guide_digest}}) {
    if (!present) continue;
    MethodRows m{name, std::vector<MetricReport>(c.cfg.victim_batches)};
    const auto dir = c.out() / name;
    parallel_for(c.cfg.victim_batches, c.threads, [&](std::size_t b) {
      const auto path = dir / (batch_name(b) + ".bin");
      if (!fs::exists(path)) throw Error("missing " + path.string());
      const auto ck = load_checkpoint(path);
      if (ck.header.value("config_digest", "") != expect) {
        throw DigestMismatch(path.string() + " carries config digest " +
                             ck.header.value("config_digest", std::string("?")) + ", expected " + expect);
      }
      m.batches[b] = match_reconstructions(lookup(ck.tensors, "reconstruction"),
                                           lookup(ck.tensors, "truth"), probe ? &*probe : nullptr);
    });
    methods.push_back(std::move(m));
  }

  const auto& dir = run.begin();
  std::string csv = "method,batch,recon_index,truth_index,mse,psnr,ssim,proxy_dist\n";
  for (const auto& m : methods)
    for (std::size_t b = 0; b < m.batches.size(); ++b)
      for (const auto& p : m.batches[b].per_image) {
        csv += m.method + "," + std::to_string(b) + "," + std::to_string(p.recon_index) + "," +
               std::to_string(p.truth_index) + "," + fmt(p.mse) + "," + fmt(p.psnr) + "," +
               fmt(p.ssim) + "," + (p.proxy_dist ? fmt(*p.proxy_dist) : "") + "\n";
      }
  write_text(dir / "metrics.csv", csv);

  json summary = {{"config_digest", digest}, {"inputs", inputs}, {"methods", json::object()}};
  for (const auto& m : methods) summary["methods"][m.method] = summary_json(m);
  if (methods.size() == 2) {
    // Per-batch means, guide against the plain attack on the same batches.
    std::vector<double> ap, gp, ax, gx;
    for (std::size_t b = 0; b < c.cfg.victim_batches; ++b) {
      ap.push_back(methods[0].batches[b].psnr().mean);
      gp.push_back(methods[1].batches[b].psnr().mean);
      if (probe) {
        ax.push_back(methods[0].batches[b].proxy()->mean);
        gx.push_back(methods[1].batches[b].proxy()->mean);
      }
    }
    auto st = [](const SignTest& t) {
      return json{{"wins", t.wins}, {"losses", t.losses}, {"ties", t.ties}, {"p_value", t.p_value}};
    };
    summary["guide_vs_attack"]["psnr"] = st(sign_test(gp, ap));
    if (probe) summary["guide_vs_attack"]["proxy_dist"] = st(sign_test(ax, gx));
  }
  write_json(dir / "summary.json", summary);
  auto manifest = manifest_for(c, "report", inputs);
  manifest["rows"] = std::count(csv.begin(), csv.end(), '\n') - 1;
  run.commit(manifest);
  for (const auto& m : methods) {
    c.log << "report: " << m.method << " mean PSNR "
          << summary["methods"][m.method]["psnr"]["mean"].get<double>() << " dB\n";
  }
  return 0;
}

}  // namespace

int run_command(const std::string& command, const RunOptions& opts, std::ostream& log) {
  try {
    if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
      throw ConfigError("unknown command '" + command + "'");
    }
    if (opts.threads == 0) throw ConfigError("--threads must be at least 1");
    auto cfg = load_config(opts.config, opts.overrides, opts.seed);
    fs::create_directories(cfg.output_dir);
    OutputLock lock(cfg.output_dir);
    Context ctx(std::move(cfg), opts.threads, log);
    if (command == "train-probe") return cmd_train_probe(ctx);
    if (command == "collect") return cmd_collect(ctx);
    if (command == "train-denoiser") return cmd_train_denoiser(ctx);
    if (command == "attack") return cmd_attack(ctx);
    if (command == "guide") return cmd_guide(ctx);
    return cmd_report(ctx);
  } catch (const ConfigError& e) {
    log << "gilab " << command << ": config error: " << e.what() << "\n";
    return 2;
  } catch (const DigestMismatch& e) {
    log << "gilab " << command << ": digest mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    log << "gilab " << command << ": error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace gilab::cli
