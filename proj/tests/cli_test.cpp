#include <unistd.h>

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "gilab/cli.hpp"
#include "gilab/png.hpp"

using namespace gilab;
using namespace gilab::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("gilab_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kTinyConfig = R"(
seed = 11
output_dir = "out"

[model]
layers = ["flatten", "dense:8", "relu", "dense:4"]

[dataset.victim]
n = 16
size = 12
channels = 1

[dataset.surrogate]
n = 24
size = 12
channels = 1

[client]
batch_size = 2

[attack]
T = 12
s_iters = [6, 12]

[collect]
n_den = 12

[denoiser]
depth = 2
width = 2
epochs = 1
batch_size = 4

[victims]
batches = 2

[probe]
epochs = 2
)";

fs::path write_config(const fs::path& dir, const std::string& text) {
  const auto p = dir / "exp.toml";
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& cmd, const fs::path& cfg, std::vector<Override> ov = {},
        std::size_t threads = 1, std::string* log_out = nullptr) {
  std::ostringstream log;
  RunOptions o;
  o.config = cfg;
  o.threads = threads;
  o.overrides = std::move(ov);
  const int code = run_command(cmd, o, log);
  if (log_out) *log_out = log.str();
  return code;
}

}  // namespace

TEST_CASE("config: defaults, derived seeds, overrides") {
  const auto c = parse_config(kTinyConfig, "/base");
  CHECK(c.output_dir == fs::path("/base/out"));
  CHECK(c.model.input_shape == Shape{1, 12, 12});
  CHECK(c.attack.T == 12);
  CHECK(c.attack.protocol == Algorithm::fedsgd);
  CHECK(c.d_iters == std::set<int>{12});
  CHECK(c.guide_members.size() == 1);
  CHECK(c.guide_members[0].checkpoint.empty());
  CHECK(c.denoiser.scale == 1);
  CHECK(c.effective_client_size() == 2);
  CHECK(c.probe.layers == c.model.layers);
  CHECK(c.victim.seed != c.surrogate.seed);

  const auto o = parse_config(kTinyConfig, "/base",
                              {{"attack.T", "30"}, {"attack.tv_weight", "0.5"},
                               {"attack.grad_loss", "negative_cosine"}, {"defense.topk_keep", "0.1"},
                               {"dataset.victim.n", "9"}});
  CHECK(o.attack.T == 30);
  CHECK(o.attack.tv_weight == 0.5);
  CHECK(o.attack.grad_loss == GradLoss::negative_cosine);
  CHECK(o.defense.topk_keep_fraction == 0.1);
  CHECK(o.victim.n == 9);
  const auto d = parse_config(kTinyConfig, "/b", {{"denoiser.levels", "1"}, {"denoiser.depth", "4"}, {"denoiser.augment", "true"}});
  CHECK(d.denoiser.levels == 1);
  CHECK(d.denoiser_train.augment);
  // Integer literal accepted for a float field.
  CHECK(parse_config(kTinyConfig, "/b", {{"attack.lr", "1"}}).attack.optimizer.lr == 1.0);

  const auto s1 = parse_config(kTinyConfig, "/b", {}, 99);
  const auto s2 = parse_config(kTinyConfig, "/b", {}, 99);
  CHECK(s1.seed == 99);
  CHECK(s1.attack.seed == s2.attack.seed);
  CHECK(s1.attack.seed != c.attack.seed);
  // Explicit section seeds win over the master seed.
  CHECK(parse_config(kTinyConfig, "/b", {{"attack.seed", "5"}}, 99).attack.seed == 5);
}

TEST_CASE("config: errors are ConfigError") {
  CHECK_THROWS_AS(parse_config("seed = [", "/b"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(kTinyConfig, "/b", {{"attack.tvweight", "1"}}),
                       doctest::Contains("attack.tvweight"), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"attack.T", "-3"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"attack.T", "\"ten\""}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"client.algorithm", "fedprox"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"defense.qsgd_bits", "3"}, {"defense.topk_keep", "0.1"}}),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"denoiser.scale", "2"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"denoiser.levels", "9"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"guide.d_iters", "[0]"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"dataset.victim.source", "web"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(kTinyConfig, "/b", {{"model.layers", "[\"dense:0\"]"}}), ConfigError);
  std::string two = kTinyConfig;
  two += "[[guide.denoisers]]\nweight = 0.5\n[[guide.denoisers]]\nweight = 0.4\n";
  CHECK_THROWS_WITH_AS(parse_config(two, "/b"), doctest::Contains("sum to 1"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/exp.toml"), ConfigError);
}

TEST_CASE("synthetic generator") {
  DatasetSource s;
  s.n = 30;
  s.size = 16;
  s.seed = 7;
  const auto a = load_dataset(s);
  const auto b = load_dataset(s);
  CHECK(a.manifest.digest() == b.manifest.digest());
  CHECK(a.data.images == b.data.images);
  CHECK(a.data.images.shape() == Shape{30, 3, 16, 16});
  CHECK(a.manifest.image_shape == Shape{3, 16, 16});
  for (std::size_t i = 0; i < 30; ++i) CHECK(a.data.labels[i] == static_cast<int>(i % 4));
  for (double v : a.data.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  s.seed = 8;
  const auto c = load_dataset(s);
  CHECK(c.manifest.digest() != a.manifest.digest());
  CHECK_NOTHROW(check_disjoint(a.manifest, c.manifest));
  CHECK_THROWS_AS(check_disjoint(a.manifest, b.manifest), ConfigError);

  // Same seed and label, different texture statistics.
  const auto shapes = synthetic_image(SyntheticKind::shapes, 16, 3, 2, 1);
  const auto textures = synthetic_image(SyntheticKind::textures, 16, 3, 2, 1);
  CHECK(shapes != textures);
  // Texture backgrounds vary more between horizontal neighbours.
  auto roughness = [](const Tensor& t) {
    double r = 0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) r += std::abs(t[i + 1] - t[i]);
    return r;
  };
  double rs = 0, rt = 0;
  for (int k = 0; k < 20; ++k) {
    rs += roughness(synthetic_image(SyntheticKind::shapes, 16, 1, k % 4, k));
    rt += roughness(synthetic_image(SyntheticKind::textures, 16, 1, k % 4, k));
  }
  CHECK(rt > 1.5 * rs);

  s.classes = 7;
  CHECK_THROWS_AS(load_dataset(s), ConfigError);
  CHECK(synthetic_image(SyntheticKind::shapes, 12, 1, 0, 3).shape() == Shape{1, 12, 12});
}

TEST_CASE("png_dir datasets") {
  TempDir tmp("png");
  DatasetSource src;
  src.type = DatasetSource::Type::png_dir;
  src.path = tmp.path / "data";

  CHECK_THROWS_AS(load_dataset(src), ConfigError);
  fs::create_directories(src.path / "b_class");
  fs::create_directories(src.path / "a_class");
  CHECK_THROWS_WITH_AS(load_dataset(src), doctest::Contains("no PNG images"), ConfigError);

  std::vector<Tensor> written;
  for (int i = 0; i < 4; ++i) {
    written.push_back(synthetic_image(SyntheticKind::shapes, 12, 3, i % 2, 100 + i));
    write_png(src.path / (i % 2 ? "b_class" : "a_class") / ("img" + std::to_string(i) + ".png"),
              written.back(), 8);
  }
  const auto d = load_dataset(src);
  CHECK(d.manifest.class_names == std::vector<std::string>{"a_class", "b_class"});
  CHECK(d.data.labels == std::vector<int>{0, 0, 1, 1});
  // Sorted order: img0, img2 (class a), img1, img3 (class b).
  const std::size_t order[] = {0, 2, 1, 3};
  for (std::size_t k = 0; k < 4; ++k) {
    const auto got = d.data.images.row(k);
    const auto& want = written[order[k]];
    double worst = 0;
    for (std::size_t j = 0; j < got.size(); ++j) worst = std::max(worst, std::abs(got[j] - want[j]));
    CHECK(worst <= 0.5 / 255.0 + 1e-12);
  }
  CHECK(d.manifest.entries[0].source.find("img0.png") != std::string::npos);

  write_png(src.path / "b_class" / "odd.png", synthetic_image(SyntheticKind::shapes, 14, 3, 0, 9), 8);
  CHECK_THROWS_WITH_AS(load_dataset(src), doctest::Contains("odd.png"), ConfigError);
  fs::remove(src.path / "b_class" / "odd.png");

  std::ofstream(src.path / "a_class" / "broken.png") << "junk";
  CHECK_THROWS_WITH_AS(load_dataset(src), doctest::Contains("broken.png"), Error);
  fs::remove(src.path / "a_class" / "broken.png");

  // An exact copy in the other class is a duplicate.
  fs::copy_file(src.path / "a_class" / "img0.png", src.path / "b_class" / "copy.png");
  CHECK_THROWS_WITH_AS(load_dataset(src), doctest::Contains("duplicate"), ConfigError);
}

TEST_CASE("commands: pipeline, accounting, idempotence") {
  TempDir tmp("pipe");
  const auto cfg = write_config(tmp.path, kTinyConfig);
  const auto out = tmp.path / "out";

  SUBCASE("attack then report gives B rows per batch") {
    REQUIRE(run("attack", cfg) == 0);
    REQUIRE(run("report", cfg) == 0);
    const auto csv = slurp(out / "report" / "metrics.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2);
    CHECK(csv.rfind("method,batch,recon_index,truth_index,mse,psnr,ssim,proxy_dist\n", 0) == 0);
    const auto manifest = nlohmann::json::parse(slurp(out / "attack" / "run-manifest.json"));
    CHECK(manifest["command"] == "attack");
    CHECK(manifest["version"] == kVersion);
    CHECK(manifest["config_digest"].get<std::string>().size() == 16);
    CHECK(manifest["seeds"]["master"] == 11);
    // Progress log: one line per 10 iterations plus the last.
    std::ifstream prog(out / "attack" / "progress" / "batch_0000.jsonl");
    std::vector<nlohmann::json> lines;
    for (std::string l; std::getline(prog, l);) lines.push_back(nlohmann::json::parse(l));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0]["iteration"] == 10);
    CHECK(lines[1]["iteration"] == 12);
    CHECK(lines[1].contains("psnr_if_truth_known"));
    const auto ck = load_checkpoint(out / "attack" / "batch_0001.bin");
    CHECK(ck.header["config_digest"] == manifest["config_digest"]);
    CHECK(lookup(ck.tensors, "reconstruction").shape() == Shape{2, 1, 12, 12});
  }

  SUBCASE("full chain, idempotent rerun, digest refusal") {
    REQUIRE(run("train-probe", cfg) == 0);
    REQUIRE(run("collect", cfg) == 0);
    const auto count_files = [&] {
      std::size_t n = 0;
      for (const auto& e : fs::directory_iterator(out / "collect" / "pairs")) n += e.is_regular_file();
      return n;
    };
    const auto files = count_files();
    CHECK(files == 12 * 3 + 1);
    const auto stamp = fs::last_write_time(out / "collect" / "run-manifest.json");
    std::string log;
    REQUIRE(run("collect", cfg, {}, 1, &log) == 0);
    CHECK(log.find("up to date") != std::string::npos);
    CHECK(count_files() == files);
    CHECK(fs::last_write_time(out / "collect" / "run-manifest.json") == stamp);

    REQUIRE(run("train-denoiser", cfg) == 0);
    REQUIRE(run("attack", cfg) == 0);
    REQUIRE(run("guide", cfg) == 0);
    REQUIRE(run("report", cfg) == 0);
    const auto summary = nlohmann::json::parse(slurp(out / "report" / "summary.json"));
    CHECK(summary["methods"].contains("attack"));
    CHECK(summary["methods"].contains("guide"));
    CHECK(summary["guide_vs_attack"]["psnr"].contains("p_value"));
    CHECK(summary["methods"]["guide"].contains("proxy_dist"));

    // Guide with only the final denoising point starts from the same attack.
    for (int b = 0; b < 2; ++b) {
      const auto name = "batch_000" + std::to_string(b) + ".bin";
      const auto a = load_checkpoint(out / "attack" / name);
      const auto g = load_checkpoint(out / "guide" / name);
      CHECK(lookup(a.tensors, "reconstruction") == lookup(g.tensors, "plain"));
      CHECK(lookup(a.tensors, "truth") == lookup(g.tensors, "truth"));
    }

    // Upstream produced under another config.
    CHECK(run("train-denoiser", cfg, {{"collect.n_den", "13"}}) == 3);
    CHECK(run("report", cfg, {{"attack.tv_weight", "0.01"}}) == 3);
    CHECK(run("guide", cfg, {{"denoiser.width", "3"}}) == 3);

    // Tampered shard.
    write_png(out / "collect" / "pairs" / "000000.noisy.png",
              synthetic_image(SyntheticKind::shapes, 12, 1, 0, 1), 16);
    CHECK(run("train-denoiser", cfg, {{"denoiser.epochs", "2"}}) == 3);
  }

  SUBCASE("threads do not change results") {
    REQUIRE(run("attack", cfg) == 0);
    REQUIRE(run("report", cfg) == 0);
    const auto one = slurp(out / "report" / "metrics.csv");
    const auto other = tmp.path / "out4";
    REQUIRE(run("attack", cfg, {{"output_dir", "\"out4\""}}, 4) == 0);
    REQUIRE(run("report", cfg, {{"output_dir", "\"out4\""}}, 4) == 0);
    CHECK(slurp(other / "report" / "metrics.csv") == one);
  }
}

TEST_CASE("commands: failures") {
  TempDir tmp("fail");
  const auto cfg = write_config(tmp.path, kTinyConfig);
  const auto out = tmp.path / "out";

  CHECK(run("report", cfg) == 1);
  CHECK(run("train-denoiser", cfg) == 1);
  CHECK(run("attack", cfg, {{"attack.T", "0"}}) == 2);
  CHECK(run("bogus", cfg) == 2);
  CHECK(run("attack", tmp.path / "missing.toml") == 2);
  // Overlapping victim and surrogate data.
  std::string log;
  CHECK(run("attack", cfg, {{"dataset.surrogate.seed", "4"}, {"dataset.victim.seed", "4"}}, 1, &log) == 2);
  CHECK(log.find("both the victim and the surrogate") != std::string::npos);
  // Model/data shape disagreement.
  CHECK(run("attack", cfg, {{"model.input_shape", "[3, 12, 12]"}}) == 2);

  // Failure after work started: the client needs more images than exist.
  CHECK(run("attack", cfg, {{"dataset.victim.n", "1"}}) == 1);
  CHECK_FALSE(fs::exists(out / "attack"));
  CHECK_FALSE(fs::exists(out / "attack.partial"));
  REQUIRE(fs::exists(out / "quarantine"));
  CHECK(std::distance(fs::directory_iterator(out / "quarantine"), fs::directory_iterator()) == 1);

  // A held lock blocks a second command.
  std::ofstream(out / ".gilab.lock") << "123\n";
  CHECK(run("attack", cfg, {}, 1, &log) == 1);
  CHECK(log.find("locked") != std::string::npos);
  fs::remove(out / ".gilab.lock");
  CHECK(run("attack", cfg) == 0);
  CHECK_FALSE(fs::exists(out / ".gilab.lock"));
}

TEST_CASE("main_entry argument handling") {
  TempDir tmp("main");
  const auto cfg = write_config(tmp.path, kTinyConfig).string();
  auto call = [](std::vector<std::string> args) {
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return main_entry(static_cast<int>(argv.size()), argv.data());
  };
  CHECK(call({"gilab", "attack"}) == 2);
  CHECK(call({"gilab", "attack", "--config", cfg, "--threads", "x"}) == 2);
  CHECK(call({"gilab", "attack", "--config", cfg, "--attack.T"}) == 2);
  CHECK(call({"gilab", "attack", "--config", cfg, "--attack.T=0"}) == 2);
  CHECK(call({"gilab", "attack", "--config", cfg, "--seed", "4", "--victims.batches", "1",
              "--attack.T=5", "--attack.s_iters", "[5]"}) == 0);
  const auto m = nlohmann::json::parse(slurp(tmp.path / "out" / "attack" / "run-manifest.json"));
  CHECK(m["seeds"]["master"] == 4);
  CHECK(m["inputs"]["attack"]["T"] == 5);
  CHECK(m["batches"] == 1);
}
