#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "doctest.h"
#include "gilab/guide.hpp"
#include "gilab/metrics.hpp"
#include "gilab/png.hpp"
#include "gilab/rng.hpp"

using namespace gilab;
namespace fs = std::filesystem;

namespace {

ModelSpec victim_spec() {
  ModelSpec s;
  s.input_shape = {1, 8, 8};
  for (auto* l : {"conv2d:2", "relu", "avg_pool:2", "flatten", "dense:3"}) {
    s.layers.push_back(parse_layer(l));
  }
  return s;
}

Dataset surrogate(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = Tensor(Shape{n, 1, 8, 8});
  for (auto& v : d.images.data()) v = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 3));
  return d;
}

AttackConfig small_attack(int T) {
  AttackConfig a;
  a.T = T;
  a.seed = 3;
  a.optimizer.lr = 0.05;
  return a;
}

ClientConfig fedsgd(std::size_t b) {
  ClientConfig c;
  c.batch_size = b;
  return c;
}

// Non-residual denoiser that outputs the constant c everywhere.
Denoiser constant_denoiser(double c, const Shape& image) {
  DenoiserSpec s{.depth = 2, .width = 2, .residual = false, .scale = 1};
  auto d = Denoiser::init(s, image, 1);
  TensorMap p = zeros_like(d.body.params());
  for (auto& v : p.back().value.data()) v = c;
  d.body = Model(d.body.spec(), p);
  return d;
}

PairSet bias_pairs(std::size_t n, double bias, std::uint64_t seed) {
  Rng rng(seed);
  PairSet set;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor noisy(Shape{1, 8, 8});
    for (auto& v : noisy.data()) v = rng.uniform(0.0, 0.8);
    Tensor clean = noisy;
    for (auto& v : clean.data()) v += bias;
    set.pairs.push_back({noisy, clean, static_cast<int>(1 + i % 2), 4});
  }
  return set;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gilab_guide_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("denoiser: residual init is the identity and shapes follow the scale") {
  auto x = surrogate(3, 1).images;
  auto d = Denoiser::init({.depth = 3, .width = 4}, {1, 8, 8}, 2);
  CHECK(d.apply(x) == x);
  CHECK(denoise(d, x) == x);

  auto up = Denoiser::init({.depth = 3, .width = 4, .scale = 2}, {1, 4, 4}, 2);
  Tensor small(Shape{2, 1, 4, 4}, 0.25);
  CHECK(up.apply(small).shape() == Shape{2, 1, 8, 8});
  CHECK_THROWS_AS(up.apply(x), ShapeError);

  auto ms = Denoiser::init({.depth = 6, .width = 4, .levels = 2}, {1, 8, 8}, 2);
  CHECK(ms.apply(x) == x);
  std::size_t pools = 0, ups = 0;
  for (const auto& l : ms.body.spec().layers) {
    pools += l.kind == LayerKind::avg_pool;
    ups += l.kind == LayerKind::upsample;
  }
  CHECK(pools == 2);
  CHECK(ups == 2);
  CHECK_THROWS_AS(Denoiser::init({.depth = 6, .width = 4, .levels = 2}, {1, 6, 6}, 2), ShapeError);
  CHECK_THROWS_AS(Denoiser::init({.depth = 5, .width = 4, .levels = 2}, {1, 8, 8}, 2), Error);
  DenoiserSpec spec{.depth = 7, .width = 4, .levels = 2};
  CHECK(DenoiserSpec::from_json(spec.to_json()).levels == 2);
}

TEST_CASE("denoise blends") {
  const Shape img{1, 8, 8};
  auto x = surrogate(2, 5).images;
  auto d = Denoiser::init({.depth = 3, .width = 4, .residual = false}, img, 7);
  std::vector<BlendMember> single{{&d, 1.0}};
  CHECK(denoise(single, x) == clamp(d.apply(x), 0.0, 1.0));

  std::vector<BlendMember> twin{{&d, 0.65}, {&d, 0.35}};
  const auto a = denoise(twin, x), b = denoise(single, x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));

  auto c1 = constant_denoiser(0.2, img), c2 = constant_denoiser(0.6, img);
  std::vector<BlendMember> mix{{&c1, 0.25}, {&c2, 0.75}};
  const auto mixed = denoise(mix, x);
  for (double v : mixed.data()) CHECK(v == doctest::Approx(0.25 * 0.2 + 0.75 * 0.6));

  auto e = Denoiser::init({.depth = 3, .width = 4, .residual = false}, img, 8);
  std::vector<BlendMember> hull{{&d, 0.3}, {&e, 0.7}};
  const auto out = denoise(hull, x);
  const auto da = clamp(d.apply(x), 0.0, 1.0), ea = clamp(e.apply(x), 0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i] >= std::min(da[i], ea[i]) - 1e-12);
    CHECK(out[i] <= std::max(da[i], ea[i]) + 1e-12);
  }

  auto up = Denoiser::init({.depth = 2, .width = 2, .scale = 2}, {1, 4, 4}, 1);
  std::vector<BlendMember> bad{{&d, 0.5}, {&up, 0.5}};
  CHECK_THROWS_AS(denoise(bad, x), Error);
}

TEST_CASE("collect_pairs accounting") {
  auto model = Model::init(victim_spec(), 11);
  auto data = surrogate(20, 12);

  SUBCASE("s_iters={T}, one batch") {
    auto a = small_attack(6);
    a.s_iters = {6};
    auto set = collect_pairs(model, data, a, fedsgd(4), {}, {.n_den = 4, .seed = 1});
    REQUIRE(set.pairs.size() == 4);
    for (const auto& p : set.pairs) {
      CHECK(p.stage == 6);
      CHECK(p.batch_size_of_origin == 4);
    }
    CHECK(set.defense_digest == "none");
    CHECK(set.attack_digest == a.digest());
  }
  SUBCASE("two stages give 2B pairs per batch") {
    auto a = small_attack(6);
    a.s_iters = {3, 6};
    auto set = collect_pairs(model, data, a, fedsgd(4), {}, {.n_den = 8, .seed = 1});
    REQUIRE(set.pairs.size() == 8);
    std::map<int, int> hist;
    for (const auto& p : set.pairs) ++hist[p.stage];
    CHECK(hist == std::map<int, int>{{3, 4}, {6, 4}});
  }
  SUBCASE("truncation at the cap") {
    auto a = small_attack(4);
    a.s_iters = {2, 4};
    auto set = collect_pairs(model, data, a, fedsgd(4), {}, {.n_den = 5, .seed = 1});
    CHECK(set.pairs.size() == 5);
  }
  SUBCASE("errors") {
    auto a = small_attack(4);
    a.s_iters = {4};
    CHECK_THROWS_AS(collect_pairs(model, data, a, fedsgd(4), {}, {.n_den = 0}), Error);
    CHECK_THROWS_AS(collect_pairs(model, surrogate(3, 1), a, fedsgd(4), {}, {.n_den = 4}), Error);
    a.s_iters.clear();
    CHECK_THROWS_AS(collect_pairs(model, data, a, fedsgd(4), {}, {.n_den = 4}), Error);
  }
}

TEST_CASE("collect_pairs matches a scripted three-batch loop") {
  auto model = Model::init(victim_spec(), 21);
  auto data = surrogate(16, 22);
  auto a = small_attack(8);
  a.s_iters = {4, 8};
  a.tv_weight = 0.01;
  DefenseConfig defense;
  defense.topk_keep_fraction = 0.5;
  const std::size_t b = 2;
  auto set = collect_pairs(model, data, a, fedsgd(b), defense, {.n_den = 12, .seed = 9});

  std::vector<DenoisePair> expect;
  for (std::size_t batch = 0; batch < 3; ++batch) {
    const auto seeds = collect_batch_seeds(9, batch);
    Rng rng(seeds.sample);
    std::vector<std::size_t> idx(16);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.below(16 - i)]);
    const std::vector<std::size_t> rows(idx.begin(), idx.begin() + b);
    const auto d = data.subset(rows);
    auto cc = fedsgd(b);
    cc.shuffle_seed = seeds.client;
    auto u = fedsgd_update(model, d.images, d.labels, cc);
    u = topk_sparsify(u, 0.5);
    auto ac = a;
    ac.seed = seeds.attack;
    auto state = init_state(u, model, ac, d.labels);
    for (int t = 1; t <= 8; ++t) {
      state = attack_step(state, u, model, ac);
      if (t != 4 && t != 8) continue;
      const auto assign = match_assignment(state.x_hat, d.images);
      for (std::size_t i = 0; i < b; ++i) {
        expect.push_back({state.x_hat.row(i), d.images.row(assign[i]), t, b});
      }
    }
  }
  REQUIRE(set.pairs.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(set.pairs[i].stage == expect[i].stage);
    CHECK(set.pairs[i].noisy == expect[i].noisy);
    CHECK(set.pairs[i].clean == expect[i].clean);
  }
  CHECK(set.defense_digest == defense.digest());
}

TEST_CASE("collect_pairs is deterministic and thread-count independent") {
  auto model = Model::init(victim_spec(), 31);
  auto data = surrogate(12, 32);
  auto a = small_attack(5);
  a.s_iters = {5};
  const auto one = collect_pairs(model, data, a, fedsgd(2), {}, {.n_den = 8, .seed = 4});
  const auto again = collect_pairs(model, data, a, fedsgd(2), {}, {.n_den = 8, .seed = 4});
  const auto par = collect_pairs(model, data, a, fedsgd(2), {}, {.n_den = 8, .seed = 4, .threads = 3});
  CHECK(one.digest() == again.digest());
  CHECK(one.digest() == par.digest());
  const auto other = collect_pairs(model, data, a, fedsgd(2), {}, {.n_den = 8, .seed = 5});
  CHECK(one.digest() != other.digest());
}

TEST_CASE("collect_pairs with a reduced-resolution attack yields upscaling pairs") {
  auto model = Model::init(victim_spec(), 41);
  auto a = small_attack(4);
  a.s_iters = {4};
  a.down_factor = 2;
  auto set = collect_pairs(model, surrogate(10, 42), a, fedsgd(2), {}, {.n_den = 4, .seed = 1});
  CHECK(set.scale == 2);
  CHECK(set.pairs[0].noisy.shape() == Shape{1, 4, 4});
  CHECK(set.pairs[0].clean.shape() == Shape{1, 8, 8});
  CHECK_NOTHROW(set.validate());
}

TEST_CASE("stratified split keeps every stage in both halves") {
  auto set = bias_pairs(50, 0.1, 1);
  auto [train, test] = stratified_split(set, 0.8, 3);
  CHECK(train.size() == 40);
  CHECK(test.size() == 10);
  std::map<int, int> h;
  for (auto i : test) ++h[set.pairs[i].stage];
  CHECK(h == std::map<int, int>{{1, 5}, {2, 5}});
  std::vector<std::size_t> all = train;
  all.insert(all.end(), test.begin(), test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(stratified_split(set, 0.8, 3) == std::make_pair(train, test));
}

TEST_CASE("train_denoiser: identity task stays at zero loss") {
  auto set = bias_pairs(20, 0.0, 2);
  auto r = train_denoiser(set, {.depth = 3, .width = 4}, {.epochs = 2, .batch_size = 4, .seed = 1});
  for (double l : r.report.epoch_loss) CHECK(l == 0.0);
  CHECK(r.report.psnr_after == r.report.psnr_before);

  auto aug = train_denoiser(set, {.depth = 3, .width = 4},
                            {.epochs = 2, .batch_size = 4, .seed = 1, .augment = true});
  for (double l : aug.report.epoch_loss) CHECK(l == 0.0);
}

TEST_CASE("train_denoiser: augmentation keeps a transform-invariant task learnable") {
  auto set = bias_pairs(60, 0.15, 3);
  DenoiserTrainConfig cfg{.epochs = 40, .batch_size = 8, .lr = 5e-3, .seed = 2, .augment = true};
  auto r = train_denoiser(set, {.depth = 3, .width = 4}, cfg);
  CHECK(r.report.mae_after <= 0.1 * r.report.mae_before);
  CHECK(train_denoiser(set, {.depth = 3, .width = 4}, cfg).denoiser.body == r.denoiser.body);
  cfg.augment = false;
  CHECK_FALSE(train_denoiser(set, {.depth = 3, .width = 4}, cfg).denoiser.body == r.denoiser.body);
}

TEST_CASE("train_denoiser: learns a constant bias on held-out pairs") {
  auto set = bias_pairs(60, 0.15, 3);
  DenoiserTrainConfig cfg{.epochs = 40, .batch_size = 8, .lr = 5e-3, .seed = 2};
  auto r = train_denoiser(set, {.depth = 3, .width = 4}, cfg);
  CHECK(r.report.test_indices.size() == 12);
  CHECK(r.report.mae_before == doctest::Approx(0.15).epsilon(1e-9));
  CHECK(r.report.mae_after <= 0.1 * r.report.mae_before);
  CHECK(r.report.psnr_after > r.report.psnr_before);

  auto again = train_denoiser(set, {.depth = 3, .width = 4}, cfg);
  CHECK(again.denoiser.body == r.denoiser.body);

  const auto path = fs::temp_directory_path() / "gilab_guide_test_den.bin";
  r.denoiser.defense_digest = "abc";
  save_denoiser(path, r.denoiser);
  auto back = load_denoiser(path);
  CHECK(back.body == r.denoiser.body);
  CHECK(back.spec.depth == 3);
  CHECK(back.defense_digest == "abc");
  fs::remove(path);
}

TEST_CASE("train_denoiser errors") {
  CHECK_THROWS_AS(train_denoiser(bias_pairs(9, 0.1, 1), {.depth = 2, .width = 2}, {}), Error);
  auto set = bias_pairs(20, 0.1, 1);
  CHECK_THROWS_AS(train_denoiser(set, {.depth = 2, .width = 2, .scale = 2}, {}), Error);
  try {
    train_denoiser(set, {.depth = 3, .width = 4}, {.epochs = 5, .batch_size = 4, .lr = 1e200});
    FAIL("expected divergence");
  } catch (const DenoiserDivergence& e) {
    CHECK(e.last_good().body.params().size() == 6);
    for (const auto& nt : e.last_good().body.params()) CHECK(nt.value.all_finite());
  }
}

TEST_CASE("guide_reconstruct with an identity denoiser equals the plain attack") {
  auto model = Model::init(victim_spec(), 51);
  auto d = surrogate(2, 52);
  auto u = fedsgd_update(model, d.images, d.labels, fedsgd(2));
  auto a = small_attack(10);
  a.tv_weight = 0.01;
  const auto plain = run_attack(u, model, a, d.labels);
  auto id = Denoiser::init({.depth = 3, .width = 4}, {1, 8, 8}, 3);
  for (std::set<int> d_iters : {std::set<int>{10}, std::set<int>{2, 5, 10}, std::set<int>{3}}) {
    GuideConfig g{d_iters, {{&id, 1.0}}};
    const auto r = guide_reconstruct(u, model, a, g, d.labels);
    CHECK(r.final == plain.x_hat);
    CHECK(r.plain == plain.x_hat);
  }
}

TEST_CASE("guide_reconstruct: interior denoising, early stop and validation") {
  auto model = Model::init(victim_spec(), 61);
  auto d = surrogate(2, 62);
  auto u = fedsgd_update(model, d.images, d.labels, fedsgd(2));
  auto a = small_attack(10);
  auto flat = constant_denoiser(0.5, {1, 8, 8});

  SUBCASE("interior replacement changes the trajectory") {
    GuideConfig g{{5}, {{&flat, 1.0}}};
    const auto r = guide_reconstruct(u, model, a, g, d.labels);
    CHECK_FALSE(r.final == run_attack(u, model, a, d.labels).x_hat);
    CHECK(r.state.adam_steps == 5);
  }
  SUBCASE("early stop equals denoising the snapshot of the full run") {
    auto trained = Denoiser::init({.depth = 3, .width = 4, .residual = false}, {1, 8, 8}, 4);
    auto full_cfg = a;
    full_cfg.s_iters = {3};
    Tensor snap;
    GuideConfig full{{10}, {{&trained, 1.0}}};
    guide_reconstruct(u, model, full_cfg, full, d.labels,
                      {.sink = [&](const Tensor& x, int) { snap = x; }});
    GuideConfig early{{3}, {{&trained, 1.0}}, 3};
    const auto r = guide_reconstruct(u, model, a, early, d.labels);
    CHECK(r.plain == snap);
    CHECK(r.final == denoise(trained, snap));
  }
  SUBCASE("config errors and warnings") {
    auto up = Denoiser::init({.depth = 2, .width = 2, .scale = 2}, {1, 4, 4}, 1);
    auto reduced = a;
    reduced.down_factor = 2;
    CHECK_THROWS_AS(guide_reconstruct(u, model, reduced, {{5, 10}, {{&up, 1.0}}}, d.labels), Error);
    CHECK_NOTHROW(guide_reconstruct(u, model, reduced, {{10}, {{&up, 1.0}}}, d.labels));
    CHECK_THROWS_AS(guide_reconstruct(u, model, a, {{10}, {{&up, 1.0}}}, d.labels), Error);
    CHECK_THROWS_AS(guide_reconstruct(u, model, a, {{}, {{&flat, 1.0}}}, d.labels), Error);
    CHECK_THROWS_AS(guide_reconstruct(u, model, a, {{11}, {{&flat, 1.0}}}, d.labels), Error);
    CHECK_THROWS_AS(guide_reconstruct(u, model, a, {{10}, {{&flat, 0.5}}}, d.labels), Error);

    auto other = constant_denoiser(0.4, {1, 8, 8});
    other.defense_digest = "feedfacecafebeef";
    const auto r = guide_reconstruct(u, model, a, {{10}, {{&flat, 0.5}, {&other, 0.5}}}, d.labels);
    CHECK(r.warnings.size() == 1);
  }
}

TEST_CASE("reduced_space_attack") {
  auto model = Model::init(victim_spec(), 71);
  auto d = surrogate(2, 72);
  auto u = fedsgd_update(model, d.images, d.labels, fedsgd(2));
  auto a = small_attack(6);

  auto id = Denoiser::init({.depth = 3, .width = 4}, {1, 8, 8}, 5);
  const auto r1 = reduced_space_attack(u, model, a, 1, id, d.labels);
  CHECK(r1.final == denoise(id, run_attack(u, model, a, d.labels).x_hat));

  auto up = Denoiser::init({.depth = 3, .width = 4, .scale = 4}, {1, 2, 2}, 5);
  const auto r4 = reduced_space_attack(u, model, a, 4, up, d.labels);
  CHECK(r4.state.x_hat.size() == d.images.size() / 16);
  CHECK(r4.final.shape() == d.images.shape());
  CHECK_THROWS_AS(reduced_space_attack(u, model, a, 2, up, d.labels), Error);
  CHECK_THROWS_AS(reduced_space_attack(u, model, a, 3, up, d.labels), Error);
}

TEST_CASE("png round trip") {
  const auto dir = scratch_dir("png");
  fs::create_directories(dir);
  Rng rng(81);
  for (std::size_t c : {1u, 3u}) {
    Tensor img(Shape{c, 5, 7});
    for (auto& v : img.data()) v = rng.uniform();
    for (int depth : {8, 16}) {
      const auto path = dir / ("img" + std::to_string(c) + "_" + std::to_string(depth) + ".png");
      write_png(path, img, depth);
      const auto back = read_png(path);
      REQUIRE(back.shape() == img.shape());
      const double tol = 0.5 / (depth == 8 ? 255.0 : 65535.0) + 1e-12;
      for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= tol);
    }
  }
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir / "junk.png"), Error);
  std::ofstream trunc(dir / "trunc.png", std::ios::binary);
  trunc << "\x89PNG\r\n\x1a\n" << std::string(20, '\0');
  trunc.close();
  CHECK_THROWS_AS(read_png(dir / "trunc.png"), Error);
  fs::remove_all(dir);
}

TEST_CASE("pair set shards round trip") {
  const auto dir = scratch_dir("shards");
  auto set = bias_pairs(12, 0.1, 4);
  set.attack_digest = "0123456789abcdef";
  write_pairset(dir, set);
  const auto back = read_pairset(dir);
  REQUIRE(back.pairs.size() == 12);
  CHECK(back.attack_digest == set.attack_digest);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(back.pairs[i].stage == set.pairs[i].stage);
    for (std::size_t k = 0; k < set.pairs[i].noisy.size(); ++k) {
      CHECK(std::abs(back.pairs[i].noisy[k] - set.pairs[i].noisy[k]) <= 0.5 / 65535 + 1e-12);
    }
  }
  // Rewriting the same set leaves identical files behind.
  write_pairset(dir, set);
  CHECK(read_pairset(dir).digest() == back.digest());

  std::ofstream(dir / "000003.json") << R"({"stage":1,"batch_size_of_origin":4,)"
                                     << R"("attack_digest":"other","defense_digest":"none"})";
  CHECK_THROWS_AS(read_pairset(dir), Error);
  fs::remove_all(dir);
}
