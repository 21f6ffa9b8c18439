#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gilab/fed.hpp"
#include "gilab/inversion.hpp"
#include "gilab/model.hpp"

namespace gilab {

struct DenoisePair {
  // [C, H, W] attack snapshot and [C, sH, sW] original.
  Tensor noisy;
  Tensor clean;
  int stage = 0;
  std::size_t batch_size_of_origin = 0;
};

struct PairSet {
  std::vector<DenoisePair> pairs;
  std::size_t scale = 1;
  std::string attack_digest;
  std::string defense_digest = "none";

  void validate() const;
  // Content digest over every pair and the provenance fields.
  std::string digest() const;
};

struct DenoiserSpec {
  std::size_t depth = 8;
  std::size_t width = 32;
  bool residual = true;
  std::size_t scale = 1;
  // Pool/upsample stages around the middle convs; 0 is a flat conv stack.
  std::size_t levels = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserSpec from_json(const nlohmann::json& j);
  // Conv body acting on the (pre-upsampled) [C, H, W] image.
  ModelSpec body_spec(std::size_t channels, std::size_t height, std::size_t width) const;
};

struct Denoiser {
  DenoiserSpec spec;
  Model body;
  std::string defense_digest = "none";
  std::string attack_digest;

  // Residual spec with a zero output head: the identity map.
  static Denoiser init(const DenoiserSpec& spec, const Shape& image_shape, std::uint64_t seed);
  // Per-image input shape [C, H, W] (before upsampling).
  Shape input_shape() const;
  // Unclamped output for a [B, C, H, W] batch.
  Tensor apply(const Tensor& images) const;
};

void save_denoiser(const std::filesystem::path& path, const Denoiser& den);
Denoiser load_denoiser(const std::filesystem::path& path);

struct BlendMember {
  const Denoiser* denoiser = nullptr;
  double weight = 1.0;
};

// sum_k w_k den_k(images), clamped to [0, 1].
Tensor denoise(std::span<const BlendMember> blend, const Tensor& images);
Tensor denoise(const Denoiser& den, const Tensor& images);

struct CollectConfig {
  std::size_t n_den = 100;
  // Samples per simulated client; 0 means the client batch size.
  std::size_t client_size = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

// Per-batch seeds used by collect_pairs for surrogate batch `index`.
struct BatchSeeds {
  std::uint64_t sample, attack, defense, client;
};
BatchSeeds collect_batch_seeds(std::uint64_t seed, std::size_t index);

// One simulated client: `client_size` distinct samples drawn from `pool`
// with seeds.sample, its (defended) update, and the attack config reseeded
// for this batch.
struct SimulatedClient {
  Dataset data;
  Update update;
  AttackConfig attack;
};
SimulatedClient simulate_client(const Model& model, const Dataset& pool,
                                const AttackConfig& attack, const ClientConfig& client,
                                const DefenseConfig& defense, std::size_t client_size,
                                const BatchSeeds& seeds);

// Attacks the attacker's own surrogate updates and harvests
// (snapshot, original) pairs at attack.s_iters until n_den pairs exist.
PairSet collect_pairs(const Model& model, const Dataset& surrogate, const AttackConfig& attack,
                      const ClientConfig& client, const DefenseConfig& defense,
                      const CollectConfig& cfg);

struct DenoiserTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  // Random flips/transposes and channel permutations of each training pair.
  bool augment = false;

  nlohmann::json to_json() const;
};

struct DenoiserReport {
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::vector<double> epoch_loss;
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  double mae_before = 0.0;
  double mae_after = 0.0;
};

struct TrainedDenoiser {
  Denoiser denoiser;
  DenoiserReport report;
};

class DenoiserDivergence : public NumericError {
 public:
  DenoiserDivergence(const std::string& what, Denoiser last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Denoiser& last_good() const { return last_good_; }

 private:
  Denoiser last_good_;
};

// Seeded per-stage 80/20 split. Returns (train, test) pair indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const PairSet& pairs, double train_fraction, std::uint64_t seed);

TrainedDenoiser train_denoiser(const PairSet& pairs, const DenoiserSpec& spec,
                               const DenoiserTrainConfig& cfg);
// Mean PSNR/MAE of the (upsampled) noisy inputs and of the denoised outputs.
void evaluate_denoiser(const Denoiser& den, const PairSet& pairs,
                       std::span<const std::size_t> indices, DenoiserReport& report);

struct GuideConfig {
  std::set<int> d_iters;
  std::vector<BlendMember> denoisers;
  // End the attack at this iteration instead of T.
  std::optional<int> stop_at;

  void validate(const AttackConfig& attack) const;
};

struct GuideResult {
  // Attack estimate at the final iteration before its denoising (the plain
  // attack output when the only denoising point is the final one).
  Tensor plain;
  // Full-resolution output.
  Tensor final;
  ReconstructionState state;
  std::vector<std::string> warnings;
};

GuideResult guide_reconstruct(const Update& target, const Model& model,
                              const AttackConfig& attack, const GuideConfig& guide,
                              std::span<const int> known_labels = {},
                              const AttackHooks& hooks = {});

// Optimizes a 1/down_factor resolution latent and restores it with the
// upscaling denoiser. down_factor = 1 means a plain attack plus a scale-1
// denoise.
GuideResult reduced_space_attack(const Update& target, const Model& model, AttackConfig attack,
                                 std::size_t down_factor, const Denoiser& upscaler,
                                 std::span<const int> known_labels = {});

void write_pairset(const std::filesystem::path& dir, const PairSet& pairs);
PairSet read_pairset(const std::filesystem::path& dir);

}  // namespace gilab
