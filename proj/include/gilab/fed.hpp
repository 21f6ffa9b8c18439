#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gilab/autograd.hpp"
#include "gilab/model.hpp"

namespace gilab {

// Labelled image collection, images stacked as [N, C, H, W] in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> rows) const;
};

enum class Algorithm { fedsgd, fedavg };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

struct ClientConfig {
  std::size_t batch_size = 1;
  std::size_t local_epochs = 1;
  double lr = 0.01;
  Algorithm algorithm = Algorithm::fedsgd;
  // Seeds the per-epoch minibatch shuffle of FedAVG.
  std::uint64_t shuffle_seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ClientConfig from_json(const nlohmann::json& j);
};

enum class UpdateKind { aggregated_gradient, weight_delta };

struct UpdateMeta {
  ClientConfig client;
  std::size_t dataset_size = 0;
  std::size_t round = 0;
};

struct Update {
  UpdateKind kind = UpdateKind::aggregated_gradient;
  TensorMap tensors;
  UpdateMeta meta;
};

struct DefenseConfig {
  double dp_sigma = 0.0;
  std::optional<int> qsgd_bits;
  std::optional<double> topk_keep_fraction;
  std::uint64_t seed = 0;

  bool active() const { return dp_sigma > 0.0 || qsgd_bits || topk_keep_fraction; }
  void validate() const;
  nlohmann::json to_json() const;
  // Stable identifier of the perturbation ("none" when inactive).
  std::string digest() const;
};

// Minibatch row indices for every local step of FedAVG: one seeded
// Fisher-Yates permutation per epoch, cut into batches with the final short
// batch kept.
std::vector<std::vector<std::size_t>> fedavg_schedule(std::size_t dataset_size,
                                                      const ClientConfig& cfg);

// Differentiable client update. For FedSGD the summed per-sample gradient;
// for FedAVG theta_0 - theta_tau after the scheduled local SGD steps. The
// client simulation and the attack both go through this function, so a
// candidate built from the true data reproduces the shared update exactly.
std::vector<ag::Var> client_update_graph(const ModelSpec& spec, std::span<const ag::Var> theta,
                                         const ag::Var& inputs, const ag::Var& targets,
                                         const ClientConfig& cfg, bool create_graph);

Update fedsgd_update(const Model& model, const Tensor& batch, std::span<const int> labels,
                     const ClientConfig& cfg);
Update fedavg_update(const Model& model, const Dataset& dataset, const ClientConfig& cfg);
// Dispatches on cfg.algorithm.
Update compute_update(const Model& model, const Dataset& data, const ClientConfig& cfg);

// FedSGD: theta - global_lr * sum of gradients. FedAVG: theta minus the
// dataset-size weighted mean of the deltas (global_lr unused).
Model server_aggregate(std::span<const Update> updates, const Model& global_model,
                       double global_lr);

Update apply_dp_noise(const Update& update, double sigma, std::uint64_t seed);
Update qsgd_quantize(const Update& update, int bits, std::uint64_t seed);
Update topk_sparsify(const Update& update, double keep_fraction);
Update apply_defense(const Update& update, const DefenseConfig& defense);

// Number of entries top-k keeps out of n.
std::size_t topk_count(std::size_t n, double keep_fraction);

nlohmann::json update_header(const Update& update);
void save_update(const std::filesystem::path& path, const Update& update);
Update load_update(const std::filesystem::path& path);

}  // namespace gilab
