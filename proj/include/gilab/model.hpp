#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gilab/autograd.hpp"
#include "gilab/tensor.hpp"
#include "json.hpp"

namespace gilab {

enum class LayerKind { dense, conv2d, relu, avg_pool, flatten, residual_block, upsample };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // Output features (dense) or output channels (conv2d). Unused otherwise.
  std::size_t units = 0;
  // Window for avg_pool, factor for upsample.
  std::size_t window = 2;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);
// Parses the compact "conv2d:16", "dense:10", "avg_pool:2", "relu" notation.
LayerSpec parse_layer(const std::string& text);

struct ModelSpec {
  // Per-sample input shape, C x H x W.
  Shape input_shape;
  std::vector<LayerSpec> layers;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered name -> tensor map. Order is the layer order of the model, which
// fixes the flattening order used by gradient distances.
using TensorMap = std::vector<NamedTensor>;

const Tensor& lookup(const TensorMap& map, const std::string& name);
bool same_layout(const TensorMap& a, const TensorMap& b);
TensorMap zeros_like(const TensorMap& map);

// Expected parameter names and shapes for a spec (validates the spec).
TensorMap parameter_layout(const ModelSpec& spec);
// Per-sample output shape of the full network.
Shape output_shape(const ModelSpec& spec);

class Model {
 public:
  Model(ModelSpec spec, TensorMap params);

  // Fan-in scaled uniform initialization from a seeded splitmix stream.
  static Model init(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const TensorMap& params() const { return params_; }
  std::size_t num_outputs() const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  ModelSpec spec_;
  TensorMap params_;
};

struct Gradients {
  TensorMap by_param;
  Tensor by_input;
  double loss_value = 0.0;
};

// Graph form of the network, parameters supplied as variables. Evaluates the
// first `layer_count` layers (all layers by default).
ag::Var forward(const ModelSpec& spec, std::span<const ag::Var> params, const ag::Var& batch,
                std::size_t layer_count = static_cast<std::size_t>(-1));

Tensor forward(const Model& model, const Tensor& batch);

// Activations after the first `layer_count` layers.
Tensor forward_prefix(const Model& model, const Tensor& batch, std::size_t layer_count);

std::vector<ag::Var> param_leaves(const Model& model);
std::vector<ag::Var> param_constants(const Model& model);

ag::Var one_hot(std::span<const int> labels, std::size_t classes);
// Mean over the batch of -sum_k p_k log softmax(z)_k.
ag::Var cross_entropy(const ag::Var& logits, const ag::Var& target_probs);
void check_labels(std::span<const int> labels, std::size_t classes, std::size_t batch);

// Mean softmax cross-entropy and its exact gradients w.r.t. parameters and
// input batch.
Gradients loss_and_grads(const Model& model, const Tensor& batch, std::span<const int> labels);

// theta - lr * g. Pure: the input model is untouched.
Model sgd_step(const Model& model, const TensorMap& grads, double lr);

// Max relative error between `analytic` and central differences over
// sampled parameter and input coordinates.
double grad_check(const Model& model, const Tensor& batch, std::span<const int> labels,
                  double eps, const Gradients& analytic, std::size_t samples_per_tensor = 24,
                  std::uint64_t seed = 0);
double grad_check(const Model& model, const Tensor& batch, std::span<const int> labels,
                  double eps);

// Binary checkpoint: "GILB", u32 version, u32-length-prefixed JSON header,
// then per tensor (u32 name length, name, u32 rank, u32 dims[], f64 payload).
// All integers and floats little-endian.
struct Checkpoint {
  nlohmann::json header;
  TensorMap tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const Model& model,
                const nlohmann::json& extra = nlohmann::json::object());
Model load_model(const std::filesystem::path& path);
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace gilab
