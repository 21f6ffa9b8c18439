#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gilab/autograd.hpp"
#include "gilab/fed.hpp"
#include "gilab/model.hpp"

namespace gilab {

enum class GradLoss { squared_l2, negative_cosine };
enum class OptimizerKind { adam, sgd };
enum class InitKind { uniform01, gaussian };
enum class LabelMode { known, inferred, optimized };

std::string to_string(GradLoss v);
std::string to_string(OptimizerKind v);
std::string to_string(InitKind v);
std::string to_string(LabelMode v);
GradLoss parse_grad_loss(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);
InitKind parse_init(const std::string& s);
LabelMode parse_label_mode(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Cosine decay from lr down to lr * final_lr_fraction over T steps.
  bool cosine_decay = true;
  double final_lr_fraction = 0.1;
};

struct AttackConfig {
  int T = 1000;
  GradLoss grad_loss = GradLoss::squared_l2;
  double tv_weight = 0.0;
  OptimizerConfig optimizer;
  InitKind init = InitKind::uniform01;
  LabelMode label_mode = LabelMode::known;
  std::set<int> s_iters;
  std::uint64_t seed = 0;
  // Optimize a latent at 1/down_factor resolution, upsampled (nearest) before
  // the model sees it.
  std::size_t down_factor = 1;
  // When set, the target update must come from this protocol.
  std::optional<Algorithm> protocol;

  void validate() const;
  double lr_at(int iteration) const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
  // 16 hex characters identifying the configuration.
  std::string digest() const;
};

struct ReconstructionState {
  // Optimization variable [B, C, H/f, W/f].
  Tensor x_hat;
  std::vector<int> labels;
  // Soft-label logits [B, K], used with label_mode = optimized.
  Tensor label_logits;
  int iteration = 0;
  Tensor m_x, v_x, m_y, v_y;
  // Adam step count since the last moment reset.
  int adam_steps = 0;
  double last_loss = 0.0;
  double best_loss = 0.0;
};

// Classes with negative last-layer bias gradient, most negative first;
// padded with the most negative entries when fewer than `batch` exist.
std::vector<int> infer_labels(const Update& update, const Model& model, std::size_t batch);

double grad_match_loss(const TensorMap& target, const TensorMap& candidate, GradLoss kind);
ag::Var grad_match_loss(const TensorMap& target, std::span<const ag::Var> candidate,
                        GradLoss kind);

double tv_regularizer(const Tensor& x_hat);

// Number of dummy samples the candidate update is computed from.
std::size_t attack_batch_size(const Update& target);

// Fresh state: seeded init of x_hat and labels per cfg.label_mode.
// `known_labels` is required for label_mode = known.
ReconstructionState init_state(const Update& target, const Model& model, const AttackConfig& cfg,
                               std::span<const int> known_labels = {});

// Full-resolution images the latent stands for.
Tensor attack_images(const ReconstructionState& state, const AttackConfig& cfg);

// Loss and its gradients w.r.t. x_hat and the label logits at the current
// state, without stepping.
struct AttackObjective {
  double loss = 0.0;
  Tensor grad_x;
  Tensor grad_y;
};
AttackObjective attack_objective(const ReconstructionState& state, const Update& target,
                                 const Model& model, const AttackConfig& cfg);

ReconstructionState attack_step(const ReconstructionState& state, const Update& target,
                                const Model& model, const AttackConfig& cfg);

// Clears optimizer moments (after x_hat was replaced externally).
void reset_moments(ReconstructionState& state);

using SnapshotSink = std::function<void(const Tensor& x_hat, int iteration)>;
// Called after every step.
using ProgressFn = std::function<void(const ReconstructionState& state)>;

struct AttackHooks {
  SnapshotSink sink;
  ProgressFn progress;
};

ReconstructionState run_attack(const Update& target, const Model& model, const AttackConfig& cfg,
                               std::span<const int> known_labels = {},
                               const AttackHooks& hooks = {});

}  // namespace gilab
