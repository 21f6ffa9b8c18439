#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gilab/fed.hpp"
#include "gilab/model.hpp"

namespace gilab {

inline constexpr double kPsnrCap = 99.0;

// Images are [C, H, W] (or any equal shapes for mse/psnr) with values in [0, 1].
double mse(const Tensor& a, const Tensor& b);
double psnr(const Tensor& a, const Tensor& b);
// Mean local SSIM, 11x11 Gaussian window (sigma 1.5) over valid positions,
// computed per channel and averaged.
double ssim(const Tensor& a, const Tensor& b);

// Penultimate activations of the probe for a [B, C, H, W] batch, [B, D].
Tensor probe_embedding(const Model& probe, const Tensor& batch);
// 1 - cosine similarity of probe embeddings; 1 when either norm is zero.
double proxy_perceptual(const Tensor& a, const Tensor& b, const Model& probe);

// Minimum-cost assignment for a square cost matrix (row-major, n x n).
// Returns col[i] for every row i.
std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n);

struct PairMetrics {
  std::size_t recon_index = 0;
  std::size_t truth_index = 0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> proxy_dist;
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
};

struct MetricReport {
  std::vector<PairMetrics> per_image;
  // assignment[i] is the truth index matched to reconstruction i.
  std::vector<std::size_t> assignment;

  Summary mse() const;
  Summary psnr() const;
  Summary ssim() const;
  std::optional<Summary> proxy() const;
};

Summary summarize(const std::vector<double>& values);

// Minimum-total-MSE assignment: entry i is the original matched to
// reconstruction i.
std::vector<std::size_t> match_assignment(const Tensor& x_hat, const Tensor& x_true);

// match_assignment, then every metric on the matched pairs.
MetricReport match_reconstructions(const Tensor& x_hat, const Tensor& x_true,
                                   const Model* probe = nullptr);

// One-sided sign test for "a > b" over paired samples. Ties are dropped.
struct SignTest {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};
SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b);

struct ProbeTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

// Minibatch SGD on a fresh seeded classifier.
Model train_probe(const ModelSpec& spec, const Dataset& data, const ProbeTrainConfig& cfg);
double accuracy(const Model& model, const Dataset& data);

}  // namespace gilab
