#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gilab/fed.hpp"
#include "gilab/guide.hpp"
#include "gilab/inversion.hpp"
#include "gilab/metrics.hpp"
#include "gilab/model.hpp"

namespace gilab::cli {

inline constexpr const char* kVersion = "0.1.0";

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DigestMismatch : public Error {
 public:
  using Error::Error;
};

using gilab::to_string;

enum class SyntheticKind { shapes, textures };
std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& s);

inline constexpr std::size_t kMaxSyntheticClasses = 6;

// Class = shape type (disk, square, triangle, cross, ring, diamond).
// "shapes" backgrounds are smooth gradients with faint low-frequency stripes;
// "textures" backgrounds carry high-frequency checker patterns and noise.
Tensor synthetic_image(SyntheticKind kind, std::size_t size, std::size_t channels, int label,
                       std::uint64_t seed);

struct DatasetSource {
  enum class Type { synthetic, png_dir };
  Type type = Type::synthetic;
  SyntheticKind kind = SyntheticKind::shapes;
  std::size_t n = 64;
  std::size_t size = 32;
  std::size_t channels = 3;
  std::size_t classes = 4;
  std::uint64_t seed = 0;
  std::filesystem::path path;

  nlohmann::json to_json() const;
};

struct ManifestEntry {
  // File path, or "synthetic:<kind>:<seed>:<index>".
  std::string source;
  int label = 0;
  std::string digest;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Shape image_shape;
  std::vector<std::string> class_names;

  std::string digest() const;
  nlohmann::json to_json() const;
};

struct LoadedDataset {
  DatasetManifest manifest;
  Dataset data;
};

LoadedDataset load_dataset(const DatasetSource& source);
// Throws ConfigError naming the shared images.
void check_disjoint(const DatasetManifest& victim, const DatasetManifest& surrogate);

struct GuideMember {
  // Empty path: the train-denoiser output of this experiment.
  std::filesystem::path checkpoint;
  double weight = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";

  ModelSpec model;
  std::uint64_t model_seed = 0;
  std::optional<std::filesystem::path> model_checkpoint;

  DatasetSource victim;
  DatasetSource surrogate;

  ClientConfig client;
  std::size_t client_size = 0;

  AttackConfig attack;
  std::size_t progress_every = 10;

  DefenseConfig defense;
  CollectConfig collect;

  DenoiserSpec denoiser;
  DenoiserTrainConfig denoiser_train;

  std::set<int> d_iters;
  std::optional<int> stop_at;
  std::vector<GuideMember> guide_members;

  std::size_t victim_batches = 30;
  std::uint64_t victim_seed = 0;

  ModelSpec probe;
  ProbeTrainConfig probe_train;
  std::optional<std::filesystem::path> probe_checkpoint;

  // Samples per simulated client.
  std::size_t effective_client_size() const;
};

using Override = std::pair<std::string, std::string>;

// Relative paths resolve against `base_dir`. Overrides use dotted paths
// ("attack.T", "dataset.victim.n") with TOML-literal values; bare words are
// read as strings.
ExperimentConfig parse_config(const std::string& toml_text, const std::filesystem::path& base_dir,
                              const std::vector<Override>& overrides = {},
                              std::optional<std::uint64_t> seed = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<Override>& overrides = {},
                             std::optional<std::uint64_t> seed = std::nullopt);

inline const std::vector<std::string> kCommands = {"train-probe", "collect", "train-denoiser",
                                                   "attack",      "guide",   "report"};

struct RunOptions {
  std::filesystem::path config;
  std::size_t threads = 1;
  std::optional<std::uint64_t> seed;
  std::vector<Override> overrides;
};

// Runs one command. Returns the process exit code: 0 ok, 1 failure,
// 2 config error, 3 digest mismatch. Messages go to `log`.
int run_command(const std::string& command, const RunOptions& opts, std::ostream& log);

// Whole command line, argv[0] included.
int main_entry(int argc, char** argv);

}  // namespace gilab::cli
