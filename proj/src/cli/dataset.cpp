#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <unordered_map>

#include "gilab/cli.hpp"
#include "gilab/digest.hpp"
#include "gilab/png.hpp"
#include "gilab/rng.hpp"

namespace gilab::cli {

namespace fs = std::filesystem;

std::string to_string(SyntheticKind k) { return k == SyntheticKind::shapes ? "shapes" : "textures"; }

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "shapes") return SyntheticKind::shapes;
  if (s == "textures") return SyntheticKind::textures;
  throw ConfigError("unknown synthetic generator '" + s + "' (shapes | textures)");
}

namespace {

bool inside(int label, double u, double v) {
  switch (label) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2:
      return v <= 0.8 && v >= -1.0 && std::abs(u) <= 0.5 * (v + 1.0);
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.9) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.9);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    default:
      return std::abs(u) + std::abs(v) <= 1.0;
  }
}

}  // namespace

Tensor synthetic_image(SyntheticKind kind, std::size_t size, std::size_t channels, int label,
                       std::uint64_t seed) {
  if (channels != 1 && channels != 3) throw ConfigError("synthetic images need 1 or 3 channels");
  if (size < 4) throw ConfigError("synthetic image size must be at least 4");
  if (label < 0 || label >= static_cast<int>(kMaxSyntheticClasses)) {
    throw ConfigError("synthetic label out of range");
  }
  Rng rng(seed);
  double bg0[3], bg1[3], fg[3];
  for (double& c : bg0) c = rng.uniform(0.15, 0.85);
  for (double& c : bg1) c = rng.uniform(0.15, 0.85);
  for (double& c : fg) c = rng.uniform();
  double contrast = 0.0;
  for (int c = 0; c < 3; ++c) contrast += std::abs(fg[c] - bg0[c]) / 3.0;
  if (contrast < 0.3) {
    for (int c = 0; c < 3; ++c) fg[c] = bg0[c] < 0.5 ? std::min(1.0, bg0[c] + 0.5) : bg0[c] - 0.5;
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double freq = rng.uniform(1.0, 3.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const auto period = 2 + rng.below(3);
  const double n = static_cast<double>(size);
  const double radius = rng.uniform(0.2, 0.32) * n;
  const double cx = rng.uniform(0.35, 0.65) * n;
  const double cy = rng.uniform(0.35, 0.65) * n;

  Tensor rgb(Shape{3, size, size});
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double x = (j + 0.5) / n, y = (i + 0.5) / n;
      const double s = 0.5 + (x - 0.5) * std::cos(angle) + (y - 0.5) * std::sin(angle);
      double bg[3];
      double tex;
      if (kind == SyntheticKind::shapes) {
        tex = 0.06 * std::sin(2.0 * std::numbers::pi * freq * s + phase);
      } else {
        tex = ((i / period + j / period) % 2 ? 0.15 : -0.15) + rng.uniform(-0.08, 0.08);
      }
      for (int c = 0; c < 3; ++c) bg[c] = std::clamp(bg0[c] + (bg1[c] - bg0[c]) * s + tex, 0.0, 1.0);
      // 4x4 supersampled coverage
      int hits = 0;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          const double px = j + (b + 0.5) / 4.0, py = i + (a + 0.5) / 4.0;
          hits += inside(label, (px - cx) / radius, (py - cy) / radius);
        }
      const double cov = hits / 16.0;
      for (std::size_t c = 0; c < 3; ++c) {
        rgb[(c * size + i) * size + j] = (1.0 - cov) * bg[c] + cov * fg[c];
      }
    }
  if (channels == 3) return rgb;
  Tensor gray(Shape{1, size, size});
  for (std::size_t k = 0; k < size * size; ++k) {
    gray[k] = 0.299 * rgb[k] + 0.587 * rgb[size * size + k] + 0.114 * rgb[2 * size * size + k];
  }
  return gray;
}

nlohmann::json DatasetSource::to_json() const {
  if (type == Type::png_dir) return {{"source", "png_dir"}, {"path", path.string()}};
  return {{"source", "synthetic"}, {"kind", to_string(kind)}, {"n", n},       {"size", size},
          {"channels", channels},  {"classes", classes},      {"seed", seed}};
}

std::string DatasetManifest::digest() const {
  std::string buf = to_string(image_shape);
  for (const auto& e : entries) buf += "|" + std::to_string(e.label) + ":" + e.digest;
  return sha256_hex(buf).substr(0, 16);
}

nlohmann::json DatasetManifest::to_json() const {
  auto entries_json = nlohmann::json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"source", e.source}, {"label", e.label}, {"digest", e.digest}});
  }
  return {{"image_shape", image_shape}, {"normalization", {0.0, 1.0}},
          {"classes", class_names},     {"digest", digest()},
          {"entries", entries_json}};
}

namespace {

LoadedDataset finish(DatasetManifest manifest, std::vector<Tensor> images, std::vector<int> labels) {
  std::unordered_map<std::string, std::string> seen;
  for (const auto& e : manifest.entries) {
    const auto [it, fresh] = seen.emplace(e.digest, e.source);
    if (!fresh) throw ConfigError("duplicate image content: " + it->second + " and " + e.source);
  }
  LoadedDataset out;
  out.manifest = std::move(manifest);
  out.data.images = stack(images);
  out.data.labels = std::move(labels);
  return out;
}

LoadedDataset load_synthetic(const DatasetSource& s) {
  if (s.n == 0) throw ConfigError("synthetic dataset needs n > 0");
  if (s.classes < 2 || s.classes > kMaxSyntheticClasses) {
    throw ConfigError("synthetic classes must be in [2, " + std::to_string(kMaxSyntheticClasses) + "]");
  }
  DatasetManifest m;
  m.image_shape = {s.channels, s.size, s.size};
  const char* names[] = {"disk", "square", "triangle", "cross", "ring", "diamond"};
  m.class_names.assign(names, names + s.classes);
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < s.n; ++i) {
    const int label = static_cast<int>(i % s.classes);
    images.push_back(synthetic_image(s.kind, s.size, s.channels, label, derive_seed(s.seed, i)));
    labels.push_back(label);
    m.entries.push_back({"synthetic:" + to_string(s.kind) + ":" + std::to_string(s.seed) + ":" +
                             std::to_string(i),
                         label, tensor_digest(images.back())});
  }
  return finish(std::move(m), std::move(images), std::move(labels));
}

LoadedDataset load_png_dir(const DatasetSource& s) {
  if (!fs::is_directory(s.path)) throw ConfigError("dataset directory not found: " + s.path.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(s.path)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  DatasetManifest m;
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    m.class_names.push_back(class_dirs[c].filename().string());
    for (const auto& f : files) {
      Tensor img;
      try {
        img = read_png(f);
      } catch (const Error& e) {
        throw Error("unreadable image " + f.string() + ": " + e.what());
      }
      m.entries.push_back({f.string(), static_cast<int>(c), tensor_digest(img)});
      images.push_back(std::move(img));
      labels.push_back(static_cast<int>(c));
    }
  }
  if (images.empty()) {
    throw ConfigError("no PNG images under " + s.path.string() +
                      " (expected one subdirectory per class)");
  }
  std::map<Shape, std::vector<std::string>> by_shape;
  for (std::size_t i = 0; i < images.size(); ++i) {
    by_shape[images[i].shape()].push_back(m.entries[i].source);
  }
  if (by_shape.size() > 1) {
    // Report everything outside the most common shape.
    auto majority = by_shape.begin();
    for (auto it = by_shape.begin(); it != by_shape.end(); ++it) {
      if (it->second.size() > majority->second.size()) majority = it;
    }
    std::string msg = "images in " + s.path.string() + " differ in size; expected " +
                      to_string(majority->first) + ", offenders:";
    for (const auto& [shape, names] : by_shape) {
      if (shape == majority->first) continue;
      for (const auto& n : names) msg += "\n  " + n + " " + to_string(shape);
    }
    throw ConfigError(msg);
  }
  m.image_shape = images.front().shape();
  return finish(std::move(m), std::move(images), std::move(labels));
}

}  // namespace

LoadedDataset load_dataset(const DatasetSource& source) {
  return source.type == DatasetSource::Type::synthetic ? load_synthetic(source)
                                                        : load_png_dir(source);
}

void check_disjoint(const DatasetManifest& victim, const DatasetManifest& surrogate) {
  std::unordered_map<std::string, const ManifestEntry*> v;
  for (const auto& e : victim.entries) v.emplace(e.digest, &e);
  std::vector<std::string> shared;
  for (const auto& e : surrogate.entries) {
    if (auto it = v.find(e.digest); it != v.end()) {
      shared.push_back(it->second->source + " == " + e.source);
    }
  }
  if (shared.empty()) return;
  std::string msg = std::to_string(shared.size()) +
                    " image(s) appear in both the victim and the surrogate dataset:";
  for (std::size_t i = 0; i < std::min<std::size_t>(shared.size(), 10); ++i) msg += "\n  " + shared[i];
  throw ConfigError(msg);
}

}  // namespace gilab::cli
