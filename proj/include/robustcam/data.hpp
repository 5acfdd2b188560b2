#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustcam/box.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/image_io.hpp"
#include "robustcam/objective.hpp"
#include "robustcam/parallel.hpp"
#include "robustcam/random.hpp"
#include "robustcam/tensor.hpp"

namespace robustcam {

enum class ShapeKind { square, disk, cross, ring, triangle, diamond, frame, saltire };

inline constexpr ShapeKind kShapeCatalog[] = {ShapeKind::square,   ShapeKind::disk,
                                              ShapeKind::cross,    ShapeKind::ring,
                                              ShapeKind::triangle, ShapeKind::diamond,
                                              ShapeKind::frame,    ShapeKind::saltire};
inline constexpr std::size_t kShapeCatalogSize = std::size(kShapeCatalog);

inline std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::square: return "square";
    case ShapeKind::disk: return "disk";
    case ShapeKind::cross: return "cross";
    case ShapeKind::ring: return "ring";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::diamond: return "diamond";
    case ShapeKind::frame: return "frame";
    case ShapeKind::saltire: return "saltire";
  }
  return "unknown";
}

// Binary support of a shape inside a size x size cell, row-major.
inline std::vector<std::uint8_t> rasterize_shape(ShapeKind kind, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double r = static_cast<double>(size) / 2.0;
  const double bar = std::max(1.0, static_cast<double>(size) / 6.0);
  for (std::size_t row = 0; row < size; ++row) {
    for (std::size_t col = 0; col < size; ++col) {
      const double dx = static_cast<double>(col) - c;
      const double dy = static_cast<double>(row) - c;
      const double d2 = dx * dx + dy * dy;
      bool on = false;
      switch (kind) {
        case ShapeKind::square: on = true; break;
        case ShapeKind::disk: on = d2 <= r * r; break;
        case ShapeKind::cross: on = std::abs(dx) <= bar / 2 + 0.5 || std::abs(dy) <= bar / 2 + 0.5; break;
        case ShapeKind::ring: on = d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r); break;
        case ShapeKind::triangle:
          on = std::abs(dx) <= (static_cast<double>(row) + 1.0) / 2.0;
          break;
        case ShapeKind::diamond: on = std::abs(dx) + std::abs(dy) <= r; break;
        case ShapeKind::frame: {
          const double edge = static_cast<double>(size) - bar;
          on = col < bar || row < bar || col >= edge || row >= edge;
          break;
        }
        case ShapeKind::saltire: on = std::abs(dx - dy) <= bar * 0.75 || std::abs(dx + dy) <= bar * 0.75; break;
      }
      mask[row * size + col] = on ? 1 : 0;
    }
  }
  return mask;
}

struct Sample {
  std::string id;
  BasicTensor<float> image;  // [1, H, W], values in [0,1]
  std::vector<std::uint8_t> labels;
  std::vector<BoundingBox> boxes;
};

struct Dataset {
  std::size_t image_size = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t num_classes() const { return class_names.size(); }
};

struct GenerateConfig {
  std::size_t n_samples = 4000;
  std::size_t image_size = 64;
  std::size_t n_classes = 4;
  double noise_level = 0.1;
  double background = 0.15;
  std::vector<double> class_probability;  // empty: 0.3 each, last class 0.05
  std::size_t min_shape_size = 12;
  std::size_t max_shape_size = 22;
  double min_intensity = 0.6;
  double max_intensity = 1.0;

  std::vector<double> probabilities() const {
    if (!class_probability.empty()) return class_probability;
    std::vector<double> p(n_classes, 0.3);
    if (n_classes > 1) p.back() = 0.05;
    return p;
  }

  void validate() const {
    if (n_classes == 0 || n_classes > kShapeCatalogSize) {
      throw ConfigError("data: n_classes must be in [1, " + std::to_string(kShapeCatalogSize) +
                        "] (size of the shape catalog)");
    }
    if (min_shape_size < 4 || min_shape_size > max_shape_size) {
      throw ConfigError("data: need 4 <= min_shape_size <= max_shape_size");
    }
    if (max_shape_size > image_size) {
      throw ConfigError("data: shapes of size " + std::to_string(max_shape_size) +
                        " cannot fit a " + std::to_string(image_size) + "px image");
    }
    const auto p = probabilities();
    if (p.size() != n_classes) throw ConfigError("data: class_probability needs one entry per class");
    for (double v : p) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("data: class probabilities must be in [0,1]");
    }
    if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw ConfigError("data: noise_level must be in [0,1]");
    if (!(min_intensity >= 0.0 && min_intensity <= max_intensity && max_intensity <= 1.0)) {
      throw ConfigError("data: need 0 <= min_intensity <= max_intensity <= 1");
    }
  }
};

inline float quantize_pixel(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::floor(clamped * 255.0 + 0.5) / 255.0);
}

// Paints a shape with its top-left cell corner at (x0, y0) using max
// compositing and returns the tight box around the painted support.
inline BoundingBox draw_shape(BasicTensor<float>& canvas, ShapeKind kind, std::size_t class_id,
                              std::size_t x0, std::size_t y0, std::size_t size, float intensity) {
  const std::size_t h = canvas.dim(1), w = canvas.dim(2);
  if (x0 + size > w || y0 + size > h) throw DataError("draw_shape: shape does not fit the canvas");
  const auto mask = rasterize_shape(kind, size);
  std::size_t min_x = size, min_y = size, max_x = 0, max_y = 0;
  for (std::size_t row = 0; row < size; ++row) {
    for (std::size_t col = 0; col < size; ++col) {
      if (!mask[row * size + col]) continue;
      float& px = canvas[(y0 + row) * w + x0 + col];
      px = std::max(px, intensity);
      min_x = std::min(min_x, col);
      max_x = std::max(max_x, col);
      min_y = std::min(min_y, row);
      max_y = std::max(max_y, row);
    }
  }
  return BoundingBox{x0 + min_x, y0 + min_y, max_x - min_x + 1, max_y - min_y + 1, class_id};
}

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05zu", index);
  return buf;
}

inline Sample generate_sample(const GenerateConfig& cfg, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, 0x64617461ULL, index));
  const std::size_t n = cfg.image_size;
  const auto probs = cfg.probabilities();
  Sample s;
  s.id = sample_id(index);
  s.labels.assign(cfg.n_classes, 0);
  BasicTensor<float> shapes(Shape{1, n, n}, 0.0f);
  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    if (!rng.bernoulli(probs[c])) continue;
    const auto size = static_cast<std::size_t>(
        rng.integer(static_cast<long>(cfg.min_shape_size), static_cast<long>(cfg.max_shape_size)));
    const auto x0 = static_cast<std::size_t>(rng.integer(0, static_cast<long>(n - size)));
    const auto y0 = static_cast<std::size_t>(rng.integer(0, static_cast<long>(n - size)));
    const auto intensity = static_cast<float>(rng.uniform(cfg.min_intensity, cfg.max_intensity));
    s.boxes.push_back(draw_shape(shapes, kShapeCatalog[c], c, x0, y0, size, intensity));
    s.labels[c] = 1;
  }
  s.image = BasicTensor<float>(Shape{1, n, n});
  for (std::size_t i = 0; i < n * n; ++i) {
    const double base = shapes[i] > 0.0f ? shapes[i] : cfg.background;
    const double noise = cfg.noise_level > 0.0 ? rng.uniform(-cfg.noise_level, cfg.noise_level) : 0.0;
    s.image[i] = quantize_pixel(base + noise);
  }
  return s;
}

// Pixel values are quantized to k/255 so the in-memory dataset and its PGM
// files hold identical values.
inline Dataset generate_dataset(const GenerateConfig& cfg, std::uint64_t seed, std::size_t threads = 1) {
  cfg.validate();
  Dataset ds;
  ds.image_size = cfg.image_size;
  for (std::size_t c = 0; c < cfg.n_classes; ++c) ds.class_names.push_back(shape_name(kShapeCatalog[c]));
  ds.samples.resize(cfg.n_samples);
  parallel_for(cfg.n_samples, threads, [&](std::size_t i) { ds.samples[i] = generate_sample(cfg, seed, i); });
  return ds;
}

struct SplitRatios {
  double train = 0.72;
  double validation = 0.08;
  double test = 0.20;
};

// Index sets into Dataset::samples, each sorted ascending.
struct DatasetSplits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::vector<std::size_t> annotated_test;
};

inline DatasetSplits split_dataset(const Dataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
  const double total = ratios.train + ratios.validation + ratios.test;
  if (std::abs(total - 1.0) > 1e-9 || ratios.train < 0 || ratios.validation < 0 || ratios.test < 0) {
    throw ConfigError("split: ratios must be non-negative and sum to 1");
  }
  const std::size_t n = ds.samples.size();
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train));
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.validation));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ConfigError("split: ratios leave an empty split for " + std::to_string(n) + " samples");
  }
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  const auto order = rng.permutation(n);
  DatasetSplits out;
  out.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
  out.validation.assign(order.begin() + static_cast<long>(n_train),
                        order.begin() + static_cast<long>(n_train + n_val));
  out.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
  for (auto* v : {&out.train, &out.validation, &out.test}) std::sort(v->begin(), v->end());
  for (auto i : out.test) {
    if (!ds.samples[i].boxes.empty()) out.annotated_test.push_back(i);
  }
  return out;
}

// Per-epoch seeded reshuffle; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> indices,
                                                          std::size_t batch_size, std::uint64_t seed,
                                                          std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  Rng rng(derive_seed(seed, 0x6261746368ULL, epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

struct Batch {
  BasicTensor<float> images;  // [N, 1, H, W]
  LabelBatch labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  const std::size_t n = ds.image_size, c = ds.num_classes();
  Batch b{BasicTensor<float>(Shape{indices.size(), 1, n, n}), {}};
  std::vector<std::uint8_t> labels;
  labels.reserve(indices.size() * c);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = ds.samples.at(indices[k]);
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + k * n * n);
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  b.labels = LabelBatch(indices.size(), c, std::move(labels));
  return b;
}

// --- on-disk format: manifest.json + images/<id>.pgm -----------------------

inline constexpr int kManifestVersion = 1;

inline GrayImage to_gray(const BasicTensor<float>& image) {
  GrayImage g{image.dim(image.rank() - 1), image.dim(image.rank() - 2), {}};
  g.pixels.reserve(image.size());
  for (float v : image.data()) {
    g.pixels.push_back(static_cast<std::uint8_t>(std::floor(std::clamp(double(v), 0.0, 1.0) * 255.0 + 0.5)));
  }
  return g;
}

inline BasicTensor<float> from_gray(const GrayImage& g) {
  BasicTensor<float> t(Shape{1, g.height, g.width});
  for (std::size_t i = 0; i < g.pixels.size(); ++i) t[i] = static_cast<float>(g.pixels[i] / 255.0);
  return t;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds, const DatasetSplits& splits) {
  std::filesystem::create_directories(dir / "images");
  std::vector<std::string> tags(ds.samples.size());
  for (auto i : splits.train) tags[i] = "train";
  for (auto i : splits.validation) tags[i] = "validation";
  for (auto i : splits.test) tags[i] = "test";

  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const std::string file = "images/" + s.id + ".pgm";
    write_pgm(dir / file, to_gray(s.image));
    nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
    for (const auto& b : s.boxes) {
      boxes.push_back({{"class", b.class_id}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    }
    nlohmann::ordered_json entry;
    entry["id"] = s.id;
    entry["file"] = file;
    entry["labels"] = s.labels;
    entry["boxes"] = boxes;
    entry["split"] = tags[i];
    samples.push_back(std::move(entry));
  }
  nlohmann::ordered_json manifest;
  manifest["version"] = kManifestVersion;
  manifest["image_size"] = ds.image_size;
  manifest["classes"] = ds.class_names;
  manifest["samples"] = std::move(samples);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << '\n';
}

struct LoadedDataset {
  Dataset dataset;
  DatasetSplits splits;
};

inline LoadedDataset read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset manifest " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("version").get<int>() != kManifestVersion) {
      throw DataError(path.string() + ": unsupported manifest version " + manifest.at("version").dump());
    }
    LoadedDataset out;
    Dataset& ds = out.dataset;
    ds.image_size = manifest.at("image_size").get<std::size_t>();
    ds.class_names = manifest.at("classes").get<std::vector<std::string>>();
    const auto& samples = manifest.at("samples");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& e = samples[i];
      Sample s;
      s.id = e.at("id").get<std::string>();
      const GrayImage g = read_pgm(dir / e.at("file").get<std::string>());
      if (g.width != ds.image_size || g.height != ds.image_size) {
        throw DataError(s.id + ": image is " + std::to_string(g.width) + "x" + std::to_string(g.height) +
                        ", manifest says " + std::to_string(ds.image_size));
      }
      s.image = from_gray(g);
      s.labels = e.at("labels").get<std::vector<std::uint8_t>>();
      if (s.labels.size() != ds.num_classes()) throw DataError(s.id + ": label vector has wrong length");
      for (const auto& b : e.at("boxes")) {
        BoundingBox box{b.at("x").get<std::size_t>(), b.at("y").get<std::size_t>(),
                        b.at("w").get<std::size_t>(), b.at("h").get<std::size_t>(),
                        b.at("class").get<std::size_t>()};
        box.validate(ds.image_size, ds.image_size);
        if (box.class_id >= ds.num_classes()) throw DataError(s.id + ": box class out of range");
        s.boxes.push_back(box);
      }
      const std::string tag = e.value("split", "");
      if (tag == "train") out.splits.train.push_back(i);
      else if (tag == "validation") out.splits.validation.push_back(i);
      else if (tag == "test") {
        out.splits.test.push_back(i);
        if (!s.boxes.empty()) out.splits.annotated_test.push_back(i);
      }
      ds.samples.push_back(std::move(s));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace robustcam
