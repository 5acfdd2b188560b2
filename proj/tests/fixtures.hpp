#pragma once

#include <cmath>
#include <cstdint>

#include "robustcam/data.hpp"
#include "robustcam/model.hpp"

namespace fixtures {

// 16x16 inputs, 3 classes, one dense block: 8x8 feature maps.
inline robustcam::ModelArch tiny_arch() {
  robustcam::ModelArch a;
  a.input_height = 16;
  a.input_width = 16;
  a.num_classes = 3;
  a.stem_channels = 4;
  a.stem_downsample = 2;
  a.blocks = {{2, 3}};
  a.transition_channels = {5};
  a.transition_downsample = {1};
  return a;
}

// A freshly initialized model with a random head, so that logits, CAMs and
// input gradients are non-trivial.
template <typename T = float>
robustcam::BasicCamModel<T> random_model(const robustcam::ModelArch& arch, std::uint64_t seed) {
  auto m = robustcam::init_model<T>(arch, seed);
  robustcam::Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double bound = 1.0 / std::sqrt(double(arch.feature_channels()));
  for (auto& v : m.head_weight().data()) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : m.head_bias().data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  return m;
}

inline robustcam::GenerateConfig tiny_data_config(std::size_t n = 120) {
  robustcam::GenerateConfig g;
  g.n_samples = n;
  g.image_size = 16;
  g.n_classes = 3;
  g.min_shape_size = 5;
  g.max_shape_size = 8;
  g.class_probability = {0.4, 0.4, 0.2};
  return g;
}

struct TinySet {
  robustcam::Dataset dataset;
  robustcam::DatasetSplits splits;
};

inline TinySet tiny_set(std::uint64_t seed = 1, std::size_t n = 120) {
  TinySet t;
  t.dataset = robustcam::generate_dataset(tiny_data_config(n), seed);
  t.splits = robustcam::split_dataset(t.dataset, {}, seed);
  return t;
}

}  // namespace fixtures
