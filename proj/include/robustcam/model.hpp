#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustcam/errors.hpp"
#include "robustcam/ops.hpp"
#include "robustcam/random.hpp"
#include "robustcam/tape.hpp"
#include "robustcam/tensor.hpp"

namespace robustcam {

struct BlockSpec {
  std::size_t layers = 4;
  std::size_t growth = 12;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

// Densely connected backbone truncated after a few blocks so the last
// feature maps stay at high resolution:
//
//   stem conv3x3 (stride 2 when stem_downsample >= 2) -> relu
//        [-> maxpool when stem_downsample == 4]
//   for each block: layers x { relu(conv3x3(concat(all previous))) }
//        transition: relu(conv1x1) [-> maxpool when its downsample == 2]
//   features -> GAP -> linear head -> sigmoid
struct ModelArch {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t num_classes = 4;
  std::size_t stem_channels = 16;
  std::size_t stem_downsample = 4;
  std::vector<BlockSpec> blocks{{4, 12}, {4, 12}};
  std::vector<std::size_t> transition_channels{32, 64};
  std::vector<std::size_t> transition_downsample{2, 1};
  std::size_t min_feature_extent = 8;

  std::size_t total_downsample() const {
    std::size_t f = stem_downsample;
    for (auto d : transition_downsample) f *= d;
    return f;
  }
  std::size_t feature_height() const { return input_height / total_downsample(); }
  std::size_t feature_width() const { return input_width / total_downsample(); }
  std::size_t feature_channels() const {
    return transition_channels.empty() ? stem_channels : transition_channels.back();
  }

  void validate() const {
    if (input_height == 0 || input_width == 0) throw ConfigError("arch: empty input size");
    if (num_classes == 0) throw ConfigError("arch: num_classes must be positive");
    if (stem_channels == 0) throw ConfigError("arch: stem_channels must be positive");
    if (stem_downsample != 1 && stem_downsample != 2 && stem_downsample != 4) {
      throw ConfigError("arch: stem_downsample must be 1, 2 or 4");
    }
    if (transition_channels.size() != blocks.size() ||
        transition_downsample.size() != blocks.size()) {
      throw ConfigError("arch: need one transition (channels, downsample) per block");
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (blocks[i].layers == 0 || blocks[i].growth == 0 || transition_channels[i] == 0) {
        throw ConfigError("arch: block " + std::to_string(i) + " has an empty dimension");
      }
      if (transition_downsample[i] != 1 && transition_downsample[i] != 2) {
        throw ConfigError("arch: transition downsample must be 1 or 2");
      }
    }
    const std::size_t f = total_downsample();
    if (input_height % f != 0 || input_width % f != 0) {
      throw ConfigError("arch: input " + std::to_string(input_height) + "x" +
                        std::to_string(input_width) + " not divisible by total downsampling " +
                        std::to_string(f));
    }
    if (feature_height() < min_feature_extent || feature_width() < min_feature_extent) {
      throw ConfigError("arch: last feature maps would be " + std::to_string(feature_height()) +
                        "x" + std::to_string(feature_width()) + ", below the " +
                        std::to_string(min_feature_extent) + "x" +
                        std::to_string(min_feature_extent) + " minimum for localization");
    }
  }

  friend bool operator==(const ModelArch&, const ModelArch&) = default;
};

template <typename T>
struct ForwardVars {
  Var<T> features;  // [N, K, h, w], retained for class activation maps
  Var<T> logits;    // [N, C]
  Var<T> probs;     // [N, C]
};

template <typename T>
class BasicCamModel {
 public:
  using TensorT = BasicTensor<T>;

  struct Output {
    TensorT probs;
    TensorT logits;
    TensorT features;
  };

  BasicCamModel(ModelArch arch, std::vector<std::string> names, std::vector<TensorT> params)
      : arch_(std::move(arch)), names_(std::move(names)), params_(std::move(params)) {
    arch_.validate();
    const auto expected = parameter_shapes(arch_);
    if (expected.size() != params_.size() || names_.size() != params_.size()) {
      throw ShapeError("model: expected " + std::to_string(expected.size()) +
                       " parameter tensors, got " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (expected[i].second != params_[i].shape() || expected[i].first != names_[i]) {
        throw ShapeError("model: parameter " + names_[i] + " " +
                         to_string(params_[i].shape()) + " does not match architecture (" +
                         expected[i].first + " " + to_string(expected[i].second) + ")");
      }
    }
  }

  // Names and shapes of all parameters in declaration order.
  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelArch& arch) {
    std::vector<std::pair<std::string, Shape>> out;
    std::size_t channels = arch.stem_channels;
    out.push_back({"stem.weight", {arch.stem_channels, 1, 3, 3}});
    out.push_back({"stem.bias", {arch.stem_channels}});
    for (std::size_t b = 0; b < arch.blocks.size(); ++b) {
      const auto& block = arch.blocks[b];
      for (std::size_t l = 0; l < block.layers; ++l) {
        const std::string prefix = "block" + std::to_string(b) + ".layer" + std::to_string(l);
        out.push_back({prefix + ".weight", {block.growth, channels, 3, 3}});
        out.push_back({prefix + ".bias", {block.growth}});
        channels += block.growth;
      }
      const std::string prefix = "transition" + std::to_string(b);
      out.push_back({prefix + ".weight", {arch.transition_channels[b], channels, 1, 1}});
      out.push_back({prefix + ".bias", {arch.transition_channels[b]}});
      channels = arch.transition_channels[b];
    }
    out.push_back({"head.weight", {arch.num_classes, channels}});
    out.push_back({"head.bias", {arch.num_classes}});
    return out;
  }

  const ModelArch& arch() const noexcept { return arch_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  std::span<const TensorT> parameters() const noexcept { return params_; }
  std::span<TensorT> parameters() noexcept { return params_; }

  const TensorT& head_weight() const { return params_[params_.size() - 2]; }
  const TensorT& head_bias() const { return params_.back(); }
  TensorT& head_weight() { return params_[params_.size() - 2]; }
  TensorT& head_bias() { return params_.back(); }

  std::vector<Var<T>> bind(Tape<T>& tape) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.variable(p));
    return vars;
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != 1 || s[2] != arch_.input_height || s[3] != arch_.input_width) {
      throw ShapeError("model: expected input [N,1," + std::to_string(arch_.input_height) + "," +
                       std::to_string(arch_.input_width) + "], got " + to_string(s));
    }
  }

  ForwardVars<T> forward(std::span<const Var<T>> params, Var<T> input) const {
    check_input(input.shape());
    if (params.size() != params_.size()) throw ShapeError("model: wrong number of bound parameters");
    std::size_t next = 0;
    auto take = [&]() { return params[next++]; };

    const std::size_t stem_stride = arch_.stem_downsample >= 2 ? 2 : 1;
    Var<T> w = take();
    Var<T> x = relu(conv2d(input, w, take(), stem_stride, 1));
    if (arch_.stem_downsample == 4) x = max_pool2x2(x);

    for (std::size_t b = 0; b < arch_.blocks.size(); ++b) {
      std::vector<Var<T>> maps{x};
      for (std::size_t l = 0; l < arch_.blocks[b].layers; ++l) {
        Var<T> joined = maps.size() == 1 ? maps[0] : concat_channels<T>(maps);
        w = take();
        maps.push_back(relu(conv2d(joined, w, take(), 1, 1)));
      }
      w = take();
      x = relu(conv2d(concat_channels<T>(maps), w, take(), 1, 0));
      if (arch_.transition_downsample[b] == 2) x = max_pool2x2(x);
    }

    w = take();
    Var<T> logits = linear(global_average_pool(x), w, take());
    return ForwardVars<T>{x, logits, sigmoid(logits)};
  }

  Output predict(const TensorT& batch) const {
    check_input(batch.shape());
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& p : params_) vars.push_back(tape.constant(p));
    const auto out = forward(vars, tape.constant(batch));
    return Output{out.probs.value(), out.logits.value(), out.features.value()};
  }

  template <typename U>
  BasicCamModel<U> cast() const {
    std::vector<BasicTensor<U>> params;
    for (const auto& p : params_) params.push_back(p.template cast<U>());
    return BasicCamModel<U>(arch_, names_, std::move(params));
  }

  friend bool bit_identical(const BasicCamModel& a, const BasicCamModel& b) {
    if (!(a.arch_ == b.arch_) || a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (!bit_identical(a.params_[i], b.params_[i])) return false;
    }
    return true;
  }

 private:
  ModelArch arch_;
  std::vector<std::string> names_;
  std::vector<TensorT> params_;
};

using CamModel = BasicCamModel<float>;

// Convolution weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases and the
// whole head start at zero, so an untrained model predicts 0.5 everywhere.
template <typename T = float>
BasicCamModel<T> init_model(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  std::vector<std::string> names;
  std::vector<BasicTensor<T>> params;
  for (auto& [name, shape] : BasicCamModel<T>::parameter_shapes(arch)) {
    BasicTensor<T> p(shape);
    if (shape.size() > 1 && name.rfind("head.", 0) != 0) {
      const std::size_t fan_in = shape_size(shape) / shape[0];
      const double bound = std::sqrt(6.0 / double(fan_in));
      for (auto& v : p.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    names.push_back(name);
    params.push_back(std::move(p));
  }
  return BasicCamModel<T>(arch, std::move(names), std::move(params));
}

}  // namespace robustcam
