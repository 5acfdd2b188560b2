#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "robustcam/box.hpp"
#include "robustcam/colormap.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/image_io.hpp"
#include "robustcam/model.hpp"
#include "robustcam/ops.hpp"
#include "robustcam/tape.hpp"

namespace robustcam {

// 8-bit map at input resolution.
struct ScaledMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major

  std::uint8_t at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

struct Cam {
  std::size_t class_id = 0;
  BasicTensor<float> raw;  // [h, w], feature resolution
  ScaledMap scaled;        // [H, W], input resolution
};

struct SaliencyMap {
  std::size_t class_id = 0;
  BasicTensor<float> values;  // [H, W], in [0,1]
};

namespace detail {

template <typename T>
void check_class(const BasicCamModel<T>& model, std::size_t class_id) {
  if (class_id >= model.arch().num_classes) {
    throw ConfigError("class id " + std::to_string(class_id) + " out of range for " +
                      std::to_string(model.arch().num_classes) + " classes");
  }
}

template <typename T>
void check_single_image(const BasicCamModel<T>& model, const BasicTensor<T>& image) {
  model.check_input(image.shape());
  if (image.dim(0) != 1) throw ShapeError("expected a single image [1,1,H,W], got " + to_string(image.shape()));
}

}  // namespace detail

// Class activation map: raw[u,v] = sum_k W[class,k] * features[k,u,v]. The
// head bias is excluded, so mean(raw) + bias equals the class logit.
template <typename T>
BasicTensor<T> cam_from_features(const BasicTensor<T>& features, const BasicTensor<T>& head_weight,
                                 std::size_t class_id) {
  const std::size_t k = features.dim(1), h = features.dim(2), w = features.dim(3);
  BasicTensor<T> raw(Shape{h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      acc += double(head_weight[class_id * k + c]) * double(features[c * h * w + p]);
    }
    raw[p] = static_cast<T>(acc);
  }
  return raw;
}

template <typename T>
BasicTensor<T> compute_cam(const BasicCamModel<T>& model, const BasicTensor<T>& image, std::size_t class_id) {
  detail::check_class(model, class_id);
  detail::check_single_image(model, image);
  return cam_from_features(model.predict(image).features, model.head_weight(), class_id);
}

// Bilinear (align-corners) upsampling to the target size, then min-max
// rescale to integers 0..255, rounding half up. Constant maps become zero.
template <typename T>
ScaledMap postprocess_cam(const BasicTensor<T>& raw, std::size_t height, std::size_t width) {
  if (raw.rank() != 2) throw ShapeError("postprocess_cam: expected [h,w], got " + to_string(raw.shape()));
  const auto up = bilinear_upsample(raw.reshaped(Shape{1, raw.dim(0), raw.dim(1)}), height, width);
  ScaledMap out{height, width, std::vector<std::uint8_t>(height * width, 0)};
  const auto [lo_it, hi_it] = std::minmax_element(up.data().begin(), up.data().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < up.size(); ++i) {
    const double v = (double(up[i]) - lo) / (hi - lo) * 255.0;
    out.values[i] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
  }
  return out;
}

template <typename T>
Cam make_cam(const BasicCamModel<T>& model, const BasicTensor<T>& image, std::size_t class_id) {
  Cam cam;
  cam.class_id = class_id;
  cam.raw = compute_cam(model, image, class_id).template cast<float>();
  cam.scaled = postprocess_cam(cam.raw, model.arch().input_height, model.arch().input_width);
  return cam;
}

// |g| clipped to mean +- 3 standard deviations (population, over the map),
// then min-max scaled to [0,1]. Constant maps become zero.
template <typename T>
BasicTensor<float> postprocess_saliency(const BasicTensor<T>& gradient) {
  const std::size_t n = gradient.size();
  std::vector<double> mag(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mag[i] = std::abs(double(gradient[i]));
    sum += mag[i];
  }
  const double mean = sum / double(n);
  double var = 0.0;
  for (double v : mag) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(n));
  for (double& v : mag) v = std::clamp(v, mean - 3.0 * sd, mean + 3.0 * sd);
  const auto [lo_it, hi_it] = std::minmax_element(mag.begin(), mag.end());
  const double lo = *lo_it, hi = *hi_it;
  BasicTensor<float> out(gradient.shape(), 0.0f);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>((mag[i] - lo) / (hi - lo));
  return out;
}

// d logit_class / d image, with the model held fixed.
template <typename T>
BasicTensor<T> logit_input_gradient(const BasicCamModel<T>& model, const BasicTensor<T>& image,
                                    std::size_t class_id) {
  detail::check_class(model, class_id);
  detail::check_single_image(model, image);
  Tape<T> tape;
  std::vector<Var<T>> params;
  for (const auto& p : model.parameters()) params.push_back(tape.constant(p));
  const Var<T> input = tape.variable(image);
  const auto out = model.forward(params, input);
  BasicTensor<T> pick(out.logits.shape(), T{});
  pick[class_id] = T{1};
  const Var<T> score = sum(mul(out.logits, tape.constant(std::move(pick))));
  return tape.gradient(score, input);
}

template <typename T>
SaliencyMap saliency(const BasicCamModel<T>& model, const BasicTensor<T>& image, std::size_t class_id) {
  const auto grad = logit_input_gradient(model, image, class_id);
  return SaliencyMap{class_id, postprocess_saliency(grad.reshaped(Shape{grad.dim(2), grad.dim(3)}))};
}

// Fraction of total saliency that falls inside the union of the boxes.
inline double saliency_mass_in_boxes(const SaliencyMap& map, std::span<const BoundingBox> boxes) {
  const std::size_t h = map.values.dim(0), w = map.values.dim(1);
  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = map.values[y * w + x];
      total += v;
      if (std::any_of(boxes.begin(), boxes.end(), [&](const BoundingBox& b) { return b.contains(x, y); })) {
        inside += v;
      }
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

inline constexpr double kOverlayAlpha = 0.4;

// Grayscale base with the heat-mapped CAM blended on top; the blend weight
// is kOverlayAlpha * cam/255, so a zero CAM leaves the base untouched. Box
// outlines are drawn in blue.
inline RgbImage render_overlay_image(const BasicTensor<float>& image, const ScaledMap& cam,
                                     std::span<const BoundingBox> boxes) {
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (cam.height != h || cam.width != w) {
    throw ShapeError("render_overlay: CAM is " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                     ", image is " + std::to_string(w) + "x" + std::to_string(h));
  }
  RgbImage out{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double gray = std::floor(std::clamp(double(image[y * w + x]), 0.0, 1.0) * 255.0 + 0.5);
      const std::uint8_t v = cam.at(x, y);
      const double a = kOverlayAlpha * v / 255.0;
      const auto& color = kHeatColormap[v];
      std::uint8_t* px = out.at(x, y);
      for (int c = 0; c < 3; ++c) {
        px[c] = static_cast<std::uint8_t>(std::floor((1.0 - a) * gray + a * color[c] + 0.5));
      }
    }
  }
  for (const auto& b : boxes) {
    b.validate(h, w);
    auto paint = [&](std::size_t x, std::size_t y) {
      std::uint8_t* px = out.at(x, y);
      px[0] = 0;
      px[1] = 0;
      px[2] = 255;
    };
    for (std::size_t x = b.x; x < b.x + b.w; ++x) {
      paint(x, b.y);
      paint(x, b.y + b.h - 1);
    }
    for (std::size_t y = b.y; y < b.y + b.h; ++y) {
      paint(b.x, y);
      paint(b.x + b.w - 1, y);
    }
  }
  return out;
}

inline void render_overlay(const BasicTensor<float>& image, const ScaledMap& cam,
                           std::span<const BoundingBox> boxes, const std::filesystem::path& out_path) {
  write_ppm(out_path, render_overlay_image(image, cam, boxes));
}

inline GrayImage to_gray(const ScaledMap& map) { return GrayImage{map.width, map.height, map.values}; }

}  // namespace robustcam
