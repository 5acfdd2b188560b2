#pragma once

#include <cstddef>
#include <string>

#include "robustcam/errors.hpp"

namespace robustcam {

// Axis-aligned pixel rectangle [x, x+w) x [y, y+h) tagged with its class.
struct BoundingBox {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;
  std::size_t class_id = 0;

  std::size_t area() const { return w * h; }
  bool contains(std::size_t px, std::size_t py) const {
    return px >= x && px < x + w && py >= y && py < y + h;
  }

  void validate(std::size_t image_height, std::size_t image_width) const {
    if (w == 0 || h == 0 || x + w > image_width || y + h > image_height) {
      throw DataError("bounding box (" + std::to_string(x) + "," + std::to_string(y) + "," +
                      std::to_string(w) + "," + std::to_string(h) + ") is empty or outside " +
                      std::to_string(image_width) + "x" + std::to_string(image_height) +
                      " image");
    }
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

}  // namespace robustcam
