#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "robustcam/errors.hpp"

// Binary Netpbm files: PGM (P5) grayscale and PPM (P6) RGB, 8-bit only.

namespace robustcam {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB

  std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 3]; }
};

namespace detail {

inline void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t width,
                         std::size_t height, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

inline std::size_t read_header_number(std::istream& in, const std::string& path) {
  int c = in.peek();
  while (c != EOF) {
    if (std::isspace(c)) {
      in.get();
    } else if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else {
      break;
    }
    c = in.peek();
  }
  std::size_t value = 0;
  if (!(in >> value)) throw DataError(path + ": malformed Netpbm header");
  return value;
}

}  // namespace detail

inline void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) {
    throw DataError("write_pgm: pixel count does not match image size");
  }
  detail::write_netpbm(path, "P5", image.width, image.height, image.pixels);
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) {
    throw DataError("write_ppm: pixel count does not match image size");
  }
  detail::write_netpbm(path, "P6", image.width, image.height, image.pixels);
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError(path.string() + ": not a binary PGM (P5) file");
  GrayImage image;
  image.width = detail::read_header_number(in, path.string());
  image.height = detail::read_header_number(in, path.string());
  const std::size_t maxval = detail::read_header_number(in, path.string());
  if (maxval != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  in.get();  // single whitespace after maxval
  image.pixels.resize(image.width * image.height);
  in.read(reinterpret_cast<char*>(image.pixels.data()),
          static_cast<std::streamsize>(image.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.pixels.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  return image;
}

}  // namespace robustcam
