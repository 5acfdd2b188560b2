#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "robustcam/ops.hpp"
#include "robustcam/random.hpp"
#include "robustcam/tape.hpp"
#include "robustcam/tensor.hpp"

namespace testing_support {

using robustcam::BasicTensor;
using robustcam::Rng;
using robustcam::Shape;
using robustcam::Tape;
using robustcam::Var;

template <typename T>
BasicTensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

struct GradCheck {
  std::size_t coordinates = 0;
  std::size_t agreeing = 0;
  double worst_relative = 0.0;

  double fraction() const { return coordinates ? double(agreeing) / double(coordinates) : 1.0; }
};

// Builds a scalar loss on a fresh tape from the given leaf values.
using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double evaluate(const LossBuilder& build, const std::vector<BasicTensor<double>>& leaves) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& l : leaves) vars.push_back(tape.variable(l));
  return build(tape, vars).value().item();
}

// Compares reverse-mode gradients with central differences of step h. A
// coordinate agrees when |a - n| <= rel * max(|a|, |n|), or both are below
// abs_floor in magnitude difference.
inline GradCheck check_gradients(const LossBuilder& build, std::vector<BasicTensor<double>> leaves,
                                 double h = 1e-4, double rel = 1e-4, double abs_floor = 1e-8,
                                 std::size_t max_coords_per_leaf = 0, std::uint64_t seed = 1) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& l : leaves) vars.push_back(tape.variable(l));
  const auto grads = tape.backward(build(tape, vars), vars);

  GradCheck result;
  Rng rng(seed);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    std::vector<std::size_t> coords(leaves[k].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords_per_leaf && coords.size() > max_coords_per_leaf) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(max_coords_per_leaf);
    }
    for (std::size_t i : coords) {
      const double saved = leaves[k][i];
      leaves[k][i] = saved + h;
      const double up = evaluate(build, leaves);
      leaves[k][i] = saved - h;
      const double down = evaluate(build, leaves);
      leaves[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[k][i];
      const double diff = std::abs(analytic - numeric);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      ++result.coordinates;
      if (diff <= abs_floor || diff <= rel * scale) ++result.agreeing;
      if (scale > 0) result.worst_relative = std::max(result.worst_relative, diff / scale);
    }
  }
  return result;
}

// Scalar probe: sum(op_output * weights) for fixed random weights, so every
// output coordinate contributes a distinct sensitivity.
inline Var<double> probe(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor<double>(rng, out.shape());
  return robustcam::sum(robustcam::mul(out, tape.constant(std::move(w))));
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("robustcam_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
