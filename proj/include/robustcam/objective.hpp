#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "robustcam/errors.hpp"
#include "robustcam/tape.hpp"
#include "robustcam/tensor.hpp"

namespace robustcam {

// N x C matrix of {0,1} labels, row-major.
class LabelBatch {
 public:
  LabelBatch() = default;
  LabelBatch(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ShapeError("label batch: " + std::to_string(values_.size()) +
                       " entries for " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
    for (auto v : values_) {
      if (v > 1) throw DataError("label batch: labels must be 0 or 1");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  const std::vector<std::uint8_t>& values() const noexcept { return values_; }

  LabelBatch select(std::span<const std::size_t> rows) const {
    std::vector<std::uint8_t> out;
    out.reserve(rows.size() * cols_);
    for (auto r : rows) {
      out.insert(out.end(), values_.begin() + r * cols_, values_.begin() + (r + 1) * cols_);
    }
    return LabelBatch(rows.size(), cols_, std::move(out));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> values_;
};

struct BetaPolicy {
  enum class Mode { batch_global, per_class };
  Mode mode = Mode::batch_global;
  double cap = 100.0;
  double zero_positive_fallback = 100.0;

  void validate() const {
    if (!(cap >= 1.0)) throw ConfigError("beta cap must be >= 1");
  }
};

// Positive-label weight: one value in batch-global mode, one per class
// otherwise.
struct Beta {
  std::vector<double> values;

  double for_class(std::size_t c) const { return values.size() == 1 ? values[0] : values.at(c); }
};

inline Beta compute_beta(const LabelBatch& labels, const BetaPolicy& policy = {}) {
  policy.validate();
  if (labels.rows() == 0) throw DataError("compute_beta: empty label batch");
  const auto ratio = [&](std::size_t zeros, std::size_t ones) {
    const double raw = ones == 0 ? policy.zero_positive_fallback
                                 : static_cast<double>(zeros) / static_cast<double>(ones);
    return std::clamp(raw, 1.0 / policy.cap, policy.cap);
  };
  Beta beta;
  if (policy.mode == BetaPolicy::Mode::batch_global) {
    std::size_t ones = 0;
    for (auto v : labels.values()) ones += v;
    beta.values.push_back(ratio(labels.values().size() - ones, ones));
  } else {
    for (std::size_t c = 0; c < labels.cols(); ++c) {
      std::size_t ones = 0;
      for (std::size_t r = 0; r < labels.rows(); ++r) ones += labels(r, c);
      beta.values.push_back(ratio(labels.rows() - ones, ones));
    }
  }
  return beta;
}

inline constexpr double kProbabilityClamp = 1e-6;

namespace detail {

inline void check_loss_shapes(const Shape& probs, const LabelBatch& labels, const Beta& beta) {
  if (probs.size() != 2 || probs[0] != labels.rows() || probs[1] != labels.cols()) {
    throw ShapeError("weighted_bce: probabilities " + to_string(probs) +
                     " do not match labels [" + std::to_string(labels.rows()) + "," +
                     std::to_string(labels.cols()) + "]");
  }
  if (beta.values.size() != 1 && beta.values.size() != labels.cols()) {
    throw ShapeError("weighted_bce: beta has " + std::to_string(beta.values.size()) +
                     " entries for " + std::to_string(labels.cols()) + " classes");
  }
}

}  // namespace detail

// Per-sample weighted cross-entropy sums
//   -sum_j [ beta*y_j*log(p_j) + (1-y_j)*log(1-p_j) ]
// with p clamped to [tau, 1-tau].
template <typename T>
std::vector<double> weighted_bce_per_sample(const BasicTensor<T>& probs, const LabelBatch& labels,
                                            const Beta& beta) {
  detail::check_loss_shapes(probs.shape(), labels, beta);
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  std::vector<double> out(labels.rows(), 0.0);
  for (std::size_t n = 0; n < labels.rows(); ++n) {
    double acc = 0.0;
    for (std::size_t j = 0; j < labels.cols(); ++j) {
      const double p = std::clamp(static_cast<double>(probs[n * labels.cols() + j]), lo, hi);
      acc -= labels(n, j) ? beta.for_class(j) * std::log(p) : std::log(1.0 - p);
    }
    out[n] = acc;
  }
  return out;
}

// Batch mean of the per-sample sums, recorded for differentiation.
template <typename T>
Var<T> weighted_bce(Var<T> probs, const LabelBatch& labels, const Beta& beta) {
  const auto per_sample = weighted_bce_per_sample(probs.value(), labels, beta);
  double total = 0.0;
  for (double v : per_sample) total += v;
  const double count = static_cast<double>(labels.rows());
  const std::size_t pi = probs.index;
  return probs.tape->record(
      BasicTensor<T>::scalar(static_cast<T>(total / count)), {probs},
      [labels, beta, count, pi](const Tape<T>& tape, const BasicTensor<T>& go,
                                std::span<BasicTensor<T>* const> grads) {
        const auto& pv = tape.value_at(pi);
        const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
        const double scale = static_cast<double>(go[0]) / count;
        auto& gp = *grads[0];
        for (std::size_t n = 0; n < labels.rows(); ++n) {
          for (std::size_t j = 0; j < labels.cols(); ++j) {
            const std::size_t i = n * labels.cols() + j;
            const double p = pv[i];
            if (p < lo || p > hi) continue;  // clamped: locally constant
            const double d = labels(n, j) ? -beta.for_class(j) / p : 1.0 / (1.0 - p);
            gp[i] += static_cast<T>(scale * d);
          }
        }
      });
}

}  // namespace robustcam
