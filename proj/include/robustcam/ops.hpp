#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "robustcam/errors.hpp"
#include "robustcam/tape.hpp"
#include "robustcam/tensor.hpp"

// Differentiable primitives recorded on a Tape. Layouts are NCHW for images
// and feature maps, [N, K] for vectors.

namespace robustcam {

namespace detail {

inline constexpr std::size_t kColumnTile = 512;

// C[m x n] += A[m x k] * B[k x n]. Every C element accumulates its k
// products in increasing k order regardless of tiling.
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColumnTile) {
    const std::size_t j1 = std::min(n, j0 + kColumnTile);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[i * k + p];
        if (av == T{}) continue;
        T* crow = c + i * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    T* crow = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[i * k + p];
      if (av == T{}) continue;
      const T* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T, as row dot products split over eight
// lanes (fixed summation order).
template <typename T>
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  constexpr std::size_t kLanes = 8;
  const std::size_t body = n - n % kLanes;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T lanes[kLanes] = {};
      for (std::size_t j = 0; j < body; j += kLanes) {
        for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += arow[j + l] * brow[j + l];
      }
      T acc{};
      for (std::size_t l = 0; l < kLanes; ++l) acc += lanes[l];
      for (std::size_t j = body; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;  // input, per sample
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

// col[(c*kh + i)*kw + j][oy*out_w + ox]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
          T* out = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<long>(g.height)) {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) out[ox] = T{};
            continue;
          }
          const T* src = x + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
            out[ox] = (xx < 0 || xx >= static_cast<long>(g.width)) ? T{} : src[xx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          T* dst = dx + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
            if (xx >= 0 && xx < static_cast<long>(g.width)) dst[xx] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " +
                     std::to_string(rank) + ", got " + to_string(s));
  }
}

}  // namespace detail

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                                      std::size_t stride, std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// Cross-correlation (no kernel flip).
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride,
              std::size_t padding) {
  const auto& x = input.value();
  const auto& w = kernel.value();
  const auto& b = bias.value();
  detail::require_rank(x.shape(), 4, "conv2d", "input");
  detail::require_rank(w.shape(), 4, "conv2d", "kernel");
  detail::require_rank(b.shape(), 1, "conv2d", "bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t n = x.dim(0), cout = w.dim(0);
  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, padding, 0, 0};
  if (w.dim(1) != g.channels) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                     " input channels, input " + to_string(x.shape()) + " has " +
                     std::to_string(g.channels));
  }
  if (b.dim(0) != cout) {
    throw ShapeError("conv2d: bias " + to_string(b.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  }
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding) {
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) +
                     " larger than padded input " + to_string(x.shape()));
  }
  g.out_h = conv_output_extent(g.height, g.kh, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kw, stride, padding);

  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = cout * g.positions();
  BasicTensor<T> out(Shape{n, cout, g.out_h, g.out_w});
  std::vector<T> col(g.is_pointwise() ? 0 : g.patch() * g.positions());
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.data().data() + s * out_stride;
    for (std::size_t co = 0; co < cout; ++co) {
      std::fill(o + co * g.positions(), o + (co + 1) * g.positions(), b[co]);
    }
    const T* src = x.data().data() + s * in_stride;
    if (!g.is_pointwise()) {
      detail::im2col(src, g, col.data());
      src = col.data();
    }
    detail::gemm_acc(cout, g.positions(), g.patch(), w.data().data(), src, o);
  }

  const std::size_t xi = input.index, wi = kernel.index;
  return input.tape->record(
      std::move(out), {input, kernel, bias},
      [g, n, cout, in_stride, out_stride, xi, wi](
          const Tape<T>& tape, const BasicTensor<T>& grad_out,
          std::span<BasicTensor<T>* const> grads) {
        const auto& xv = tape.value_at(xi);
        const auto& wv = tape.value_at(wi);
        const std::size_t positions = g.positions(), patch = g.patch();
        std::vector<T> col(g.is_pointwise() ? 0 : patch * positions);
        std::vector<T> dcol(grads[0] && !g.is_pointwise() ? patch * positions : 0);
        for (std::size_t s = 0; s < n; ++s) {
          const T* go = grad_out.data().data() + s * out_stride;
          if (grads[2]) {
            auto db = grads[2]->data();
            for (std::size_t co = 0; co < cout; ++co) {
              double acc = 0.0;
              for (std::size_t p = 0; p < positions; ++p) acc += go[co * positions + p];
              db[co] += static_cast<T>(acc);
            }
          }
          if (grads[1]) {
            const T* src = xv.data().data() + s * in_stride;
            if (!g.is_pointwise()) {
              detail::im2col(src, g, col.data());
              src = col.data();
            }
            detail::gemm_nt_acc(cout, positions, patch, go, src, grads[1]->data().data());
          }
          if (grads[0]) {
            T* dx = grads[0]->data().data() + s * in_stride;
            if (g.is_pointwise()) {
              detail::gemm_tn_acc(cout, positions, patch, wv.data().data(), go, dx);
            } else {
              std::fill(dcol.begin(), dcol.end(), T{});
              detail::gemm_tn_acc(cout, positions, patch, wv.data().data(), go, dcol.data());
              detail::col2im_acc(dcol.data(), g, dx);
            }
          }
        }
      });
}

// x[N, K] * W^T + b, with W [C, K] and b [C].
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  detail::require_rank(x.shape(), 2, "linear", "input");
  detail::require_rank(w.shape(), 2, "linear", "weight");
  detail::require_rank(b.shape(), 1, "linear", "bias");
  const std::size_t n = x.dim(0), k = x.dim(1), c = w.dim(0);
  if (w.dim(1) != k || b.dim(0) != c) {
    throw ShapeError("linear: input " + to_string(x.shape()) + ", weight " +
                     to_string(w.shape()) + ", bias " + to_string(b.shape()) +
                     " are incompatible");
  }
  BasicTensor<T> out(Shape{n, c});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < c; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < k; ++i) acc += double(w[j * k + i]) * double(x[s * k + i]);
      out[s * c + j] = static_cast<T>(acc);
    }
  }
  const std::size_t xi = input.index, wi = weight.index;
  return input.tape->record(
      std::move(out), {input, weight, bias},
      [n, k, c, xi, wi](const Tape<T>& tape, const BasicTensor<T>& go,
                        std::span<BasicTensor<T>* const> grads) {
        const auto& xv = tape.value_at(xi);
        const auto& wv = tape.value_at(wi);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t j = 0; j < c; ++j) {
            const T g = go[s * c + j];
            if (grads[2]) (*grads[2])[j] += g;
            for (std::size_t i = 0; i < k; ++i) {
              if (grads[0]) (*grads[0])[s * k + i] += g * wv[j * k + i];
              if (grads[1]) (*grads[1])[j * k + i] += g * xv[s * k + i];
            }
          }
        }
      });
}

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Var<T> elementwise(Var<T> input, Fwd fwd, Deriv deriv) {
  const auto& x = input.value();
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  const std::size_t xi = input.index;
  const std::size_t oi = input.tape->size();  // index the output will get
  return input.tape->record(
      std::move(out), {input},
      [xi, oi, deriv](const Tape<T>& tape, const BasicTensor<T>& go,
                      std::span<BasicTensor<T>* const> grads) {
        const auto& xv = tape.value_at(xi);
        const auto& yv = tape.value_at(oi);
        auto& gx = *grads[0];
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * deriv(xv[i], yv[i]);
      });
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> input) {
  return detail::elementwise(
      input, [](T v) { return v > T{} || std::isnan(v) ? v : T{}; },  // NaN passes through
      [](T x, T) { return x > T{} ? T{1} : T{}; });
}

template <typename T>
T sigmoid_value(T z) {
  if (z >= T{}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(Var<T> input) {
  return detail::elementwise(
      input, [](T v) { return sigmoid_value(v); },
      [](T, T y) { return y * (T{1} - y); });
}

// 2x2 window, stride 2, odd trailing rows/columns dropped. Ties go to the
// first element in row-major window order.
template <typename T>
Var<T> max_pool2x2(Var<T> input) {
  const auto& x = input.value();
  detail::require_rank(x.shape(), 4, "max_pool2x2", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("max_pool2x2: input too small " + to_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  BasicTensor<T> out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (auto k : cand) {
          if (src[k] > src[best]) best = k;
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = src[best];
        (*argmax)[o] = plane * h * w + best;
      }
    }
  }
  return input.tape->record(std::move(out), {input},
                            [argmax](const Tape<T>&, const BasicTensor<T>& go,
                                     std::span<BasicTensor<T>* const> grads) {
                              auto& gx = *grads[0];
                              for (std::size_t o = 0; o < go.size(); ++o) gx[(*argmax)[o]] += go[o];
                            });
}

// Concatenate [N, Ci, H, W] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = inputs.front().value();
  detail::require_rank(first.shape(), 4, "concat_channels", "input");
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const auto& v : inputs) {
    const auto& s = v.shape();
    if (s.size() != 4 || s[0] != n || s[2] != h || s[3] != w) {
      throw ShapeError("concat_channels: incompatible shapes " + to_string(first.shape()) +
                       " and " + to_string(s));
    }
    channels.push_back(s[1]);
    total += s[1];
  }
  BasicTensor<T> out(Shape{n, total, h, w});
  const std::size_t plane = h * w;
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto& v = inputs[k].value();
      const T* src = v.data().data() + s * channels[k] * plane;
      std::copy(src, src + channels[k] * plane,
                out.data().data() + (s * total + offset) * plane);
      offset += channels[k];
    }
  }
  std::vector<Var<T>> ins(inputs.begin(), inputs.end());
  return inputs.front().tape->record(
      std::move(out), std::move(ins),
      [channels, n, total, plane](const Tape<T>&, const BasicTensor<T>& go,
                                  std::span<BasicTensor<T>* const> grads) {
        for (std::size_t s = 0; s < n; ++s) {
          std::size_t offset = 0;
          for (std::size_t k = 0; k < channels.size(); ++k) {
            if (grads[k]) {
              const T* src = go.data().data() + (s * total + offset) * plane;
              T* dst = grads[k]->data().data() + s * channels[k] * plane;
              for (std::size_t i = 0; i < channels[k] * plane; ++i) dst[i] += src[i];
            }
            offset += channels[k];
          }
        }
      });
}

template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> inputs) {
  return concat_channels(std::span<const Var<T>>(inputs.begin(), inputs.size()));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  a.value().require_same_shape(b.value(), "add");
  BasicTensor<T> out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b},
                        [](const Tape<T>&, const BasicTensor<T>& go,
                           std::span<BasicTensor<T>* const> grads) {
                          for (auto* g : grads) {
                            if (g) *g += go;
                          }
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  a.value().require_same_shape(b.value(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.index, bi = b.index;
  return a.tape->record(std::move(out), {a, b},
                        [ai, bi](const Tape<T>& tape, const BasicTensor<T>& go,
                                 std::span<BasicTensor<T>* const> grads) {
                                            const auto& x = tape.value_at(ai);
                          const auto& y = tape.value_at(bi);
                          for (std::size_t i = 0; i < go.size(); ++i) {
                            if (grads[0]) (*grads[0])[i] += go[i] * y[i];
                            if (grads[1]) (*grads[1])[i] += go[i] * x[i];
                          }
                        });
}

// [N, K, H, W] -> [N, K], spatial mean with a double accumulator.
template <typename T>
Var<T> global_average_pool(Var<T> input) {
  const auto& x = input.value();
  detail::require_rank(x.shape(), 4, "global_average_pool", "input");
  const std::size_t n = x.dim(0), k = x.dim(1), plane = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{n, k});
  for (std::size_t i = 0; i < n * k; ++i) {
    double acc = 0.0;
    const T* src = x.data().data() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    out[i] = static_cast<T>(acc / static_cast<double>(plane));
  }
  return input.tape->record(std::move(out), {input},
                            [plane](const Tape<T>&, const BasicTensor<T>& go,
                                    std::span<BasicTensor<T>* const> grads) {
                              auto& gx = *grads[0];
                              const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
                              for (std::size_t i = 0; i < go.size(); ++i) {
                                const T g = go[i] * inv;
                                T* dst = gx.data().data() + i * plane;
                                for (std::size_t p = 0; p < plane; ++p) dst[p] += g;
                              }
                            });
}

template <typename T>
Var<T> sum(Var<T> input) {
  const auto& x = input.value();
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  return input.tape->record(BasicTensor<T>::scalar(static_cast<T>(acc)), {input},
                            [](const Tape<T>&, const BasicTensor<T>& go,
                               std::span<BasicTensor<T>* const> grads) {
                              const T g = go[0];
                              for (auto& v : grads[0]->data()) v += g;
                            });
}

template <typename T>
Var<T> mean(Var<T> input) {
  const auto& x = input.value();
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  const double count = static_cast<double>(x.size());
  return input.tape->record(BasicTensor<T>::scalar(static_cast<T>(acc / count)), {input},
                            [count](const Tape<T>&, const BasicTensor<T>& go,
                                    std::span<BasicTensor<T>* const> grads) {
                              const T g = static_cast<T>(go[0] / count);
                              for (auto& v : grads[0]->data()) v += g;
                            });
}

// Stack equally shaped tensors along a new leading batch axis.
template <typename T>
Var<T> stack(std::span<const Var<T>> inputs) {
  if (inputs.empty()) throw ShapeError("stack: no inputs");
  const Shape inner = inputs.front().shape();
  for (const auto& v : inputs) {
    if (v.shape() != inner) {
      throw ShapeError("stack: shape " + to_string(v.shape()) + " differs from " +
                       to_string(inner));
    }
  }
  Shape shape{inputs.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  BasicTensor<T> out(shape);
  const std::size_t each = shape_size(inner);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& v = inputs[k].value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + k * each);
  }
  std::vector<Var<T>> ins(inputs.begin(), inputs.end());
  return inputs.front().tape->record(
      std::move(out), std::move(ins),
      [each](const Tape<T>&, const BasicTensor<T>& go, std::span<BasicTensor<T>* const> grads) {
        for (std::size_t k = 0; k < grads.size(); ++k) {
          if (!grads[k]) continue;
          for (std::size_t i = 0; i < each; ++i) (*grads[k])[i] += go[k * each + i];
        }
      });
}

// Align-corners bilinear resize of [K, h, w] maps to [K, H, W] with H >= h
// and W >= w. Corner samples are preserved exactly.
template <typename T>
BasicTensor<T> bilinear_upsample(const BasicTensor<T>& input, std::size_t out_h,
                                 std::size_t out_w) {
  detail::require_rank(input.shape(), 3, "bilinear_upsample", "input");
  const std::size_t k = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (out_h < h || out_w < w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " smaller than source " + to_string(input.shape()));
  }
  // Source coordinate as an integer index plus fractional weight. The
  // numerator is exact, so equal sizes map every sample onto itself.
  auto locate = [](std::size_t dst, std::size_t src_n, std::size_t dst_n) {
    if (dst_n == 1 || src_n == 1) return std::pair<std::size_t, double>{0, 0.0};
    const std::size_t num = dst * (src_n - 1);
    const std::size_t base = num / (dst_n - 1);
    const double frac = static_cast<double>(num % (dst_n - 1)) / static_cast<double>(dst_n - 1);
    return std::pair<std::size_t, double>{base, frac};
  };
  BasicTensor<T> out(Shape{k, out_h, out_w});
  for (std::size_t c = 0; c < k; ++c) {
    const T* src = input.data().data() + c * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto [y0, fy] = locate(y, h, out_h);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto [x0, fx] = locate(x, w, out_w);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
        const double bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
        out[(c * out_h + y) * out_w + x] = static_cast<T>((1.0 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

}  // namespace robustcam
