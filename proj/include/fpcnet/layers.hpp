#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fpcnet/tensor.hpp"

namespace fpcnet {

enum class LayerKind { PointwiseConv, Conv2d, MaxPool, AvgPool, Maxout, ReLU, BReLU, ConcatChannels };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::PointwiseConv: return "pointwise_conv";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::AvgPool: return "avg_pool";
    case LayerKind::Maxout: return "maxout";
    case LayerKind::ReLU: return "relu";
    case LayerKind::BReLU: return "brelu";
    case LayerKind::ConcatChannels: return "concat";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::PointwiseConv, LayerKind::Conv2d, LayerKind::MaxPool, LayerKind::AvgPool,
                 LayerKind::Maxout, LayerKind::ReLU, LayerKind::BReLU, LayerKind::ConcatChannels})
    if (s == to_string(k)) return k;
  throw data_error("unknown layer kind '" + s + "'");
}

/// One row of an architecture table. Channel counts of shape-preserving
/// layers (pooling, activations) are filled in by the network builder.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kh = 1;
  std::size_t kw = 1;
  std::size_t pad = 0;
  std::size_t stride = 1;
  std::size_t maxout_group = 0;

  static LayerSpec pointwise(std::size_t in, std::size_t out) {
    return {LayerKind::PointwiseConv, in, out, 1, 1, 0, 1, 0};
  }
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t pad, std::size_t stride) {
    return {LayerKind::Conv2d, in, out, k, k, pad, stride, 0};
  }
  static LayerSpec max_pool(std::size_t k, std::size_t pad, std::size_t stride) {
    return {LayerKind::MaxPool, 0, 0, k, k, pad, stride, 0};
  }
  static LayerSpec avg_pool(std::size_t k, std::size_t pad, std::size_t stride) {
    return {LayerKind::AvgPool, 0, 0, k, k, pad, stride, 0};
  }
  static LayerSpec maxout(std::size_t group) { return {LayerKind::Maxout, 0, 0, 1, 1, 0, 1, group}; }
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec brelu() { return {LayerKind::BReLU}; }
  static LayerSpec concat() { return {LayerKind::ConcatChannels}; }

  bool parametric() const { return kind == LayerKind::PointwiseConv || kind == LayerKind::Conv2d; }
  bool pooling() const { return kind == LayerKind::MaxPool || kind == LayerKind::AvgPool; }
  std::size_t weight_count() const { return parametric() ? out_channels * in_channels * kh * kw : 0; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Convolution weights laid out (out, in, kh, kw) plus one bias per output.
struct KernelWeights {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t kh = 1;
  std::size_t kw = 1;
  std::vector<double> weights;
  std::vector<double> bias;

  KernelWeights() = default;
  KernelWeights(std::size_t out_, std::size_t in_, std::size_t kh_, std::size_t kw_)
      : out(out_), in(in_), kh(kh_), kw(kw_), weights(out_ * in_ * kh_ * kw_, 0.0), bias(out_, 0.0) {}

  double& w(std::size_t o, std::size_t c, std::size_t i, std::size_t j) {
    return weights[((o * in + c) * kh + i) * kw + j];
  }
  double w(std::size_t o, std::size_t c, std::size_t i, std::size_t j) const {
    return weights[((o * in + c) * kh + i) * kw + j];
  }
  bool consistent() const { return weights.size() == out * in * kh * kw && bias.size() == out; }
  void zero() {
    std::fill(weights.begin(), weights.end(), 0.0);
    std::fill(bias.begin(), bias.end(), 0.0);
  }

  friend bool operator==(const KernelWeights&, const KernelWeights&) = default;
};

inline constexpr std::uint32_t kNoIndex = std::numeric_limits<std::uint32_t>::max();

namespace detail {

// `what` is a message or a callable producing one; callables run only on failure.
template <class Msg>
inline void require(bool ok, Msg&& what) {
  if (ok) return;
  if constexpr (std::is_invocable_v<Msg>)
    throw dimension_error(what());
  else
    throw dimension_error(std::string(what));
}

// Output extent along one axis for a sliding window.
inline std::size_t window_extent(std::size_t n, std::size_t k, std::size_t pad, std::size_t stride,
                                 const char* axis) {
  require(stride > 0, [&] { return std::string("stride must be positive on ") + axis; });
  require(k > 0, [&] { return std::string("kernel must be positive on ") + axis; });
  require(k <= n + 2 * pad, [&] { return std::string("kernel ") + std::to_string(k) + " larger than padded input " +
                                std::to_string(n + 2 * pad) + " on " + axis; });
  return (n + 2 * pad - k) / stride + 1;
}

// Pools must never produce a window that sees padding only.
inline std::size_t pool_extent(std::size_t n, std::size_t k, std::size_t pad, std::size_t stride,
                               const char* axis) {
  const std::size_t out = window_extent(n, k, pad, stride, axis);
  require(k > pad, [&] { return std::string("first pooling window covers only padding on ") + axis; });
  require((out - 1) * stride < n + pad, [&] { return std::string("last pooling window covers only padding on ") + axis; });
  return out;
}

inline void check_weights(const KernelWeights& w) {
  require(w.consistent(), "kernel weight array length does not match (out, in, kh, kw)");
}

}  // namespace detail

inline Shape conv_output_shape(Shape in, const LayerSpec& l) {
  return {l.out_channels, detail::window_extent(in.h, l.kh, l.pad, l.stride, "height"),
          detail::window_extent(in.w, l.kw, l.pad, l.stride, "width")};
}

inline Shape pool_output_shape(Shape in, std::size_t k, std::size_t pad, std::size_t stride) {
  return {in.c, detail::pool_extent(in.h, k, pad, stride, "height"),
          detail::pool_extent(in.w, k, pad, stride, "width")};
}

// ---------------------------------------------------------------- forward

/// out[o,y,x] = bias[o] + sum_c x[c,y,x] * w[o,c].
inline Tensor pointwise_conv_forward(const Tensor& x, const KernelWeights& w) {
  detail::check_weights(w);
  detail::require(w.kh == 1 && w.kw == 1, [&] { return "pointwise conv requires a 1x1 kernel, got " + std::to_string(w.kh) +
                                              "x" + std::to_string(w.kw); });
  detail::require(x.channels() == w.in, [&] { return "channel axis mismatch: input has " + std::to_string(x.channels()) +
                                            " channels, kernel expects " + std::to_string(w.in); });
  const std::size_t plane = x.shape().plane();
  Tensor out({w.out, x.height(), x.width()});
  for (std::size_t o = 0; o < w.out; ++o) {
    double* dst = out.channel(o).data();
    std::fill(dst, dst + plane, w.bias[o]);
    const double* k = &w.weights[o * w.in];
    std::size_t c = 0;
    // input channels in blocks of four, then the remainder in one pass
    for (; c + 4 <= w.in; c += 4) {
      const double *s0 = x.channel(c).data(), *s1 = s0 + plane, *s2 = s1 + plane, *s3 = s2 + plane;
      const double k0 = k[c], k1 = k[c + 1], k2 = k[c + 2], k3 = k[c + 3];
      for (std::size_t p = 0; p < plane; ++p) dst[p] += k0 * s0[p] + k1 * s1[p] + k2 * s2[p] + k3 * s3[p];
    }
    const double* s0 = c < w.in ? x.channel(c).data() : nullptr;
    switch (w.in - c) {
      case 3: {
        const double k0 = k[c], k1 = k[c + 1], k2 = k[c + 2];
        for (std::size_t p = 0; p < plane; ++p) dst[p] += k0 * s0[p] + k1 * s0[p + plane] + k2 * s0[p + 2 * plane];
        break;
      }
      case 2: {
        const double k0 = k[c], k1 = k[c + 1];
        for (std::size_t p = 0; p < plane; ++p) dst[p] += k0 * s0[p] + k1 * s0[p + plane];
        break;
      }
      case 1: {
        const double k0 = k[c];
        for (std::size_t p = 0; p < plane; ++p) dst[p] += k0 * s0[p];
        break;
      }
      default:
        break;
    }
  }
  return out;
}

/// Cross-correlation with zero padding.
inline Tensor conv2d_forward(const Tensor& x, const KernelWeights& w, std::size_t pad, std::size_t stride) {
  detail::check_weights(w);
  detail::require(x.channels() == w.in, [&] { return "channel axis mismatch: input has " + std::to_string(x.channels()) +
                                            " channels, kernel expects " + std::to_string(w.in); });
  const std::size_t oh = detail::window_extent(x.height(), w.kh, pad, stride, "height");
  const std::size_t ow = detail::window_extent(x.width(), w.kw, pad, stride, "width");
  const auto H = static_cast<std::ptrdiff_t>(x.height());
  const auto W = static_cast<std::ptrdiff_t>(x.width());
  Tensor out({w.out, oh, ow});
  for (std::size_t o = 0; o < w.out; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double acc = w.bias[o];
        const auto y0 = static_cast<std::ptrdiff_t>(y * stride) - static_cast<std::ptrdiff_t>(pad);
        const auto x0 = static_cast<std::ptrdiff_t>(xo * stride) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t c = 0; c < w.in; ++c) {
          for (std::size_t i = 0; i < w.kh; ++i) {
            const auto yy = y0 + static_cast<std::ptrdiff_t>(i);
            if (yy < 0 || yy >= H) continue;
            for (std::size_t j = 0; j < w.kw; ++j) {
              const auto xx = x0 + static_cast<std::ptrdiff_t>(j);
              if (xx < 0 || xx >= W) continue;
              acc += w.w(o, c, i, j) * x.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            }
          }
        }
        out.at(o, y, xo) = acc;
      }
    }
  }
  return out;
}

struct PoolResult {
  Tensor out;
  std::vector<std::uint32_t> argmax;  // flat input index of each selected value
};

/// Max pooling; padded cells act as -inf so they are never selected.
inline PoolResult max_pool_forward(const Tensor& x, std::size_t k, std::size_t pad, std::size_t stride) {
  const Shape os = pool_output_shape(x.shape(), k, pad, stride);
  PoolResult r{Tensor(os), std::vector<std::uint32_t>(os.size(), kNoIndex)};
  const std::size_t H = x.height(), W = x.width();
  for (std::size_t c = 0; c < os.c; ++c) {
    const double* src = x.channel(c).data();
    for (std::size_t y = 0; y < os.h; ++y) {
      const std::size_t ys = y * stride > pad ? y * stride - pad : 0;
      const std::size_t ye = std::min(H, y * stride + k - pad);
      for (std::size_t xo = 0; xo < os.w; ++xo) {
        const std::size_t xs = xo * stride > pad ? xo * stride - pad : 0;
        const std::size_t xe = std::min(W, xo * stride + k - pad);
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = ys * W + xs;
        for (std::size_t yy = ys; yy < ye; ++yy) {
          const double* row = src + yy * W;
          for (std::size_t xx = xs; xx < xe; ++xx) {
            if (row[xx] > best) {
              best = row[xx];
              best_i = yy * W + xx;
            }
          }
        }
        const std::size_t oi = (c * os.h + y) * os.w + xo;
        r.out[oi] = best;
        r.argmax[oi] = static_cast<std::uint32_t>(c * H * W + best_i);
      }
    }
  }
  return r;
}

/// Average pooling; the divisor counts real (non-padding) cells only.
inline Tensor avg_pool_forward(const Tensor& x, std::size_t k, std::size_t pad, std::size_t stride) {
  const Shape os = pool_output_shape(x.shape(), k, pad, stride);
  Tensor out(os);
  const std::size_t H = x.height(), W = x.width();
  for (std::size_t c = 0; c < os.c; ++c) {
    for (std::size_t y = 0; y < os.h; ++y) {
      const std::size_t ys = y * stride > pad ? y * stride - pad : 0;
      const std::size_t ye = std::min(H, y * stride + k - pad);
      for (std::size_t xo = 0; xo < os.w; ++xo) {
        const std::size_t xs = xo * stride > pad ? xo * stride - pad : 0;
        const std::size_t xe = std::min(W, xo * stride + k - pad);
        double sum = 0.0;
        for (std::size_t yy = ys; yy < ye; ++yy)
          for (std::size_t xx = xs; xx < xe; ++xx) sum += x.at(c, yy, xx);
        out.at(c, y, xo) = sum / static_cast<double>((ye - ys) * (xe - xs));
      }
    }
  }
  return out;
}

/// Channel-group max over consecutive groups of `group` channels.
inline PoolResult maxout_forward(const Tensor& x, std::size_t group) {
  detail::require(group > 0, "maxout group must be positive");
  detail::require(x.channels() % group == 0, [&] { return "channel axis: " + std::to_string(x.channels()) +
                                                 " channels not divisible by maxout group " +
                                                 std::to_string(group); });
  const std::size_t plane = x.shape().plane();
  const Shape os{x.channels() / group, x.height(), x.width()};
  PoolResult r{Tensor(os), std::vector<std::uint32_t>(os.size())};
  for (std::size_t g = 0; g < os.c; ++g) {
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best_c = g * group;
      double best = x[best_c * plane + p];
      for (std::size_t c = best_c + 1; c < (g + 1) * group; ++c) {
        if (x[c * plane + p] > best) {
          best = x[c * plane + p];
          best_c = c;
        }
      }
      r.out[g * plane + p] = best;
      r.argmax[g * plane + p] = static_cast<std::uint32_t>(best_c * plane + p);
    }
  }
  return r;
}

inline Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

/// Bounded ReLU: clamp to [0, 1].
inline Tensor brelu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(1.0, std::max(0.0, x[i]));
  return out;
}

inline Tensor concat_channels(std::span<const Tensor* const> xs) {
  detail::require(!xs.empty(), "concat needs at least one input");
  const std::size_t H = xs[0]->height(), W = xs[0]->width();
  std::size_t C = 0;
  for (const Tensor* t : xs) {
    detail::require(t->height() == H, [&] { return "concat height axis mismatch: " + t->shape().str() + " vs " +
                                          xs[0]->shape().str(); });
    detail::require(t->width() == W, [&] { return "concat width axis mismatch: " + t->shape().str() + " vs " +
                                         xs[0]->shape().str(); });
    C += t->channels();
  }
  Tensor out({C, H, W});
  std::size_t off = 0;
  for (const Tensor* t : xs) {
    std::copy(t->data().begin(), t->data().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(off));
    off += t->size();
  }
  return out;
}

inline Tensor concat_channels(std::initializer_list<const Tensor*> xs) {
  return concat_channels(std::span<const Tensor* const>(xs.begin(), xs.size()));
}

// ---------------------------------------------------------------- backward
//
// Weight gradients accumulate into `grad`; input gradients are returned.
// Zero upstream entries are skipped, which makes the sparse gradients that
// max pooling produces cheap to propagate.

inline Tensor pointwise_conv_backward(const Tensor& x, const KernelWeights& w, const Tensor& gout,
                                      KernelWeights& grad, bool want_input_grad = true) {
  const std::size_t plane = x.shape().plane();
  detail::require(gout.shape() == Shape{w.out, x.height(), x.width()}, "upstream gradient shape mismatch");
  Tensor gin = want_input_grad ? Tensor(x.shape()) : Tensor();
  for (std::size_t o = 0; o < w.out; ++o) {
    const double* g = gout.channel(o).data();
    double bsum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double gp = g[p];
      if (gp == 0.0) continue;
      bsum += gp;
      for (std::size_t c = 0; c < w.in; ++c) {
        grad.weights[o * w.in + c] += gp * x[c * plane + p];
        if (want_input_grad) gin[c * plane + p] += w.weights[o * w.in + c] * gp;
      }
    }
    grad.bias[o] += bsum;
  }
  return gin;
}

inline Tensor conv2d_backward(const Tensor& x, const KernelWeights& w, std::size_t pad, std::size_t stride,
                              const Tensor& gout, KernelWeights& grad, bool want_input_grad = true) {
  const auto H = static_cast<std::ptrdiff_t>(x.height());
  const auto W = static_cast<std::ptrdiff_t>(x.width());
  Tensor gin = want_input_grad ? Tensor(x.shape()) : Tensor();
  for (std::size_t o = 0; o < gout.channels(); ++o) {
    for (std::size_t y = 0; y < gout.height(); ++y) {
      for (std::size_t xo = 0; xo < gout.width(); ++xo) {
        const double g = gout.at(o, y, xo);
        if (g == 0.0) continue;
        grad.bias[o] += g;
        const auto y0 = static_cast<std::ptrdiff_t>(y * stride) - static_cast<std::ptrdiff_t>(pad);
        const auto x0 = static_cast<std::ptrdiff_t>(xo * stride) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t c = 0; c < w.in; ++c) {
          for (std::size_t i = 0; i < w.kh; ++i) {
            const auto yy = y0 + static_cast<std::ptrdiff_t>(i);
            if (yy < 0 || yy >= H) continue;
            for (std::size_t j = 0; j < w.kw; ++j) {
              const auto xx = x0 + static_cast<std::ptrdiff_t>(j);
              if (xx < 0 || xx >= W) continue;
              const auto uy = static_cast<std::size_t>(yy), ux = static_cast<std::size_t>(xx);
              grad.w(o, c, i, j) += g * x.at(c, uy, ux);
              if (want_input_grad) gin.at(c, uy, ux) += w.w(o, c, i, j) * g;
            }
          }
        }
      }
    }
  }
  return gin;
}

/// Routes each upstream value to the input cell recorded in `argmax`
/// (used for both max pooling and maxout).
inline Tensor scatter_backward(Shape in, std::span<const std::uint32_t> argmax, const Tensor& gout) {
  detail::require(argmax.size() == gout.size(), "argmax record does not match upstream gradient");
  Tensor gin(in);
  for (std::size_t i = 0; i < gout.size(); ++i)
    if (gout[i] != 0.0) gin[argmax[i]] += gout[i];
  return gin;
}

inline Tensor max_pool_backward(Shape in, std::span<const std::uint32_t> argmax, const Tensor& gout) {
  return scatter_backward(in, argmax, gout);
}

inline Tensor maxout_backward(Shape in, std::span<const std::uint32_t> argmax, const Tensor& gout) {
  return scatter_backward(in, argmax, gout);
}

inline Tensor avg_pool_backward(Shape in, std::size_t k, std::size_t pad, std::size_t stride, const Tensor& gout) {
  Tensor gin(in);
  for (std::size_t c = 0; c < gout.channels(); ++c) {
    for (std::size_t y = 0; y < gout.height(); ++y) {
      const std::size_t ys = y * stride > pad ? y * stride - pad : 0;
      const std::size_t ye = std::min(in.h, y * stride + k - pad);
      for (std::size_t xo = 0; xo < gout.width(); ++xo) {
        const std::size_t xs = xo * stride > pad ? xo * stride - pad : 0;
        const std::size_t xe = std::min(in.w, xo * stride + k - pad);
        const double g = gout.at(c, y, xo) / static_cast<double>((ye - ys) * (xe - xs));
        for (std::size_t yy = ys; yy < ye; ++yy)
          for (std::size_t xx = xs; xx < xe; ++xx) gin.at(c, yy, xx) += g;
      }
    }
  }
  return gin;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& gout) {
  Tensor gin(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gin[i] = x[i] > 0.0 ? gout[i] : 0.0;
  return gin;
}

/// Gradient is zero wherever the clamp is active, i.e. outside (0, 1).
inline Tensor brelu_backward(const Tensor& x, const Tensor& gout) {
  Tensor gin(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gin[i] = (x[i] > 0.0 && x[i] < 1.0) ? gout[i] : 0.0;
  return gin;
}

inline std::vector<Tensor> concat_backward(std::span<const Shape> parts, const Tensor& gout) {
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const Shape& s : parts) {
    std::vector<double> d(gout.data().begin() + static_cast<std::ptrdiff_t>(off),
                          gout.data().begin() + static_cast<std::ptrdiff_t>(off + s.size()));
    out.emplace_back(s, std::move(d));
    off += s.size();
  }
  detail::require(off == gout.size(), "concat gradient does not match the joined shapes");
  return out;
}

// ---------------------------------------------------------------- generic layer

/// What a layer keeps from its forward pass so that backward can run.
struct LayerState {
  std::vector<Tensor> inputs;
  std::vector<std::uint32_t> argmax;
  bool ready = false;
};

struct LayerGradients {
  std::vector<Tensor> inputs;
  KernelWeights weights;
};

namespace detail {

// Shared by layer_forward and the network executor. `argmax` receives the
// routing record for max pooling and maxout.
inline Tensor dispatch_forward(const LayerSpec& l, const KernelWeights* w, std::span<const Tensor* const> in,
                               std::vector<std::uint32_t>* argmax) {
  require(!in.empty(), [&] { return std::string(to_string(l.kind)) + " layer has no input"; });
  switch (l.kind) {
    case LayerKind::PointwiseConv:
      require(w != nullptr, "pointwise conv without weights");
      return pointwise_conv_forward(*in[0], *w);
    case LayerKind::Conv2d:
      require(w != nullptr, "conv2d without weights");
      return conv2d_forward(*in[0], *w, l.pad, l.stride);
    case LayerKind::MaxPool: {
      require(l.kh == l.kw, "max pool requires a square window");
      auto r = max_pool_forward(*in[0], l.kh, l.pad, l.stride);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.out);
    }
    case LayerKind::AvgPool:
      require(l.kh == l.kw, "avg pool requires a square window");
      return avg_pool_forward(*in[0], l.kh, l.pad, l.stride);
    case LayerKind::Maxout: {
      auto r = maxout_forward(*in[0], l.maxout_group);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.out);
    }
    case LayerKind::ReLU: return relu_forward(*in[0]);
    case LayerKind::BReLU: return brelu_forward(*in[0]);
    case LayerKind::ConcatChannels: return concat_channels(in);
  }
  throw state_error("unhandled layer kind");
}

inline std::vector<Tensor> dispatch_backward(const LayerSpec& l, const KernelWeights* w,
                                             std::span<const Tensor* const> in,
                                             std::span<const std::uint32_t> argmax, const Tensor& gout,
                                             KernelWeights* grad, bool want_input_grad) {
  std::vector<Tensor> gin;
  switch (l.kind) {
    case LayerKind::PointwiseConv:
      gin.push_back(pointwise_conv_backward(*in[0], *w, gout, *grad, want_input_grad));
      break;
    case LayerKind::Conv2d:
      gin.push_back(conv2d_backward(*in[0], *w, l.pad, l.stride, gout, *grad, want_input_grad));
      break;
    case LayerKind::MaxPool: gin.push_back(max_pool_backward(in[0]->shape(), argmax, gout)); break;
    case LayerKind::Maxout: gin.push_back(maxout_backward(in[0]->shape(), argmax, gout)); break;
    case LayerKind::AvgPool:
      gin.push_back(avg_pool_backward(in[0]->shape(), l.kh, l.pad, l.stride, gout));
      break;
    case LayerKind::ReLU: gin.push_back(relu_backward(*in[0], gout)); break;
    case LayerKind::BReLU: gin.push_back(brelu_backward(*in[0], gout)); break;
    case LayerKind::ConcatChannels: {
      std::vector<Shape> shapes;
      for (const Tensor* t : in) shapes.push_back(t->shape());
      gin = concat_backward(shapes, gout);
      break;
    }
  }
  return gin;
}

}  // namespace detail

/// Runs one layer. When `state` is given, the inputs and routing record are
/// retained for layer_backward.
inline Tensor layer_forward(const LayerSpec& l, const KernelWeights* w, std::span<const Tensor* const> in,
                            LayerState* state = nullptr) {
  std::vector<std::uint32_t> argmax;
  Tensor out = detail::dispatch_forward(l, w, in, &argmax);
  if (state) {
    state->inputs.clear();
    for (const Tensor* t : in) state->inputs.push_back(*t);
    state->argmax = std::move(argmax);
    state->ready = true;
  }
  return out;
}

inline LayerGradients layer_backward(const LayerSpec& l, const KernelWeights* w, const LayerState& state,
                                     const Tensor& gout) {
  if (!state.ready) throw state_error(std::string("backward called before forward on ") + to_string(l.kind));
  LayerGradients g;
  if (l.parametric()) g.weights = KernelWeights(w->out, w->in, w->kh, w->kw);
  std::vector<const Tensor*> in;
  for (const Tensor& t : state.inputs) in.push_back(&t);
  g.inputs = detail::dispatch_backward(l, w, in, state.argmax, gout, l.parametric() ? &g.weights : nullptr, true);
  return g;
}

}  // namespace fpcnet
