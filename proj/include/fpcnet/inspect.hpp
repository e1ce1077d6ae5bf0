#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "fpcnet/ensemble.hpp"
#include "fpcnet/network.hpp"

namespace fpcnet {

/// Per-pixel importance for one ensemble, row-major over the ensemble block.
struct ActivationWeights {
  std::size_t h = 0, w = 0;
  std::vector<double> values;
};

namespace detail {

/// Spreads a coarse map back over the input of a windowed layer. Each output
/// cell contributes uniformly to the cells of its window; a covered input cell
/// receives the mean of the windows covering it, an uncovered one gets 0.
inline std::vector<double> unpool(const std::vector<double>& coarse, std::size_t oh, std::size_t ow, std::size_t ih,
                                  std::size_t iw, std::size_t k, std::size_t pad, std::size_t stride) {
  std::vector<double> sum(ih * iw, 0.0);
  std::vector<std::uint32_t> cover(ih * iw, 0);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const auto y0 = static_cast<std::ptrdiff_t>(oy * stride) - static_cast<std::ptrdiff_t>(pad);
      const auto x0 = static_cast<std::ptrdiff_t>(ox * stride) - static_cast<std::ptrdiff_t>(pad);
      for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0); y < std::min<std::ptrdiff_t>(ih, y0 + k); ++y)
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0); x < std::min<std::ptrdiff_t>(iw, x0 + k); ++x) {
          const auto p = static_cast<std::size_t>(y) * iw + static_cast<std::size_t>(x);
          sum[p] += coarse[oy * ow + ox];
          ++cover[p];
        }
    }
  for (std::size_t p = 0; p < sum.size(); ++p) sum[p] = cover[p] ? sum[p] / cover[p] : 0.0;
  return sum;
}

}  // namespace detail

/// Channel-mean response of a pooling layer, mapped back to input resolution
/// along the layer's first-input chain and clamped at zero.
inline ActivationWeights activation_weights(const NetworkSpec& spec, const ParamStore& params, const Tensor& ensemble,
                                            const std::string& layer_id) {
  const auto found = spec.find(layer_id);
  if (!found) throw std::invalid_argument("model '" + spec.name + "' has no layer '" + layer_id + "'");
  if (!spec.nodes[*found].layer.pooling())
    throw std::invalid_argument("layer '" + layer_id + "' is not a pooling layer");
  ForwardState st;
  forward(spec, params, ensemble, &st);

  // A pool whose only consumer is a ReLU is read after rectification, which is
  // the same as pooling the rectified map.
  bool rectify = false;
  std::size_t consumers = 0;
  for (const Node& n : spec.nodes)
    for (int j : n.inputs)
      if (j == static_cast<int>(*found)) {
        ++consumers;
        rectify = n.layer.kind == LayerKind::ReLU;
      }
  rectify = rectify && consumers == 1;

  const Tensor& r = st.outputs[*found];
  std::vector<double> map(r.height() * r.width(), 0.0);
  for (std::size_t c = 0; c < r.channels(); ++c)
    for (std::size_t p = 0; p < map.size(); ++p) map[p] += rectify ? std::max(0.0, r.channel(c)[p]) : r.channel(c)[p];
  for (double& v : map) v /= static_cast<double>(r.channels());
  std::size_t h = r.height(), w = r.width();

  for (int idx = static_cast<int>(*found); idx != kNetworkInput;) {
    const Node& n = spec.nodes[static_cast<std::size_t>(idx)];
    if (n.in_shape.h != h || n.in_shape.w != w) {
      const LayerSpec& l = n.layer;
      map = detail::unpool(map, h, w, n.in_shape.h, n.in_shape.w, l.kh, l.pad, l.stride);
      h = n.in_shape.h;
      w = n.in_shape.w;
    }
    idx = n.inputs.front();
  }
  for (double& v : map) v = std::max(v, 0.0);
  return {h, w, std::move(map)};
}

/// Scatters ensemble-aligned weights onto the source image grid through the
/// shuffle permutation. Untouched source pixels stay 0.
inline Tensor reproject(const std::vector<double>& weights, const PixelEnsemble& e) {
  if (weights.size() != e.permutation.size())
    throw dimension_error("weights have " + std::to_string(weights.size()) + " entries, ensemble has " +
                          std::to_string(e.permutation.size()));
  Tensor map({1, e.source_h, e.source_w});
  for (std::size_t i = 0; i < weights.size(); ++i) map[e.permutation[i]] += weights[i];
  return map;
}

/// Inverse of reproject: reads the source map back in ensemble order.
inline std::vector<double> gather(const Tensor& map, const PixelEnsemble& e) {
  if (map.size() != e.source_h * e.source_w)
    throw dimension_error("map " + map.shape().str() + " does not match the ensemble source");
  std::vector<double> w(e.permutation.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = map[e.permutation[i]];
  return w;
}

/// Regular 1-D or 2-D histogram of accumulated weights. Bins are right-closed
/// (lo, hi] when `open_low` is set (chroma ratios), otherwise [lo, hi].
class WeightedHistogram {
 public:
  WeightedHistogram() = default;
  WeightedHistogram(std::size_t bins_x, std::size_t bins_y, double lo, double hi, bool open_low)
      : bx_(bins_x), by_(bins_y), lo_(lo), hi_(hi), open_low_(open_low), mass_(bins_x * bins_y, 0.0) {
    if (bins_x == 0 || bins_y == 0 || !(hi > lo)) throw std::invalid_argument("histogram needs bins > 0 and hi > lo");
  }

  static WeightedHistogram chroma(std::size_t bins = 64, double lo = 0.0, double hi = 2.0) {
    return {bins, bins, lo, hi, true};
  }
  static WeightedHistogram min_channel(std::size_t bins = 64) { return {bins, 1, 0.0, 1.0, false}; }

  std::size_t bins_x() const { return bx_; }
  std::size_t bins_y() const { return by_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double bin_width() const { return (hi_ - lo_) / static_cast<double>(bx_); }
  double center(std::size_t i) const { return lo_ + (static_cast<double>(i) + 0.5) * bin_width(); }

  /// Bin of a value, or -1 if it falls outside the range.
  std::ptrdiff_t bin_of(double v) const {
    const double u = (v - lo_) / bin_width();
    if (!std::isfinite(u)) return -1;
    if (open_low_) {
      if (v <= lo_ || v > hi_) return -1;
      return std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::ceil(u)) - 1, 0,
                                        static_cast<std::ptrdiff_t>(bx_) - 1);
    }
    if (v < lo_ || v > hi_) return -1;
    return std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor(u)), static_cast<std::ptrdiff_t>(bx_) - 1);
  }

  void add(double x, double weight) { add(x, lo_ + 0.5 * bin_width(), weight); }

  void add(double x, double y, double weight) {
    const auto ix = bin_of(x);
    const auto iy = by_ == 1 ? 0 : bin_of(y);
    if (ix < 0 || iy < 0) {
      skip(weight);
      return;
    }
    mass_[static_cast<std::size_t>(iy) * bx_ + static_cast<std::size_t>(ix)] += weight;
  }

  void skip(double weight) {
    ++skipped_;
    skipped_mass_ += weight;
  }

  double at(std::size_t ix, std::size_t iy = 0) const { return mass_[iy * bx_ + ix]; }
  const std::vector<double>& mass() const { return mass_; }
  std::size_t skipped() const { return skipped_; }
  double skipped_mass() const { return skipped_mass_; }

  double total() const {
    double s = 0.0;
    for (double v : mass_) s += v;
    return s;
  }

  /// Running sum over x bins (1-D histograms).
  std::vector<double> cumulative() const {
    std::vector<double> c(bx_, 0.0);
    double run = 0.0;
    for (std::size_t i = 0; i < bx_; ++i) {
      for (std::size_t j = 0; j < by_; ++j) run += mass_[j * bx_ + i];
      c[i] = run;
    }
    return c;
  }

  void merge(const WeightedHistogram& o) {
    if (o.bx_ != bx_ || o.by_ != by_ || o.lo_ != lo_ || o.hi_ != hi_ || o.open_low_ != open_low_)
      throw dimension_error("cannot merge histograms with different binning");
    for (std::size_t i = 0; i < mass_.size(); ++i) mass_[i] += o.mass_[i];
    skipped_ += o.skipped_;
    skipped_mass_ += o.skipped_mass_;
  }

  void write_csv(std::ostream& os) const {
    const auto old = os.precision(17);
    if (by_ == 1) {
      os << "bin,mass,cumulative\n";
      const auto cum = cumulative();
      for (std::size_t i = 0; i < bx_; ++i) os << center(i) << ',' << mass_[i] << ',' << cum[i] << '\n';
    } else {
      os << "bin_x,bin_y,mass\n";
      for (std::size_t j = 0; j < by_; ++j)
        for (std::size_t i = 0; i < bx_; ++i) os << center(i) << ',' << center(j) << ',' << mass_[j * bx_ + i] << '\n';
    }
    os.precision(old);
  }

 private:
  std::size_t bx_ = 0, by_ = 0;
  double lo_ = 0.0, hi_ = 1.0;
  bool open_low_ = false;
  std::vector<double> mass_;
  std::size_t skipped_ = 0;
  double skipped_mass_ = 0.0;
};

namespace detail {
inline void require_weight_map(const Tensor& image, const Tensor& weights) {
  if (weights.size() != image.height() * image.width())
    throw dimension_error("weight map " + weights.shape().str() + " does not cover image " + image.shape().str());
}
}  // namespace detail

/// Adds every pixel of an (intrinsic or corrected) RGB image at (R/G, B/G).
/// Pixels with G <= 0 are counted as skipped.
inline void accumulate_chroma(WeightedHistogram& hist, const Tensor& image, const Tensor& weights) {
  if (image.channels() != 3) throw dimension_error("chroma histogram needs an RGB image");
  detail::require_weight_map(image, weights);
  const auto R = image.channel(0), G = image.channel(1), B = image.channel(2);
  for (std::size_t p = 0; p < weights.size(); ++p) {
    if (!(G[p] > 0.0)) {
      hist.skip(weights[p]);
      continue;
    }
    hist.add(R[p] / G[p], B[p] / G[p], weights[p]);
  }
}

/// Adds min(R, G, B) of every pixel.
inline void accumulate_min_channel(WeightedHistogram& hist, const Tensor& image, const Tensor& weights) {
  detail::require_weight_map(image, weights);
  for (std::size_t p = 0; p < weights.size(); ++p) {
    double m = image.channel(0)[p];
    for (std::size_t c = 1; c < image.channels(); ++c) m = std::min(m, image.channel(c)[p]);
    hist.add(m, weights[p]);
  }
}

inline WeightedHistogram weighted_chroma_histogram(const std::vector<Tensor>& images,
                                                   const std::vector<Tensor>& weights, std::size_t bins = 64,
                                                   double lo = 0.0, double hi = 2.0) {
  if (images.size() != weights.size()) throw dimension_error("one weight map per image required");
  auto h = WeightedHistogram::chroma(bins, lo, hi);
  for (std::size_t i = 0; i < images.size(); ++i) accumulate_chroma(h, images[i], weights[i]);
  return h;
}

inline WeightedHistogram min_channel_histogram(const std::vector<Tensor>& images, const std::vector<Tensor>& weights,
                                               std::size_t bins = 64) {
  if (images.size() != weights.size()) throw dimension_error("one weight map per image required");
  auto h = WeightedHistogram::min_channel(bins);
  for (std::size_t i = 0; i < images.size(); ++i) accumulate_min_channel(h, images[i], weights[i]);
  return h;
}

/// Unit weight map for an image.
inline Tensor unit_weights(const Tensor& image) { return Tensor({1, image.height(), image.width()}, 1.0); }

}  // namespace fpcnet
