#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "fpcnet/rng.hpp"
#include "fpcnet/tensor.hpp"

namespace fpcnet {

/// A block of pixels drawn from an image together with where each one came
/// from. `permutation[i]` is the flat source index (row * W + col) of the
/// pixel at ensemble position i (row-major within the block).
struct PixelEnsemble {
  Tensor pixels;
  std::vector<std::uint32_t> permutation;
  std::size_t source_h = 0;
  std::size_t source_w = 0;

  std::pair<std::size_t, std::size_t> source(std::size_t i) const {
    return {permutation[i] / source_w, permutation[i] % source_w};
  }
};

namespace detail {

inline PixelEnsemble gather(const Tensor& image, std::vector<std::uint32_t> positions, std::size_t h, std::size_t w) {
  const std::size_t C = image.channels();
  PixelEnsemble e{Tensor({C, h, w}), std::move(positions), image.height(), image.width()};
  const std::size_t n = h * w;
  for (std::size_t c = 0; c < C; ++c) {
    const double* src = image.channel(c).data();
    double* dst = e.pixels.channel(c).data();
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[e.permutation[i]];
  }
  return e;
}

}  // namespace detail

/// Draws h*w distinct pixel positions uniformly at random, in random order
/// (partial Fisher-Yates), and arranges them into an h x w block.
inline PixelEnsemble sample_ensemble(const Tensor& image, std::size_t h, std::size_t w, Rng& rng) {
  const std::size_t total = image.shape().plane();
  if (image.empty()) throw dimension_error("cannot sample an ensemble from an empty image");
  if (h * w > total || h == 0 || w == 0)
    throw dimension_error("ensemble " + std::to_string(h) + "x" + std::to_string(w) + " exceeds image " +
                          std::to_string(image.height()) + "x" + std::to_string(image.width()));
  std::vector<std::uint32_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0u);
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(total - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return detail::gather(image, std::move(idx), h, w);
}

/// Full-image permutation: every pixel exactly once, same shape.
inline PixelEnsemble shuffle_image(const Tensor& image, std::uint64_t seed) {
  if (image.empty()) throw dimension_error("cannot shuffle an empty image");
  std::vector<std::uint32_t> idx(image.shape().plane());
  std::iota(idx.begin(), idx.end(), 0u);
  Rng rng(seed, {0x5f1e});
  rng.shuffle(std::span<std::uint32_t>(idx));
  return detail::gather(image, std::move(idx), image.height(), image.width());
}

/// `count` ensembles, each drawn without replacement and independently of the
/// others. Ensemble i uses the stream derived from (seed, i).
inline std::vector<PixelEnsemble> sample_ensembles(const Tensor& image, std::size_t count, std::size_t h,
                                                   std::size_t w, std::uint64_t seed) {
  std::vector<PixelEnsemble> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed, {0xe45e, i});
    out.push_back(sample_ensemble(image, h, w, rng));
  }
  return out;
}

struct SubsetStats {
  std::vector<double> channel_means;
  std::size_t subset_size = 0;
};

inline SubsetStats subset_stats(const Tensor& block, std::span<const std::size_t> positions) {
  SubsetStats s{std::vector<double>(block.channels(), 0.0), positions.size()};
  for (std::size_t c = 0; c < block.channels(); ++c) {
    const auto ch = block.channel(c);
    double sum = 0.0;
    for (std::size_t p : positions) sum += ch[p];
    s.channel_means[c] = sum / static_cast<double>(positions.size());
  }
  return s;
}

struct SubsetDeviation {
  std::vector<double> max_abs;   // per channel, over trials
  std::vector<double> mean_abs;  // per channel, averaged over trials
};

/// Compares the mean of random contiguous sub-blocks against the mean of the
/// whole ensemble. Square sub-blocks are used when subset_size is a perfect
/// square that fits; otherwise a row-major run of positions.
inline SubsetDeviation subset_mean_check(const PixelEnsemble& e, std::size_t subset_size, std::size_t trials,
                                         std::uint64_t seed = 0) {
  const Tensor& x = e.pixels;
  const std::size_t n = x.shape().plane();
  if (subset_size == 0 || subset_size > n)
    throw dimension_error("subset size " + std::to_string(subset_size) + " outside [1, " + std::to_string(n) + "]");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const SubsetStats full = subset_stats(x, all);
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(subset_size))));
  const bool square = side * side == subset_size && side <= x.height() && side <= x.width();

  SubsetDeviation d{std::vector<double>(x.channels(), 0.0), std::vector<double>(x.channels(), 0.0)};
  Rng rng(seed, {0x5b5e});
  std::vector<std::size_t> pos;
  for (std::size_t t = 0; t < trials; ++t) {
    pos.clear();
    if (square) {
      const std::size_t y0 = rng.below(x.height() - side + 1), x0 = rng.below(x.width() - side + 1);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t xx = 0; xx < side; ++xx) pos.push_back((y0 + y) * x.width() + x0 + xx);
    } else {
      const std::size_t start = rng.below(n - subset_size + 1);
      for (std::size_t i = 0; i < subset_size; ++i) pos.push_back(start + i);
    }
    const SubsetStats s = subset_stats(x, pos);
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const double dev = std::abs(s.channel_means[c] - full.channel_means[c]);
      d.max_abs[c] = std::max(d.max_abs[c], dev);
      d.mean_abs[c] += dev / static_cast<double>(trials);
    }
  }
  return d;
}

/// Per-channel gradient magnitude sqrt(dx^2 + dy^2) from forward differences;
/// the last row and column replicate their neighbour, so their outward
/// difference is zero.
inline Tensor edge_augment(const Tensor& image) {
  const std::size_t H = image.height(), W = image.width();
  if (H < 2 || W < 2) throw dimension_error("edge augmentation needs at least a 2x2 image");
  Tensor out(image.shape());
  for (std::size_t c = 0; c < image.channels(); ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double v = image.at(c, y, x);
        const double dx = image.at(c, y, std::min(x + 1, W - 1)) - v;
        const double dy = image.at(c, std::min(y + 1, H - 1), x) - v;
        out.at(c, y, x) = std::sqrt(dx * dx + dy * dy);
      }
    }
  }
  return out;
}

}  // namespace fpcnet
