#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fpcnet/dehazing.hpp"
#include "fpcnet/rng.hpp"
#include "fpcnet/tensor.hpp"

// Procedural outdoor-like scenes used when no photo collection is at hand:
// sky above a horizon, textured ground receding in depth, and solid objects
// with shading, cast shadows and occasional specular highlights.

namespace fpcnet::scenes {

/// Multi-octave value noise on [0, 1] with bilinear interpolation.
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, double base_period, int octaves = 4) : period_(base_period), octaves_(octaves) {
    Rng rng(seed, {0x7015e});
    for (double& v : lattice_) v = rng.uniform();
  }

  double operator()(double y, double x) const {
    double sum = 0.0, amp = 1.0, norm = 0.0, p = period_;
    for (int o = 0; o < octaves_; ++o) {
      sum += amp * sample(y / p + 17.0 * o, x / p + 31.0 * o);
      norm += amp;
      amp *= 0.5;
      p *= 0.5;
    }
    return sum / norm;
  }

 private:
  static constexpr std::size_t kSize = 256;

  double cell(long y, long x) const {
    const auto iy = static_cast<std::size_t>(y & (kSize - 1)), ix = static_cast<std::size_t>(x & (kSize - 1));
    return lattice_[iy * kSize + ix];
  }

  double sample(double y, double x) const {
    const double fy = std::floor(y), fx = std::floor(x);
    const double ty = y - fy, tx = x - fx;
    const auto iy = static_cast<long>(fy), ix = static_cast<long>(fx);
    const double sy = ty * ty * (3 - 2 * ty), sx = tx * tx * (3 - 2 * tx);
    const double a = cell(iy, ix) + sx * (cell(iy, ix + 1) - cell(iy, ix));
    const double b = cell(iy + 1, ix) + sx * (cell(iy + 1, ix + 1) - cell(iy + 1, ix));
    return a + sy * (b - a);
  }

  double period_;
  int octaves_;
  std::array<double, kSize * kSize> lattice_{};
};

struct Scene {
  Tensor image;  // 3 x H x W in [0, 1]
  Tensor depth;  // 1 x H x W, 0 near to 1 at the sky
};

namespace detail {

using Color = std::array<double, 3>;

inline Color pick_ground(Rng& rng) {
  static constexpr Color palette[] = {
      {0.20, 0.38, 0.10}, {0.45, 0.33, 0.20}, {0.40, 0.40, 0.37}, {0.72, 0.62, 0.42},
      {0.12, 0.24, 0.32}, {0.30, 0.30, 0.12}, {0.55, 0.25, 0.15}, {0.15, 0.30, 0.15},
  };
  return palette[rng.below(std::size(palette))];
}

inline Color pick_object(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.15) {
    const double g = rng.uniform(0.8, 0.97);
    return {g, g, g};
  }
  if (u < 0.3) {
    const double g = rng.uniform(0.03, 0.15);
    return {g, g, g};
  }
  // saturated hue: one or two dominant channels
  Color c{};
  for (double& v : c) v = rng.uniform(0.02, 0.35);
  c[rng.below(3)] = rng.uniform(0.55, 0.95);
  if (rng.uniform() < 0.4) c[rng.below(3)] = rng.uniform(0.5, 0.9);
  return c;
}

}  // namespace detail

inline Scene make_scene(std::size_t h, std::size_t w, std::uint64_t seed) {
  if (h < 16 || w < 16) throw dimension_error("scenes must be at least 16x16");
  Rng rng(seed, {0x5ce7e});
  Scene s{Tensor({3, h, w}), Tensor({1, h, w})};
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  const double horizon = H * rng.uniform(0.2, 0.5);

  const ValueNoise clouds(rng.next(), W * 0.5, 4);
  const ValueNoise coarse(rng.next(), W * rng.uniform(0.15, 0.4), 3);
  const ValueNoise fine(rng.next(), rng.uniform(2.0, 6.0), 2);
  const bool overcast = rng.uniform() < 0.3;
  const detail::Color sky_top = overcast ? detail::Color{0.70, 0.72, 0.75}
                                         : detail::Color{rng.uniform(0.25, 0.5), rng.uniform(0.45, 0.7), 0.95};
  const detail::Color sky_low{0.85, 0.87, 0.9};
  const detail::Color ground_a = detail::pick_ground(rng), ground_b = detail::pick_ground(rng);
  const double ground_gain = rng.uniform(0.7, 1.3);

  for (std::size_t y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x);
      if (fy < horizon) {
        const double a = fy / horizon;
        const double cl = std::clamp((clouds(fy, fx) - 0.5) * 2.5, 0.0, 1.0);
        for (std::size_t c = 0; c < 3; ++c)
          s.image.at(c, y, x) = (sky_top[c] * (1 - a) + sky_low[c] * a) * (1 - cl) + 0.95 * cl;
        s.depth.at(0, y, x) = 1.0;
      } else {
        const double g = (fy - horizon) / (H - horizon);  // 0 at horizon, 1 at bottom
        const double mix = coarse(fy, fx);
        const double tex = 0.55 + 0.7 * fine(fy, fx);
        for (std::size_t c = 0; c < 3; ++c)
          s.image.at(c, y, x) = (ground_a[c] * (1 - mix) + ground_b[c] * mix) * tex * ground_gain;
        s.depth.at(0, y, x) = 0.95 - 0.85 * g;
      }
    }
  }

  const std::size_t n_objects = 3 + rng.below(9);
  for (std::size_t k = 0; k < n_objects; ++k) {
    const detail::Color col = detail::pick_object(rng);
    const double base = horizon + (H - horizon) * rng.uniform(0.05, 1.0);
    const double scale = 0.25 + 0.75 * (base - horizon) / (H - horizon);
    const double ow = W * rng.uniform(0.05, 0.25) * scale, oh = H * rng.uniform(0.08, 0.45) * scale;
    const double cx = rng.uniform(0.0, W);
    const bool ellipse = rng.uniform() < 0.5;
    const bool specular = rng.uniform() < 0.5;
    const double depth = std::clamp(0.95 - 0.85 * (base - horizon) / (H - horizon), 0.1, 0.95);
    const double light = rng.uniform(-1.0, 1.0);
    const double hx = cx + rng.uniform(-0.3, 0.3) * ow, hy = base - oh * rng.uniform(0.5, 0.9);
    const double hr = std::max(1.0, 0.12 * std::min(ow, oh));

    // shadow on the ground to one side of the object
    const double sdir = light > 0 ? -1.0 : 1.0;
    for (std::size_t y = static_cast<std::size_t>(std::max(horizon, base - 0.15 * oh)); y < std::min(h, static_cast<std::size_t>(base + 0.1 * oh) + 1); ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (static_cast<double>(x) - cx) * sdir;
        if (dx < 0 || dx > ow * 1.2 || std::abs(static_cast<double>(y) - base) > 0.15 * oh) continue;
        for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) *= 0.35;
      }

    const auto y_lo = static_cast<std::size_t>(std::max(0.0, base - oh));
    const auto y_hi = std::min(h, static_cast<std::size_t>(std::max(0.0, base)) + 1);
    const auto x_lo = static_cast<std::size_t>(std::max(0.0, cx - ow / 2));
    const auto x_hi = std::min(w, static_cast<std::size_t>(std::max(0.0, cx + ow / 2)) + 1);
    for (std::size_t y = y_lo; y < y_hi; ++y)
      for (std::size_t x = x_lo; x < x_hi; ++x) {
        const double u = (static_cast<double>(x) - cx) / (ow / 2);
        const double v = (static_cast<double>(y) - (base - oh / 2)) / (oh / 2);
        if (std::abs(u) > 1 || std::abs(v) > 1 || (ellipse && u * u + v * v > 1)) continue;
        const double shade = std::clamp(0.75 + 0.35 * light * u, 0.25, 1.1) * (0.85 + 0.3 * fine(static_cast<double>(y) + 97, static_cast<double>(x)));
        double spec = 0.0;
        if (specular) {
          const double d2 = ((static_cast<double>(y) - hy) * (static_cast<double>(y) - hy) +
                             (static_cast<double>(x) - hx) * (static_cast<double>(x) - hx)) / (hr * hr);
          spec = std::exp(-d2);
        }
        for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = col[c] * shade * (1 - spec) + 0.98 * spec;
        s.depth.at(0, y, x) = depth;
      }
  }
  for (double& v : s.image.data()) v = std::clamp(v, 0.0, 1.0);
  return s;
}

/// Stationary multi-scale texture with no horizon or objects: a short
/// correlation length keeps local patches statistically similar to the whole.
inline Tensor make_texture(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed, {0x7e47});
  const ValueNoise n0(rng.next(), 3.0, 2), n1(rng.next(), 3.0, 2), n2(rng.next(), 3.0, 2), lum(rng.next(), 6.0, 3);
  Tensor t({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      const double l = 0.3 + 0.7 * lum(fy, fx);
      t.at(0, y, x) = std::clamp(l * (0.4 + 0.6 * n0(fy, fx)), 0.0, 1.0);
      t.at(1, y, x) = std::clamp(l * (0.4 + 0.6 * n1(fy, fx)), 0.0, 1.0);
      t.at(2, y, x) = std::clamp(l * (0.4 + 0.6 * n2(fy, fx)), 0.0, 1.0);
    }
  return t;
}

struct HazyScene {
  Tensor clear;
  Tensor hazy;
  Tensor transmission;  // 1 x H x W
  Rgb airlight{};
  double beta = 1.0;
};

/// t = exp(-beta * depth), clamped to [t_min, 1]; gray airlight.
inline HazyScene make_hazy_scene(const Scene& scene, double beta, double airlight, double t_min = kDefaultTMin) {
  HazyScene out;
  out.clear = scene.image;
  out.beta = beta;
  out.airlight = {airlight, airlight, airlight};
  out.transmission = Tensor(scene.depth.shape());
  for (std::size_t p = 0; p < scene.depth.size(); ++p)
    out.transmission[p] = std::clamp(std::exp(-beta * scene.depth[p]), t_min, 1.0);
  out.hazy = apply_haze(scene.image, out.transmission, out.airlight);
  return out;
}

}  // namespace fpcnet::scenes
