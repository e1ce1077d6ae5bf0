#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "fpcnet/ensemble.hpp"
#include "fpcnet/network.hpp"
#include "fpcnet/parallel.hpp"
#include "fpcnet/stats.hpp"
#include "fpcnet/trainer.hpp"

namespace fpcnet {

using Rgb = std::array<double, 3>;

inline double l2_norm(const Rgb& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

/// Illuminant color cast, stored with unit L2 norm and strictly positive components.
struct IlluminantEstimate {
  Rgb e{1.0 / std::numbers::sqrt3, 1.0 / std::numbers::sqrt3, 1.0 / std::numbers::sqrt3};

  static IlluminantEstimate from(const Rgb& raw) {
    for (double v : raw)
      if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("illuminant components must be positive");
    const double n = l2_norm(raw);
    return {{raw[0] / n, raw[1] / n, raw[2] / n}};
  }
};

namespace detail {
inline void require_positive(const Rgb& e) {
  for (double v : e)
    if (!(v > 0.0) || !std::isfinite(v))
      throw std::invalid_argument("color cast components must be positive and finite");
}
}  // namespace detail

/// I_c = J_c * E_c. No clipping; values above 1 survive in memory.
inline Tensor apply_cast(const Tensor& J, const Rgb& E) {
  detail::require_positive(E);
  if (J.channels() != 3) throw dimension_error("apply_cast needs an RGB image, got " + J.shape().str());
  Tensor I = J;
  for (std::size_t c = 0; c < 3; ++c)
    for (double& v : I.channel(c)) v *= E[c];
  return I;
}

/// J_c = I_c / E_c with E rescaled so that its green component is 1.
inline Tensor correct_image(const Tensor& I, const Rgb& E) {
  detail::require_positive(E);
  if (I.channels() != 3) throw dimension_error("correct_image needs an RGB image, got " + I.shape().str());
  Tensor J = I;
  for (std::size_t c = 0; c < 3; ++c) {
    const double scale = E[1] / E[c];
    for (double& v : J.channel(c)) v *= scale;
  }
  return J;
}

/// Angle between two casts in degrees; scale invariant.
inline double angular_error(const Rgb& est, const Rgb& gt) {
  const double ne = l2_norm(est), ng = l2_norm(gt);
  if (ne == 0.0 || ng == 0.0) throw std::invalid_argument("angular error of a zero vector");
  const double cosine = (est[0] * gt[0] + est[1] * gt[1] + est[2] * gt[2]) / (ne * ng);
  return std::acos(std::clamp(cosine, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

/// Gray-world baseline: the cast is proportional to the per-channel mean.
inline IlluminantEstimate gray_world(const Tensor& image) {
  if (image.channels() != 3) throw dimension_error("gray_world needs an RGB image, got " + image.shape().str());
  Rgb m{};
  for (std::size_t c = 0; c < 3; ++c) m[c] = stats::mean(image.channel(c));
  if (m[0] <= 0.0 && m[1] <= 0.0 && m[2] <= 0.0) throw std::invalid_argument("gray world of an all-black image");
  for (double& v : m) v = std::max(v, 1e-12);
  return IlluminantEstimate::from(m);
}

/// Runs the model on `n_ensembles` pixel-ensembles and takes the per-channel
/// (lower) median of the three heads. Non-positive medians are floored at
/// 1e-9 before normalization.
inline IlluminantEstimate estimate_illuminant(const Tensor& image, const NetworkSpec& spec, const ParamStore& params,
                                              std::size_t n_ensembles = 128, std::uint64_t seed = 0,
                                              std::size_t threads = 1) {
  if (spec.input_shape.c != 3 || spec.output_size() != 3)
    throw dimension_error("model '" + spec.name + "' is not a 3-head color-constancy model");
  if (n_ensembles == 0) throw std::invalid_argument("need at least one ensemble");
  std::vector<Rgb> preds(n_ensembles);
  parallel_for(n_ensembles, threads, [&](std::size_t i) {
    Rng rng(seed, {0xcc17, i});
    const auto e = sample_ensemble(image, spec.input_shape.h, spec.input_shape.w, rng);
    const auto out = forward(spec, params, e.pixels);
    preds[i] = {out[0], out[1], out[2]};
  });
  Rgb med{};
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> v;
    for (const Rgb& p : preds) v.push_back(p[c]);
    med[c] = std::max(stats::lower_median(std::move(v)), 1e-9);
  }
  return IlluminantEstimate::from(med);
}

struct CCMetrics {
  double mean = 0, median = 0, trimean = 0, best25 = 0, worst25 = 0, q95 = 0;
};

/// Mean, lower median, trimean (nearest-rank quartiles), mean of the best and
/// worst max(1, n/4) errors, and the nearest-rank 95% quantile.
inline CCMetrics cc_metrics(std::vector<double> errors) {
  if (errors.empty()) throw std::invalid_argument("cc_metrics of an empty list");
  std::sort(errors.begin(), errors.end());
  const std::size_t n = errors.size();
  const std::size_t quarter = std::max<std::size_t>(1, n / 4);
  CCMetrics m;
  m.mean = stats::mean(errors);
  m.median = errors[(n - 1) / 2];
  m.trimean = (stats::nearest_rank(errors, 0.25) + 2.0 * m.median + stats::nearest_rank(errors, 0.75)) / 4.0;
  m.best25 = stats::mean(std::span<const double>(errors.data(), quarter));
  m.worst25 = stats::mean(std::span<const double>(errors.data() + n - quarter, quarter));
  m.q95 = stats::nearest_rank(errors, 0.95);
  return m;
}

inline void write_cc_metrics_header(std::ostream& os) { os << "method,mean,median,trimean,best25,worst25,q95\n"; }

inline void write_cc_metrics_row(std::ostream& os, const std::string& method, const CCMetrics& m) {
  const auto old = os.precision(6);
  os << method << ',' << m.mean << ',' << m.median << ',' << m.trimean << ',' << m.best25 << ',' << m.worst25 << ','
     << m.q95 << '\n';
  os.precision(old);
}

// ---------------------------------------------------------------- synthetic data

/// One (image, cast) pair. `cast` is G-normalized: (R/G, 1, B/G).
struct CastEntry {
  std::size_t image = 0;
  Rgb cast{1.0, 1.0, 1.0};
};

/// Draws R/G and B/G uniformly in [lo, hi].
inline Rgb draw_cast(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), 1.0, rng.uniform(lo, hi)}; }

/// Deterministic image-level split; returns one flag per image (true = test).
/// At least one image lands on each side when there are two or more images and
/// the fraction is strictly between 0 and 1.
inline std::vector<bool> split_images(std::size_t n, double test_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, {0x5b11});
  rng.shuffle(std::span<std::size_t>(order));
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n >= 2 && test_fraction > 0.0 && test_fraction < 1.0) n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  std::vector<bool> test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) test[order[i]] = true;
  return test;
}

struct CcSynthesis {
  std::vector<CastEntry> train;
  std::vector<CastEntry> test;
  std::vector<bool> is_test_image;
};

/// Draws `casts_per_image` casts per clear image and splits by image.
inline CcSynthesis synthesize_cc_casts(std::size_t n_images, std::size_t casts_per_image, double e_lo, double e_hi,
                                       std::uint64_t seed, double test_fraction = 0.2) {
  if (!(e_lo > 0.0) || e_hi < e_lo) throw std::invalid_argument("cast range must satisfy 0 < lo <= hi");
  CcSynthesis s;
  s.is_test_image = split_images(n_images, test_fraction, seed);
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t j = 0; j < casts_per_image; ++j) {
      Rng rng(seed, {0xca57, i, j});
      CastEntry e{i, draw_cast(rng, e_lo, e_hi)};
      (s.is_test_image[i] ? s.test : s.train).push_back(e);
    }
  }
  return s;
}

/// Training samples: an ensemble drawn from image `cast.image` (multiplied by
/// the cast when the stored images are clear) with the unit-norm cast as
/// target. With edge augmentation the index space doubles and the upper half
/// draws from the per-channel gradient-magnitude image, which carries the same
/// cast.
class CcDataset : public Dataset {
 public:
  CcDataset(std::shared_ptr<const std::vector<Tensor>> images, std::vector<CastEntry> casts, bool images_are_clear,
            std::size_t ensembles_per_cast, Shape input, std::uint64_t seed, bool edge_augment = false)
      : images_(std::move(images)),
        casts_(std::move(casts)),
        clear_(images_are_clear),
        per_cast_(ensembles_per_cast),
        input_(input),
        seed_(seed) {
    if (edge_augment) {
      auto edges = std::make_shared<std::vector<Tensor>>();
      for (const Tensor& t : *images_) edges->push_back(fpcnet::edge_augment(t));
      edges_ = std::move(edges);
    }
  }

  std::size_t size() const override { return casts_.size() * per_cast_ * (edges_ ? 2 : 1); }

  Sample get(std::size_t index) const override {
    const std::size_t base = casts_.size() * per_cast_;
    const bool edge = index >= base;
    const std::size_t i = edge ? index - base : index;
    const CastEntry& ce = casts_[i / per_cast_];
    const Tensor& src = edge ? (*edges_)[ce.image] : (*images_)[ce.image];
    Rng rng(seed_, {0xda7a, index});
    PixelEnsemble e = sample_ensemble(src, input_.h, input_.w, rng);
    if (clear_) e.pixels = apply_cast(e.pixels, ce.cast);
    const auto target = IlluminantEstimate::from(ce.cast).e;
    return {std::move(e.pixels), {target[0], target[1], target[2]}};
  }

 private:
  std::shared_ptr<const std::vector<Tensor>> images_;
  std::shared_ptr<const std::vector<Tensor>> edges_;
  std::vector<CastEntry> casts_;
  bool clear_;
  std::size_t per_cast_;
  Shape input_;
  std::uint64_t seed_;
};

struct CcEvaluation {
  std::vector<double> model_errors;
  std::vector<double> gray_world_errors;
};

/// Angular errors of the model and of gray world on each cast entry.
inline CcEvaluation evaluate_cc(const std::vector<Tensor>& images, const std::vector<CastEntry>& casts,
                                bool images_are_clear, const NetworkSpec& spec, const ParamStore& params,
                                std::size_t n_ensembles, std::uint64_t seed, std::size_t threads = 1) {
  CcEvaluation ev;
  for (std::size_t i = 0; i < casts.size(); ++i) {
    const CastEntry& ce = casts[i];
    const Tensor I = images_are_clear ? apply_cast(images[ce.image], ce.cast) : images[ce.image];
    const auto est = estimate_illuminant(I, spec, params, n_ensembles, derive_seed(seed, {i}), threads);
    ev.model_errors.push_back(angular_error(est.e, ce.cast));
    ev.gray_world_errors.push_back(angular_error(gray_world(I).e, ce.cast));
  }
  return ev;
}

}  // namespace fpcnet
