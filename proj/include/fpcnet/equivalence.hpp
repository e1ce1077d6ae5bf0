#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "fpcnet/ensemble.hpp"
#include "fpcnet/layers.hpp"
#include "fpcnet/stats.hpp"

namespace fpcnet {

/// Per (output, input) channel sum of a kernel's spatial weights.
struct CollapsedKernel {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> sums;  // (out, in)

  double at(std::size_t o, std::size_t c) const { return sums[o * in + c]; }

  /// The equivalent 1x1 kernel, bias carried over.
  KernelWeights as_pointwise(const std::vector<double>& bias) const {
    KernelWeights w(out, in, 1, 1);
    w.weights = sums;
    w.bias = bias;
    return w;
  }
};

inline CollapsedKernel collapse_kernel(const KernelWeights& k) {
  CollapsedKernel r{k.out, k.in, std::vector<double>(k.out * k.in, 0.0)};
  for (std::size_t o = 0; o < k.out; ++o)
    for (std::size_t c = 0; c < k.in; ++c)
      for (std::size_t i = 0; i < k.kh; ++i)
        for (std::size_t j = 0; j < k.kw; ++j) r.sums[o * k.in + c] += k.w(o, c, i, j);
  return r;
}

struct EquivalenceReport {
  double exact_output = 0.0;      // k x k conv then average pool over the k^2 positions
  double collapsed_output = 0.0;  // collapsed 1x1 conv then global average
  double abs_diff = 0.0;
  double rel_diff = 0.0;
  std::size_t k = 0;
  std::size_t channels = 0;
  std::uint64_t seed = 0;
  std::string source;
};

/// Evaluates both sides of the kernel-collapse identity on a single
/// C x (2k-1) x (2k-1) input with a single-output k x k kernel (stride 1, no
/// padding). The two sides agree exactly when every k x k sub-block has the
/// same channel means as the whole input, and approximately for i.i.d. pixels.
inline EquivalenceReport verify_equivalence(const Tensor& input, const KernelWeights& kernel) {
  const std::size_t k = kernel.kh;
  if (kernel.kw != k || k == 0) throw dimension_error("equivalence check needs a square kernel");
  if (kernel.out != 1) throw dimension_error("equivalence check needs a single-output kernel");
  if (input.height() != 2 * k - 1 || input.width() != 2 * k - 1)
    throw dimension_error("input must be " + std::to_string(2 * k - 1) + "x" + std::to_string(2 * k - 1) +
                          " for a " + std::to_string(k) + "x" + std::to_string(k) + " kernel, got " +
                          input.shape().str());
  if (input.channels() != kernel.in)
    throw dimension_error("channel axis mismatch: input has " + std::to_string(input.channels()) +
                          " channels, kernel expects " + std::to_string(kernel.in));

  const Tensor conv = conv2d_forward(input, kernel, 0, 1);  // 1 x k x k
  const double exact = avg_pool_forward(conv, k, 0, k)[0];

  const Tensor pw = pointwise_conv_forward(input, collapse_kernel(kernel).as_pointwise(kernel.bias));
  const double collapsed = avg_pool_forward(pw, 2 * k - 1, 0, 2 * k - 1)[0];

  EquivalenceReport r;
  r.exact_output = exact;
  r.collapsed_output = collapsed;
  r.abs_diff = std::abs(exact - collapsed);
  r.rel_diff = exact == 0.0 ? (r.abs_diff == 0.0 ? 0.0 : 1.0) : r.abs_diff / std::abs(exact);
  r.k = k;
  r.channels = input.channels();
  r.source = "custom";
  return r;
}

/// Kernel with weights uniform in [-1, 1] and zero bias.
inline KernelWeights random_kernel(std::size_t channels, std::size_t k, Rng& rng) {
  KernelWeights w(1, channels, k, k);
  for (double& v : w.weights) v = rng.uniform(-1.0, 1.0);
  return w;
}

/// Contiguous (unshuffled) crop with top-left corner (y0, x0).
inline Tensor crop(const Tensor& image, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > image.height() || x0 + w > image.width())
    throw dimension_error("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y0) +
                          "," + std::to_string(x0) + ") leaves image " + image.shape().str());
  Tensor out({image.channels(), h, w});
  for (std::size_t c = 0; c < image.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

/// Paired trials: trial t draws one random kernel and applies it to a
/// shuffled ensemble and to an unshuffled crop of the same image.
struct PairedTrials {
  std::vector<EquivalenceReport> shuffled;
  std::vector<EquivalenceReport> unshuffled;
};

inline PairedTrials equivalence_trials(const Tensor& image, std::size_t k, std::size_t trials, std::uint64_t seed) {
  if (k < 2) throw dimension_error("kernel size must be at least 2");
  const std::size_t side = 2 * k - 1;
  if (image.height() < side || image.width() < side)
    throw dimension_error("image " + image.shape().str() + " smaller than the " + std::to_string(side) + "x" +
                          std::to_string(side) + " equivalence input");
  PairedTrials out;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng krng(seed, {0xc011, k, t, 0});
    const KernelWeights kernel = random_kernel(image.channels(), k, krng);

    Rng srng(seed, {0xc011, k, t, 1});
    auto s = verify_equivalence(sample_ensemble(image, side, side, srng).pixels, kernel);
    s.seed = seed;
    s.source = "shuffled";
    out.shuffled.push_back(s);

    Rng urng(seed, {0xc011, k, t, 2});
    const std::size_t y0 = urng.below(image.height() - side + 1);
    const std::size_t x0 = urng.below(image.width() - side + 1);
    auto u = verify_equivalence(crop(image, y0, x0, side, side), kernel);
    u.seed = seed;
    u.source = "unshuffled";
    out.unshuffled.push_back(u);
  }
  return out;
}

struct SweepRow {
  std::size_t k = 0;
  std::size_t channels = 0;
  std::size_t trials = 0;
  double shuffled_mean_diff = 0.0;
  double unshuffled_mean_diff = 0.0;
  double p95_shuffled = 0.0;
  double p95_unshuffled = 0.0;
};

inline SweepRow summarize(const PairedTrials& t, std::size_t k, std::size_t channels) {
  auto diffs = [](const std::vector<EquivalenceReport>& rs) {
    std::vector<double> d;
    for (const auto& r : rs) d.push_back(r.abs_diff);
    std::sort(d.begin(), d.end());
    return d;
  };
  const auto s = diffs(t.shuffled), u = diffs(t.unshuffled);
  SweepRow row{k, channels, s.size()};
  if (s.empty()) return row;
  row.shuffled_mean_diff = stats::mean(s);
  row.unshuffled_mean_diff = stats::mean(u);
  row.p95_shuffled = stats::nearest_rank(s, 0.95);
  row.p95_unshuffled = stats::nearest_rank(u, 0.95);
  return row;
}

inline std::vector<SweepRow> sweep_equivalence(const Tensor& image, const std::vector<std::size_t>& ks,
                                               std::size_t trials, std::uint64_t seed) {
  std::vector<SweepRow> rows;
  for (std::size_t k : ks) rows.push_back(summarize(equivalence_trials(image, k, trials, seed), k, image.channels()));
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "k,channels,trials,shuffled_mean_diff,unshuffled_mean_diff,p95_shuffled,p95_unshuffled\n";
  const auto old = os.precision(10);
  for (const auto& r : rows)
    os << r.k << ',' << r.channels << ',' << r.trials << ',' << r.shuffled_mean_diff << ','
       << r.unshuffled_mean_diff << ',' << r.p95_shuffled << ',' << r.p95_unshuffled << '\n';
  os.precision(old);
}

}  // namespace fpcnet
