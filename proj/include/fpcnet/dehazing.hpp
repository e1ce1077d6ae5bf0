#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "fpcnet/color_constancy.hpp"
#include "fpcnet/ensemble.hpp"
#include "fpcnet/network.hpp"
#include "fpcnet/parallel.hpp"
#include "fpcnet/trainer.hpp"

namespace fpcnet {

inline constexpr double kDefaultTMin = 0.1;

/// I_c = J_c t + A_c (1 - t) for a single scalar t in (0, 1].
inline Tensor synthesize_hazy_patch(const Tensor& J, double t, const Rgb& A) {
  if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("transmission must lie in (0, 1], got " + std::to_string(t));
  if (J.channels() != 3) throw dimension_error("haze synthesis needs an RGB patch, got " + J.shape().str());
  Tensor I(J.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    const auto src = J.channel(c);
    auto dst = I.channel(c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * t + A[c] * (1.0 - t);
  }
  return I;
}

/// Same model with a per-pixel transmission field (1 x H x W).
inline Tensor apply_haze(const Tensor& J, const Tensor& t, const Rgb& A) {
  if (t.channels() != 1 || t.height() != J.height() || t.width() != J.width())
    throw dimension_error("transmission field " + t.shape().str() + " does not cover image " + J.shape().str());
  Tensor I(J.shape());
  for (std::size_t c = 0; c < J.channels(); ++c)
    for (std::size_t p = 0; p < t.size(); ++p) I.channel(c)[p] = J.channel(c)[p] * t[p] + A[c] * (1.0 - t[p]);
  return I;
}

/// J_c = (I_c - A_c) / max(t, t_min) + A_c. Not clipped in memory.
inline Tensor recover_clear(const Tensor& I, const Tensor& t, const Rgb& A, double t_min = kDefaultTMin) {
  detail::require_positive(A);
  if (t.channels() != 1 || t.height() != I.height() || t.width() != I.width())
    throw dimension_error("transmission field " + t.shape().str() + " does not cover image " + I.shape().str());
  Tensor J(I.shape());
  for (std::size_t c = 0; c < I.channels(); ++c)
    for (std::size_t p = 0; p < t.size(); ++p)
      J.channel(c)[p] = (I.channel(c)[p] - A[c]) / std::max(t[p], t_min) + A[c];
  return J;
}

inline Tensor clip01(Tensor x) {
  for (double& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

/// Minimum over channels, then over a centered window x window neighbourhood
/// (clipped at the borders). Computed separably.
inline Tensor dark_channel(const Tensor& I, std::size_t window) {
  const std::size_t H = I.height(), W = I.width(), r = window / 2;
  Tensor m({1, H, W}, std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < I.channels(); ++c)
    for (std::size_t p = 0; p < m.size(); ++p) m[p] = std::min(m[p], I.channel(c)[p]);
  Tensor rows({1, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double v = std::numeric_limits<double>::infinity();
      for (std::size_t xx = x > r ? x - r : 0; xx <= std::min(W - 1, x + r); ++xx) v = std::min(v, m.at(0, y, xx));
      rows.at(0, y, x) = v;
    }
  Tensor out({1, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double v = std::numeric_limits<double>::infinity();
      for (std::size_t yy = y > r ? y - r : 0; yy <= std::min(H - 1, y + r); ++yy) v = std::min(v, rows.at(0, yy, x));
      out.at(0, y, x) = v;
    }
  return out;
}

/// Picks the brightest 0.1% of the 15x15 dark channel (ties at the threshold
/// included) and returns the per-channel maximum intensity over those pixels.
inline Rgb estimate_atmospheric_light(const Tensor& I, std::size_t window = 15, double fraction = 0.001) {
  if (I.channels() != 3 || I.empty()) throw dimension_error("atmospheric light needs an RGB image");
  const Tensor dark = dark_channel(I, window);
  std::vector<double> sorted(dark.data().begin(), dark.data().end());
  const std::size_t n = sorted.size();
  const std::size_t top = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n - top), sorted.end());
  const double threshold = sorted[n - top];
  Rgb A{0.0, 0.0, 0.0};
  for (std::size_t p = 0; p < n; ++p) {
    if (dark[p] < threshold) continue;
    for (std::size_t c = 0; c < 3; ++c) A[c] = std::max(A[c], I.channel(c)[p]);
  }
  for (double& v : A) v = std::max(v, 1e-6);
  return A;
}

/// Dark-channel-prior baseline: t = 1 - omega * dark_channel(I / A), clamped to [t_min, 1].
inline Tensor dcp_transmission(const Tensor& I, const Rgb& A, double omega = 0.95, std::size_t window = 15,
                               double t_min = kDefaultTMin) {
  detail::require_positive(A);
  Tensor normalized = I;
  for (std::size_t c = 0; c < 3; ++c)
    for (double& v : normalized.channel(c)) v /= A[c];
  Tensor t = dark_channel(normalized, window);
  for (double& v : t.data()) v = std::clamp(1.0 - omega * v, t_min, 1.0);
  return t;
}

/// DCP with a window covering the whole patch: one scalar per patch.
inline double dcp_patch_transmission(const Tensor& patch, const Rgb& A, double omega = 0.95,
                                     double t_min = kDefaultTMin) {
  detail::require_positive(A);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < 3; ++c)
    for (double v : patch.channel(c)) m = std::min(m, v / A[c]);
  return std::clamp(1.0 - omega * m, t_min, 1.0);
}

inline double predict_transmission(const NetworkSpec& spec, const ParamStore& params, const Tensor& patch) {
  if (spec.output_size() != 1) throw dimension_error("model '" + spec.name + "' does not have a single output");
  return forward(spec, params, patch)[0];
}

struct TransmissionMapConfig {
  std::size_t patch = 16;
  std::size_t stride = 8;
  double t_min = kDefaultTMin;
  bool shuffle = true;  // feed each window as a pixel-ensemble
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Window origins along one axis: every `stride`, plus an edge-aligned last window.
inline std::vector<std::size_t> window_origins(std::size_t n, std::size_t patch, std::size_t stride) {
  if (n < patch) throw dimension_error("image extent " + std::to_string(n) + " smaller than patch " + std::to_string(patch));
  std::vector<std::size_t> o;
  for (std::size_t p = 0; p + patch <= n; p += stride) o.push_back(p);
  if (o.back() + patch < n) o.push_back(n - patch);
  return o;
}

/// Sliding-window transmission: each window's prediction is averaged into
/// every pixel it covers, then clamped to [t_min, 1].
inline Tensor transmission_map(const Tensor& image, const NetworkSpec& spec, const ParamStore& params,
                               const TransmissionMapConfig& cfg = {}) {
  const std::size_t P = cfg.patch;
  if (spec.input_shape != Shape{3, P, P})
    throw dimension_error("model input " + spec.input_shape.str() + " does not match patch size " + std::to_string(P));
  const auto ys = window_origins(image.height(), P, cfg.stride);
  const auto xs = window_origins(image.width(), P, cfg.stride);
  std::vector<double> preds(ys.size() * xs.size());
  parallel_for(preds.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t y0 = ys[i / xs.size()], x0 = xs[i % xs.size()];
    Tensor patch({3, P, P});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x) patch.at(c, y, x) = image.at(c, y0 + y, x0 + x);
    if (cfg.shuffle) patch = shuffle_image(patch, derive_seed(cfg.seed, {i})).pixels;
    preds[i] = predict_transmission(spec, params, patch);
  });
  Tensor sum({1, image.height(), image.width()});
  std::vector<std::uint32_t> count(sum.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::size_t y0 = ys[i / xs.size()], x0 = xs[i % xs.size()];
    for (std::size_t y = y0; y < y0 + P; ++y)
      for (std::size_t x = x0; x < x0 + P; ++x) {
        sum.at(0, y, x) += preds[i];
        ++count[y * image.width() + x];
      }
  }
  for (std::size_t p = 0; p < sum.size(); ++p) sum[p] = std::clamp(sum[p] / count[p], cfg.t_min, 1.0);
  return sum;
}

// ---------------------------------------------------------------- metrics

/// 10 log10(1 / mse), capped at 99 dB for mse < 1e-10.
inline double psnr_from_mse(double mse) { return mse < 1e-10 ? 99.0 : 10.0 * std::log10(1.0 / mse); }

inline double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw dimension_error("shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double psnr(const Tensor& a, const Tensor& b) { return psnr_from_mse(mse(a, b)); }

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, evaluated where the window fits and averaged
/// over positions and channels.
inline double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw dimension_error("shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  constexpr std::size_t kWin = 11;
  if (a.height() < kWin || a.width() < kWin) throw dimension_error("ssim needs images of at least 11x11");
  std::array<double, kWin * kWin> g{};
  double gsum = 0.0;
  for (std::size_t i = 0; i < kWin; ++i)
    for (std::size_t j = 0; j < kWin; ++j) {
      const double dy = static_cast<double>(i) - 5.0, dx = static_cast<double>(j) - 5.0;
      g[i * kWin + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      gsum += g[i * kWin + j];
    }
  for (double& v : g) v /= gsum;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    for (std::size_t y = 0; y + kWin <= a.height(); ++y) {
      for (std::size_t x = 0; x + kWin <= a.width(); ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < kWin; ++i)
          for (std::size_t j = 0; j < kWin; ++j) {
            const double w = g[i * kWin + j];
            const double va = a.at(c, y + i, x + j), vb = b.at(c, y + i, x + j);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- patch dataset

struct DhRecord {
  Tensor patch;  // hazy, 3 x P x P
  double t = 1.0;
  Rgb A{1.0, 1.0, 1.0};
  std::uint32_t source = 0;
  bool test = false;
};

struct DhSynthConfig {
  std::size_t patches = 30000;  // clear patches drawn
  std::size_t levels = 1;       // hazy variants per clear patch
  std::size_t patch = 16;
  double t_lo = 0.1, t_hi = 1.0;
  double a_lo = 0.7, a_hi = 1.0;
  double test_fraction = 0.2;
  bool shuffle = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(t_lo > 0.0 && t_lo <= t_hi && t_hi <= 1.0)) throw std::invalid_argument("t range must satisfy 0 < lo <= hi <= 1");
    if (!(a_lo > 0.0 && a_lo <= a_hi)) throw std::invalid_argument("A range must satisfy 0 < lo <= hi");
    if (patch == 0 || levels == 0) throw std::invalid_argument("patch size and levels must be positive");
  }
};

/// Samples clear patches from random images, draws t per hazy variant and one
/// gray airlight per source image, and tags records by an image-level split.
inline std::vector<DhRecord> synthesize_dh_dataset(const std::vector<Tensor>& clear, const DhSynthConfig& cfg) {
  cfg.validate();
  if (clear.empty()) throw data_error("no clear images given");
  for (const Tensor& img : clear)
    if (img.channels() != 3 || img.height() < cfg.patch || img.width() < cfg.patch)
      throw dimension_error("clear image " + img.shape().str() + " smaller than the patch size");
  const auto is_test = split_images(clear.size(), cfg.test_fraction, cfg.seed);
  std::vector<double> airlight(clear.size());
  for (std::size_t i = 0; i < clear.size(); ++i) {
    Rng rng(cfg.seed, {0xa1a1, i});
    airlight[i] = rng.uniform(cfg.a_lo, cfg.a_hi);
  }
  std::vector<DhRecord> out;
  out.reserve(cfg.patches * cfg.levels);
  const std::size_t P = cfg.patch;
  for (std::size_t n = 0; n < cfg.patches; ++n) {
    Rng rng(cfg.seed, {0xd4d4, n});
    const std::size_t img = rng.below(clear.size());
    const Tensor& src = clear[img];
    const std::size_t y0 = rng.below(src.height() - P + 1), x0 = rng.below(src.width() - P + 1);
    Tensor J({3, P, P});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x) J.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    if (cfg.shuffle) J = shuffle_image(J, rng.next()).pixels;
    const Rgb A{airlight[img], airlight[img], airlight[img]};
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      const double t = rng.uniform(cfg.t_lo, cfg.t_hi);
      out.push_back({synthesize_hazy_patch(J, t, A), t, A, static_cast<std::uint32_t>(img), is_test[img]});
    }
  }
  return out;
}

/// View over the records of one split, exposed as (patch, {t}) samples.
class DhDataset : public Dataset {
 public:
  DhDataset(const std::vector<DhRecord>& records, bool test_split) {
    for (const DhRecord& r : records)
      if (r.test == test_split) records_.push_back(&r);
  }
  std::size_t size() const override { return records_.size(); }
  Sample get(std::size_t index) const override { return {records_[index]->patch, {records_[index]->t}}; }
  const DhRecord& record(std::size_t index) const { return *records_[index]; }

 private:
  std::vector<const DhRecord*> records_;
};

struct DhEvaluation {
  double model_mse = 0.0;
  double dcp_mse = 0.0;
  std::size_t count = 0;
};

/// Transmission MSE on the test split for the model and for DCP given the true airlight.
inline DhEvaluation evaluate_dh(const std::vector<DhRecord>& records, const NetworkSpec& spec, const ParamStore& params,
                                std::size_t threads = 1) {
  const DhDataset test(records, true);
  std::vector<double> model_err(test.size()), dcp_err(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const DhRecord& r = test.record(i);
    const double m = predict_transmission(spec, params, r.patch) - r.t;
    const double d = dcp_patch_transmission(r.patch, r.A) - r.t;
    model_err[i] = m * m;
    dcp_err[i] = d * d;
  });
  DhEvaluation ev;
  ev.count = test.size();
  if (ev.count == 0) return ev;
  ev.model_mse = stats::mean(model_err);
  ev.dcp_mse = stats::mean(dcp_err);
  return ev;
}

// Binary layout, little-endian:
//   "FPDH" | u8 version (1) | u8 channels | u16 patch | u32 count
//   count x { u32 source | u8 split (1 = test) | f32 t | f32 A[3] | f32 patch[C*P*P] in (c, y, x) order }

namespace detail {

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_f32(std::vector<unsigned char>& b, double v) { put_u32(b, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

struct ByteReader {
  const std::vector<unsigned char>& b;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) {
    if (pos + n > b.size())
      throw data_error(path + ": truncated dataset, needed " + std::to_string(n) + " bytes at offset " +
                       std::to_string(pos) + ", file has " + std::to_string(b.size()));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b[pos] | (b[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return b[pos++];
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
};

}  // namespace detail

inline void write_dh_dataset(const std::filesystem::path& path, const std::vector<DhRecord>& records) {
  std::vector<unsigned char> b{'F', 'P', 'D', 'H', 1};
  const std::size_t C = records.empty() ? 3 : records[0].patch.channels();
  const std::size_t P = records.empty() ? 16 : records[0].patch.height();
  b.push_back(static_cast<unsigned char>(C));
  b.push_back(static_cast<unsigned char>(P & 0xff));
  b.push_back(static_cast<unsigned char>(P >> 8));
  detail::put_u32(b, static_cast<std::uint32_t>(records.size()));
  for (const DhRecord& r : records) {
    if (r.patch.shape() != Shape{C, P, P}) throw dimension_error("dataset records must share one patch shape");
    detail::put_u32(b, r.source);
    b.push_back(r.test ? 1 : 0);
    detail::put_f32(b, r.t);
    for (double a : r.A) detail::put_f32(b, a);
    for (double v : r.patch.data()) detail::put_f32(b, v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw data_error("failed writing " + path.string());
}

inline std::vector<DhRecord> read_dh_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  detail::ByteReader r{bytes, 0, path.string()};
  r.need(4);
  if (std::memcmp(bytes.data(), "FPDH", 4) != 0) throw data_error(path.string() + ": bad magic at offset 0");
  r.pos = 4;
  const auto version = r.u8();
  if (version != 1) throw data_error(path.string() + ": unsupported version " + std::to_string(version) + " at offset 4");
  const std::size_t C = r.u8();
  const std::size_t P = r.u16();
  const std::size_t count = r.u32();
  std::vector<DhRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    DhRecord rec;
    rec.source = r.u32();
    rec.test = r.u8() != 0;
    rec.t = r.f32();
    for (double& a : rec.A) a = r.f32();
    rec.patch = Tensor({C, P, P});
    for (double& v : rec.patch.data()) v = r.f32();
    out.push_back(std::move(rec));
  }
  if (r.pos != bytes.size())
    throw data_error(path.string() + ": " + std::to_string(bytes.size() - r.pos) + " trailing bytes after offset " +
                     std::to_string(r.pos));
  return out;
}

}  // namespace fpcnet
