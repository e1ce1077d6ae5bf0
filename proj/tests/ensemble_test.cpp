#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fpcnet/ensemble.hpp"
#include "fpcnet/scenes.hpp"
#include "test_util.hpp"

using namespace fpcnet;
using fpcnet::test_util::random_tensor;

namespace {

std::vector<double> sorted_channel(const Tensor& t, std::size_t c) {
  std::vector<double> v(t.channel(c).begin(), t.channel(c).end());
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST(Shuffle, ConstantImageUnchanged) {
  const Tensor x({3, 8, 8}, 0.25);
  EXPECT_EQ(shuffle_image(x, 3).pixels, x);
}

TEST(Shuffle, PreservesPerChannelMultiset) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = random_tensor({3, 7, 9}, seed, 0.0, 1.0);
    const auto e = shuffle_image(x, seed);
    ASSERT_EQ(e.pixels.shape(), x.shape());
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(sorted_channel(e.pixels, c), sorted_channel(x, c));
  }
}

TEST(Shuffle, FullPermutationRecorded) {
  const Tensor x = random_tensor({2, 6, 5}, 1);
  const auto e = shuffle_image(x, 11);
  std::set<std::uint32_t> seen(e.permutation.begin(), e.permutation.end());
  EXPECT_EQ(seen.size(), 30u);
  EXPECT_EQ(*seen.rbegin(), 29u);
  for (std::size_t i = 0; i < 30; ++i) {
    const auto [y, xx] = e.source(i);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(e.pixels.channel(c)[i], x.at(c, y, xx));
  }
}

TEST(Shuffle, DeterministicPerSeed) {
  const Tensor x = random_tensor({3, 16, 16}, 2);
  EXPECT_EQ(shuffle_image(x, 42).pixels, shuffle_image(x, 42).pixels);
  EXPECT_EQ(shuffle_image(x, 42).permutation, shuffle_image(x, 42).permutation);
  EXPECT_NE(shuffle_image(x, 42).permutation, shuffle_image(x, 43).permutation);
}

TEST(Shuffle, EmptyImageRejected) { EXPECT_THROW(shuffle_image(Tensor(), 1), dimension_error); }

TEST(SampleEnsembles, PaperTestingShape) {
  const Tensor x = random_tensor({3, 512, 512}, 3, 0.0, 1.0);
  const auto es = sample_ensembles(x, 128, 32, 32, 5);
  ASSERT_EQ(es.size(), 128u);
  for (const auto& e : es) {
    EXPECT_EQ(e.pixels.shape(), (Shape{3, 32, 32}));
    EXPECT_EQ(std::set<std::uint32_t>(e.permutation.begin(), e.permutation.end()).size(), 1024u);
    for (auto p : e.permutation) EXPECT_LT(p, 512u * 512u);
  }
}

TEST(SampleEnsembles, FullSizeIsAPermutation) {
  const Tensor x = random_tensor({3, 6, 6}, 4);
  const auto e = sample_ensembles(x, 1, 6, 6, 9).front();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(sorted_channel(e.pixels, c), sorted_channel(x, c));
}

TEST(SampleEnsembles, OversizeRejected) {
  EXPECT_THROW(sample_ensembles(Tensor({3, 4, 4}), 1, 5, 4, 0), dimension_error);
}

TEST(SampleEnsembles, ScatterRoundTrip) {
  const Tensor x = random_tensor({3, 20, 20}, 5);
  for (const auto& e : sample_ensembles(x, 20, 8, 8, 1)) {
    Tensor back({3, 20, 20}, -1.0);
    for (std::size_t i = 0; i < e.permutation.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) back.channel(c)[e.permutation[i]] = e.pixels.channel(c)[i];
    for (std::size_t i = 0; i < e.permutation.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(back.channel(c)[e.permutation[i]], x.channel(c)[e.permutation[i]]);
  }
}

TEST(SampleEnsembles, MeansWithinCentralLimitBound) {
  const Tensor img = scenes::make_scene(96, 96, 7).image;
  const std::size_t n = 32 * 32;
  std::array<double, 3> mu{}, sigma{};
  for (std::size_t c = 0; c < 3; ++c) {
    const auto ch = img.channel(c);
    double s = 0, s2 = 0;
    for (double v : ch) {
      s += v;
      s2 += v * v;
    }
    mu[c] = s / static_cast<double>(ch.size());
    sigma[c] = std::sqrt(s2 / static_cast<double>(ch.size()) - mu[c] * mu[c]);
  }
  const auto es = sample_ensembles(img, 1000, 32, 32, 13);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t inside = 0;
    for (const auto& e : es) {
      double s = 0;
      for (double v : e.pixels.channel(c)) s += v;
      if (std::abs(s / static_cast<double>(n) - mu[c]) <= 3.0 * sigma[c] / std::sqrt(static_cast<double>(n))) ++inside;
    }
    EXPECT_GE(inside, 950u) << "channel " << c;
  }
}

TEST(SubsetMean, ConstantEnsembleHasNoDeviation) {
  const auto e = shuffle_image(Tensor({3, 8, 8}, 0.6), 1);
  for (double d : subset_mean_check(e, 9, 50).max_abs) EXPECT_NEAR(d, 0.0, 1e-15);
}

TEST(SubsetMean, FullSubsetHasNoDeviation) {
  const auto e = shuffle_image(random_tensor({3, 8, 8}, 2), 1);
  for (double d : subset_mean_check(e, 64, 10).max_abs) EXPECT_NEAR(d, 0.0, 1e-15);
}

TEST(SubsetMean, DeviationShrinksWithSubsetSize) {
  const Tensor img = scenes::make_scene(128, 128, 21).image;
  const auto es = sample_ensembles(img, 20, 32, 32, 4);
  std::vector<double> trend;
  for (std::size_t size : {4u, 16u, 64u, 256u}) {
    double acc = 0.0;
    for (const auto& e : es)
      for (double d : subset_mean_check(e, size, 200, 8).mean_abs) acc += d;
    trend.push_back(acc);
  }
  for (std::size_t i = 1; i < trend.size(); ++i) EXPECT_LT(trend[i], trend[i - 1]);
}

TEST(SubsetMean, OversizeRejected) {
  const auto e = shuffle_image(Tensor({1, 4, 4}), 0);
  EXPECT_THROW(subset_mean_check(e, 17, 1), dimension_error);
}

TEST(SubsetStats, MeansLieWithinChannelRange) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = random_tensor({3, 5, 5}, seed);
    const std::vector<std::size_t> pos{0, 3, 7, 24};
    const auto s = subset_stats(x, pos);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto ch = x.channel(c);
      EXPECT_GE(s.channel_means[c], *std::min_element(ch.begin(), ch.end()));
      EXPECT_LE(s.channel_means[c], *std::max_element(ch.begin(), ch.end()));
    }
  }
}

TEST(EdgeAugment, ConstantImageHasNoEdges) {
  const Tensor edges = edge_augment(Tensor({3, 5, 6}, 0.4));
  for (double v : edges.data()) EXPECT_EQ(v, 0.0);
}

TEST(EdgeAugment, VerticalStep) {
  Tensor x({1, 6, 8});
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t xx = 4; xx < 8; ++xx) x.at(0, y, xx) = 1.0;
  const Tensor e = edge_augment(x);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t xx = 0; xx < 8; ++xx) EXPECT_EQ(e.at(0, y, xx), xx == 3 ? 1.0 : 0.0) << y << "," << xx;
}

TEST(EdgeAugment, Homogeneous) {
  const Tensor x = random_tensor({3, 7, 7}, 6);
  Tensor y = x;
  for (double& v : y.data()) v *= 2.5;
  const Tensor ex = edge_augment(x), ey = edge_augment(y);
  for (std::size_t i = 0; i < ex.size(); ++i) EXPECT_NEAR(ey[i], 2.5 * ex[i], 1e-12);
}

TEST(EdgeAugment, TooSmallRejected) { EXPECT_THROW(edge_augment(Tensor({3, 1, 5})), dimension_error); }
